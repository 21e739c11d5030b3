//! Stage one: images to/from grids of discrete code-words via a learned
//! patch codebook (k-means over flattened patches).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::bytes;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// RGB image with pixel values in [0, 1], row-major, 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>, // height * width * 3
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o] = rgb[0];
        self.pixels[o + 1] = rgb[1];
        self.pixels[o + 2] = rgb[2];
    }

    /// Pixel-aligned crop; bounds are checked.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w}@({y0},{x0}) out of {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y0 + y, x0 + x));
            }
        }
        Ok(out)
    }
}

/// Grid of code indices; the discrete representation of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub codes: Vec<u16>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "token grid {h}x{w} needs {} codes, got {}",
                h * w,
                codes.len()
            )));
        }
        Ok(TokenGrid { h, w, codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// The discrete visual vocabulary: K centroid vectors of patch dimension.
/// Centroids keep their fitted index order, so code ids are stable.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f64>, // k * dim
}

/// Per-iteration objective values from a k-means fit.
#[derive(Clone, Debug, Default)]
pub struct FitStats {
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, code: usize) -> &[f64] {
        &self.centroids[code * self.dim..(code + 1) * self.dim]
    }

    /// Side length of the square patch this codebook quantizes.
    pub fn patch_side(&self) -> Result<usize> {
        let cells = self.dim / 3;
        let side = (cells as f64).sqrt().round() as usize;
        if self.dim % 3 != 0 || side * side != cells {
            return Err(Error::InvalidArgument(format!(
                "codebook dim {} is not a square rgb patch",
                self.dim
            )));
        }
        Ok(side)
    }

    pub fn from_centroids(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::InvalidArgument("malformed centroid data".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite centroid".into()));
        }
        Ok(Codebook {
            k: centroids.len() / dim,
            dim,
            centroids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"UFCV")?;
        bytes::write_u32(&mut w, 1)?;
        bytes::write_u32(&mut w, self.k as u32)?;
        bytes::write_u32(&mut w, self.dim as u32)?;
        for &v in &self.centroids {
            bytes::write_f32(&mut w, v as f32)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        bytes::expect_magic(&mut r, b"UFCV", "codebook")?;
        let version = bytes::read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("codebook version {version}")));
        }
        let k = bytes::read_u32(&mut r)? as usize;
        let dim = bytes::read_u32(&mut r)? as usize;
        if k == 0 || dim == 0 {
            return Err(Error::Format("empty codebook".into()));
        }
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            centroids.push(bytes::read_f32(&mut r)? as f64);
        }
        Codebook::from_centroids(dim, centroids)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Index of the closest code-word by L2 distance; ties break to the
/// lowest index.
pub fn nearest_code(v: &[f64], codebook: &Codebook) -> Result<usize> {
    if v.len() != codebook.dim {
        return Err(Error::InvalidArgument(format!(
            "vector dim {} vs codebook dim {}",
            v.len(),
            codebook.dim
        )));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..codebook.k {
        let d = sq_dist(v, codebook.centroid(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    Ok(best)
}

fn assign_all(patches: &[f64], dim: usize, centroids: &[f64], k: usize) -> (Vec<usize>, f64) {
    let n = patches.len() / dim;
    let mut assign = vec![0usize; n];
    let mut objective = 0.0;
    for i in 0..n {
        let p = &patches[i * dim..(i + 1) * dim];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assign[i] = best;
        objective += best_d;
    }
    (assign, objective)
}

/// k-means with k-means++ seeding over flattened patches (`patches` holds
/// n·dim reals). Stops at `max_iters` or when the relative objective
/// improvement drops below 1e-6. Empty clusters are reseeded to the point
/// farthest from its assigned centroid.
pub fn fit_codebook(
    patches: &[f64],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Codebook, FitStats)> {
    if dim == 0 || patches.len() % dim != 0 {
        return Err(Error::InvalidArgument("patches not a multiple of dim".into()));
    }
    let n = patches.len() / dim;
    if n < k || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least k={k} patches, got {n}"
        )));
    }
    let mut rng = Rng::substream(seed, &[0x6b6d]);

    // k-means++ seeding: first uniform, then D^2-weighted.
    let mut centroids = vec![0.0; k * dim];
    let first = rng.below(n);
    centroids[..dim].copy_from_slice(&patches[first * dim..(first + 1) * dim]);
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| sq_dist(&patches[i * dim..(i + 1) * dim], &centroids[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total <= 0.0 {
            // all points coincide with chosen centroids; any point works
            rng.below(n)
        } else {
            rng.weighted(&min_d)
        };
        let src = &patches[pick * dim..(pick + 1) * dim];
        centroids[c * dim..(c + 1) * dim].copy_from_slice(src);
        for i in 0..n {
            let d = sq_dist(&patches[i * dim..(i + 1) * dim], src);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }

    let mut stats = FitStats::default();
    let mut prev_obj = f64::INFINITY;
    for iter in 0..max_iters {
        let (assign, objective) = assign_all(patches, dim, &centroids, k);
        stats.objective.push(objective);
        stats.iterations = iter + 1;

        // centroid update
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim]
                .iter_mut()
                .zip(&patches[i * dim..(i + 1) * dim])
            {
                *s += v;
            }
        }
        let mut reseeded = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                reseeded.push(c);
                continue;
            }
            for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                *dst = s / counts[c] as f64;
            }
        }
        for c in reseeded {
            // farthest point from its assigned centroid takes over the slot
            let mut far = 0;
            let mut far_d = -1.0;
            for i in 0..n {
                let d = sq_dist(
                    &patches[i * dim..(i + 1) * dim],
                    &centroids[assign[i] * dim..(assign[i] + 1) * dim],
                );
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
            centroids[c * dim..(c + 1) * dim]
                .copy_from_slice(&patches[far * dim..(far + 1) * dim]);
        }

        if prev_obj.is_finite() {
            let improvement = (prev_obj - objective) / prev_obj.max(f64::MIN_POSITIVE);
            if improvement < 1e-6 {
                break;
            }
        }
        prev_obj = objective;
    }

    Ok((Codebook::from_centroids(dim, centroids)?, stats))
}

/// Best of several independent fits by final objective; restart seeds are
/// derived from `seed`. Ties keep the earliest restart.
pub fn fit_codebook_restarts(
    patches: &[f64],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
    restarts: usize,
) -> Result<(Codebook, FitStats)> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("zero restarts".into()));
    }
    let mut best: Option<(Codebook, FitStats)> = None;
    for r in 0..restarts {
        let run_seed = crate::rng::derive_seed(seed, &[0x6669, r as u64]);
        let (cb, stats) = fit_codebook(patches, dim, k, max_iters, run_seed)?;
        let obj = *stats.objective.last().unwrap_or(&f64::INFINITY);
        let better = match &best {
            None => true,
            Some((_, s)) => obj < *s.objective.last().unwrap_or(&f64::INFINITY),
        };
        if better {
            best = Some((cb, stats));
        }
    }
    Ok(best.unwrap())
}

/// Flattens the image into row-major (patch_h * patch_w * 3)-dim patch
/// vectors, patches enumerated row-major over the grid.
pub fn extract_patches(image: &Image, patch_h: usize, patch_w: usize) -> Result<Vec<f64>> {
    if patch_h == 0
        || patch_w == 0
        || image.height % patch_h != 0
        || image.width % patch_w != 0
    {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} not divisible by patch {patch_h}x{patch_w}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch_h, image.width / patch_w);
    let dim = patch_h * patch_w * 3;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_h {
                for px in 0..patch_w {
                    let rgb = image.get(gy * patch_h + py, gx * patch_w + px);
                    out.extend_from_slice(&rgb);
                }
            }
        }
    }
    Ok(out)
}

/// Quantizes an image to its token grid: one nearest code per patch.
pub fn encode_image(
    image: &Image,
    codebook: &Codebook,
    patch_h: usize,
    patch_w: usize,
) -> Result<TokenGrid> {
    let patches = extract_patches(image, patch_h, patch_w)?;
    let dim = patch_h * patch_w * 3;
    if dim != codebook.dim {
        return Err(Error::InvalidArgument(format!(
            "patch dim {dim} vs codebook dim {}",
            codebook.dim
        )));
    }
    let (gh, gw) = (image.height / patch_h, image.width / patch_w);
    let mut codes = Vec::with_capacity(gh * gw);
    for i in 0..gh * gw {
        codes.push(nearest_code(&patches[i * dim..(i + 1) * dim], codebook)? as u16);
    }
    TokenGrid::new(gh, gw, codes)
}

/// Paints each grid cell with its centroid patch; output clamped to [0, 1].
pub fn decode_tokens(
    grid: &TokenGrid,
    codebook: &Codebook,
    patch_h: usize,
    patch_w: usize,
) -> Result<Image> {
    let dim = patch_h * patch_w * 3;
    if dim != codebook.dim {
        return Err(Error::InvalidArgument(format!(
            "patch dim {dim} vs codebook dim {}",
            codebook.dim
        )));
    }
    let mut image = Image::new(grid.h * patch_h, grid.w * patch_w);
    for gy in 0..grid.h {
        for gx in 0..grid.w {
            let code = grid.codes[gy * grid.w + gx] as usize;
            if code >= codebook.k {
                return Err(Error::Index(format!(
                    "code {code} out of codebook size {}",
                    codebook.k
                )));
            }
            let c = codebook.centroid(code);
            let mut i = 0;
            for py in 0..patch_h {
                for px in 0..patch_w {
                    let rgb = [
                        c[i].clamp(0.0, 1.0),
                        c[i + 1].clamp(0.0, 1.0),
                        c[i + 2].clamp(0.0, 1.0),
                    ];
                    image.set(gy * patch_h + py, gx * patch_w + px, rgb);
                    i += 3;
                }
            }
        }
    }
    Ok(image)
}

/// 10 log10(1 / MSE) in dB; +inf for identical images.
pub fn reconstruction_psnr(original: &Image, reconstruction: &Image) -> Result<f64> {
    if original.height != reconstruction.height || original.width != reconstruction.width {
        return Err(Error::InvalidArgument(format!(
            "psnr dims {}x{} vs {}x{}",
            original.height, original.width, reconstruction.height, reconstruction.width
        )));
    }
    let mse: f64 = original
        .pixels
        .iter()
        .zip(&reconstruction.pixels)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        / original.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_codebook() -> Codebook {
        Codebook::from_centroids(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn nearest_code_by_inspection() {
        let cb = toy_codebook();
        assert_eq!(nearest_code(&[0.2, 0.1], &cb).unwrap(), 0);
    }

    #[test]
    fn nearest_code_tie_breaks_low() {
        let cb = toy_codebook();
        assert_eq!(nearest_code(&[0.5, 0.5], &cb).unwrap(), 0);
    }

    #[test]
    fn nearest_code_dim_mismatch() {
        let cb = toy_codebook();
        assert!(nearest_code(&[0.5], &cb).is_err());
    }

    #[test]
    fn nearest_code_matches_exhaustive_scan() {
        let mut rng = Rng::new(42);
        let dim = 6;
        let k = 17;
        let centroids: Vec<f64> = (0..k * dim).map(|_| rng.uniform()).collect();
        let cb = Codebook::from_centroids(dim, centroids.clone()).unwrap();
        for _ in 0..1000 {
            let v: Vec<f64> = (0..dim).map(|_| rng.uniform() * 2.0 - 0.5).collect();
            let got = nearest_code(&v, &cb).unwrap();
            let mut want = 0;
            let mut want_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(&v, &centroids[c * dim..(c + 1) * dim]);
                if d < want_d {
                    want_d = d;
                    want = c;
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let patches = vec![0.0, 0.0, 2.0, 0.0, 1.0, 3.0];
        let (cb, _) = fit_codebook(&patches, 2, 1, 10, 1).unwrap();
        assert!((cb.centroid(0)[0] - 1.0).abs() < 1e-12);
        assert!((cb.centroid(0)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_exact_points_recovered() {
        // 3 distinct points, k=3: centroids must be exactly those points
        let pts = [[0.0, 0.0], [5.0, 5.0], [-3.0, 4.0]];
        let flat: Vec<f64> = pts.iter().flatten().cloned().collect();
        let (cb, stats) = fit_codebook(&flat, 2, 3, 20, 9).unwrap();
        let last = *stats.objective.last().unwrap();
        assert!(last < 1e-12);
        for p in &pts {
            let c = nearest_code(p, &cb).unwrap();
            assert!(sq_dist(p, cb.centroid(c)) < 1e-12);
        }
    }

    #[test]
    fn kmeans_k2_matches_exhaustive_partition_search() {
        // tiny 1-d set with an unambiguous two-cluster structure
        let pts = [0.0, 0.2, 0.4, 10.0, 10.3, 10.6, 9.8];
        let (cb, stats) = fit_codebook(&pts, 1, 2, 50, 3).unwrap();
        let got = *stats.objective.last().unwrap();
        // brute force: all 2^n assignments
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << pts.len()) {
            let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0, 0.0, 0);
            for (i, &p) in pts.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    s1 += p;
                    n1 += 1;
                } else {
                    s0 += p;
                    n0 += 1;
                }
            }
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
            let obj: f64 = pts
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let m = if mask & (1 << i) != 0 { m1 } else { m0 };
                    (p - m) * (p - m)
                })
                .sum();
            best = best.min(obj);
        }
        assert!((got - best).abs() < 1e-9, "kmeans {got} vs brute {best}");
        assert_eq!(nearest_code(&[0.1], &cb).unwrap() == nearest_code(&[0.3], &cb).unwrap(), true);
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let mut rng = Rng::new(4);
        let patches: Vec<f64> = (0..500 * 3).map(|_| rng.uniform()).collect();
        let (_, stats) = fit_codebook(&patches, 3, 8, 40, 7).unwrap();
        for w in stats.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn kmeans_too_few_patches() {
        assert!(fit_codebook(&[1.0, 2.0], 1, 3, 10, 0).is_err());
    }

    fn tiled_image(cb: &Codebook, grid: &TokenGrid, ph: usize, pw: usize) -> Image {
        decode_tokens(grid, cb, ph, pw).unwrap()
    }

    fn random_codebook(k: usize, ph: usize, pw: usize, seed: u64) -> Codebook {
        let mut rng = Rng::new(seed);
        let dim = ph * pw * 3;
        // spread centroids out so nearest-code assignments are unambiguous
        let centroids: Vec<f64> = (0..k * dim).map(|_| rng.uniform()).collect();
        Codebook::from_centroids(dim, centroids).unwrap()
    }

    #[test]
    fn encode_recovers_centroid_tiling() {
        let cb = random_codebook(5, 2, 2, 8);
        let grid = TokenGrid::new(3, 4, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]).unwrap();
        let img = tiled_image(&cb, &grid, 2, 2);
        let back = encode_image(&img, &cb, 2, 2).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn encode_shape_contract() {
        let cb = random_codebook(4, 4, 4, 2);
        let img = Image::new(32, 32);
        let grid = encode_image(&img, &cb, 4, 4).unwrap();
        assert_eq!((grid.h, grid.w), (8, 8));
    }

    #[test]
    fn encode_divisibility_error() {
        let cb = random_codebook(4, 5, 5, 2);
        let img = Image::new(32, 32);
        assert!(encode_image(&img, &cb, 5, 5).is_err());
    }

    #[test]
    fn encode_matches_per_patch_brute_force() {
        let cb = random_codebook(9, 2, 2, 3);
        let mut rng = Rng::new(10);
        let mut img = Image::new(8, 8);
        for v in img.pixels.iter_mut() {
            *v = rng.uniform();
        }
        let grid = encode_image(&img, &cb, 2, 2).unwrap();
        let patches = extract_patches(&img, 2, 2).unwrap();
        for i in 0..grid.len() {
            let want = nearest_code(&patches[i * 12..(i + 1) * 12], &cb).unwrap();
            assert_eq!(grid.codes[i] as usize, want);
        }
    }

    #[test]
    fn decode_all_zero_grid_tiles_centroid_zero() {
        let cb = random_codebook(3, 2, 2, 5);
        let grid = TokenGrid::new(2, 2, vec![0; 4]).unwrap();
        let img = decode_tokens(&grid, &cb, 2, 2).unwrap();
        let c = cb.centroid(0);
        assert!((img.get(0, 0)[0] - c[0].clamp(0.0, 1.0)).abs() < 1e-12);
        assert!((img.get(3, 3)[2] - c[11].clamp(0.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_invalid_code() {
        let cb = random_codebook(3, 2, 2, 5);
        let grid = TokenGrid::new(1, 1, vec![7]).unwrap();
        assert!(decode_tokens(&grid, &cb, 2, 2).is_err());
    }

    #[test]
    fn encode_decode_fixed_point_on_random_grids() {
        let cb = random_codebook(16, 2, 2, 11);
        let mut rng = Rng::new(12);
        for _ in 0..1000 {
            let codes: Vec<u16> = (0..12).map(|_| rng.below(16) as u16).collect();
            let grid = TokenGrid::new(3, 4, codes).unwrap();
            let img = decode_tokens(&grid, &cb, 2, 2).unwrap();
            let back = encode_image(&img, &cb, 2, 2).unwrap();
            assert_eq!(back, grid);
        }
    }

    #[test]
    fn psnr_identical_is_inf() {
        let img = Image::new(4, 4);
        assert!(reconstruction_psnr(&img, &img).unwrap().is_infinite());
    }

    #[test]
    fn psnr_zero_db_at_unit_mse() {
        let a = Image::new(4, 4);
        let mut b = Image::new(4, 4);
        for v in b.pixels.iter_mut() {
            *v = 1.0;
        }
        assert!(reconstruction_psnr(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_twenty_db_at_mse_hundredth() {
        let a = Image::new(4, 4);
        let mut b = Image::new(4, 4);
        for v in b.pixels.iter_mut() {
            *v = 0.1;
        }
        assert!((reconstruction_psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_dim_mismatch() {
        assert!(reconstruction_psnr(&Image::new(4, 4), &Image::new(4, 5)).is_err());
    }

    #[test]
    fn codebook_file_round_trip() {
        let cb = random_codebook(6, 2, 2, 20);
        let dir = std::env::temp_dir().join("ufcgen-vq-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cb.ufcv");
        cb.save(&path).unwrap();
        let loaded = Codebook::load(&path).unwrap();
        assert_eq!(loaded.k(), cb.k());
        assert_eq!(loaded.dim(), cb.dim());
        // storage is f32; loaded centroids match to f32 precision
        for (a, b) in loaded.centroids.iter().zip(&cb.centroids) {
            assert!((a - b).abs() < 1e-6);
        }
        std::fs::remove_file(&path).unwrap();
    }
}
