//! Procedural dataset of attribute-controlled 32x32 images with paired
//! text, plus the exact compliance oracle that makes control-following
//! measurable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytes;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::vq::Image;

pub const IMAGE_SIZE: usize = 32;

/// The 8-entry palette. Stored as bytes so that pixel values are exact
/// multiples of 1/255 and the dataset file round-trips bit-exactly.
const PALETTE: [( &str, [u8; 3]); 8] = [
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
    ("blue", [0, 0, 255]),
    ("green", [0, 160, 0]),
    ("red", [255, 0, 0]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
];

fn palette_rgb(idx: usize) -> [f64; 3] {
    let [r, g, b] = PALETTE[idx].1;
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

/// Index of the palette color closest to a pixel; ties break low.
fn nearest_palette(rgb: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, (_, c)) in PALETTE.iter().enumerate() {
        let d = (0..3)
            .map(|j| {
                let diff = rgb[j] - c[j] as f64 / 255.0;
                diff * diff
            })
            .sum::<f64>();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub const BACKGROUNDS: [&str; 4] = ["black", "white", "blue", "green"];
pub const SHAPES: [&str; 4] = ["circle", "square", "stripes", "cross"];
pub const SHAPE_COLORS: [&str; 4] = ["red", "yellow", "cyan", "magenta"];
pub const POSITIONS: [&str; 2] = ["center", "corner"];

/// One of the 128 attribute combinations the generator can draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttributeSpec {
    pub background: u8,
    pub shape: u8,
    pub color: u8,
    pub position: u8,
}

pub const SPEC_COUNT: usize = 128;

impl AttributeSpec {
    pub fn from_index(i: usize) -> Self {
        assert!(i < SPEC_COUNT);
        AttributeSpec {
            background: (i / 32) as u8,
            shape: ((i / 8) % 4) as u8,
            color: ((i / 2) % 4) as u8,
            position: (i % 2) as u8,
        }
    }

    pub fn index(&self) -> usize {
        self.background as usize * 32
            + self.shape as usize * 8
            + self.color as usize * 2
            + self.position as usize
    }

    /// Deterministic text: "<color> <shape> <position> on <background>".
    pub fn text(&self) -> Vec<String> {
        vec![
            SHAPE_COLORS[self.color as usize].to_string(),
            SHAPES[self.shape as usize].to_string(),
            POSITIONS[self.position as usize].to_string(),
            "on".to_string(),
            BACKGROUNDS[self.background as usize].to_string(),
        ]
    }

    pub fn parse_text(words: &[String]) -> Result<Self> {
        let err = || {
            Error::InvalidArgument(format!(
                "text {:?} does not name a '<color> <shape> <position> on <background>' spec",
                words
            ))
        };
        if words.len() != 5 || words[3] != "on" {
            return Err(err());
        }
        let color = SHAPE_COLORS.iter().position(|w| *w == words[0]).ok_or_else(err)?;
        let shape = SHAPES.iter().position(|w| *w == words[1]).ok_or_else(err)?;
        let position = POSITIONS.iter().position(|w| *w == words[2]).ok_or_else(err)?;
        let background = BACKGROUNDS.iter().position(|w| *w == words[4]).ok_or_else(err)?;
        Ok(AttributeSpec {
            background: background as u8,
            shape: shape as u8,
            color: color as u8,
            position: position as u8,
        })
    }

    /// All palette words used by the text grammar.
    pub fn lexicon() -> Vec<String> {
        let mut words: Vec<String> = BACKGROUNDS
            .iter()
            .chain(SHAPES.iter())
            .chain(SHAPE_COLORS.iter())
            .chain(POSITIONS.iter())
            .map(|s| s.to_string())
            .collect();
        words.push("on".to_string());
        words.sort();
        words
    }
}

/// Deterministic 32x32 render with seeded jitter (<= 2 px) in shape size
/// and offset so the dataset is not 128 identical images. All geometry is
/// aligned to even pixel coordinates (circles are built from 2x2 cells):
/// patch quantization then only ever sees a small family of axis-aligned
/// edge phases, which a 64-entry codebook represents faithfully.
pub fn render(spec: &AttributeSpec, seed: u64) -> Image {
    let mut rng = Rng::substream(seed, &[0x7265, spec.index() as u64]);
    // rows stay aligned to the 4 px patch grid (jitter lives in x and in
    // the size), so every patch is either solid or a vertical half
    let (top_y, top_x, side) = if spec.position == 0 {
        // center: +-2 size jitter and +-2 x offset jitter
        let half = 10 + (rng.below(2) as i64 * 4 - 2);
        let jx = (rng.below(3) as i64 - 1) * 2;
        (16 - half, 16 - half + jx, 2 * half)
    } else {
        // corner (top-left): fixed size, x jitter; keeps the border ring
        // clear and the centroid well away from the image center
        (4, 2 + rng.below(2) as i64 * 2, 16)
    };
    let arm = 4i64;

    let bg = palette_rgb(spec.background as usize);
    let fg = palette_rgb(4 + spec.color as usize);
    let mut img = Image::new(IMAGE_SIZE, IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            img.set(y, x, bg);
        }
    }

    let radius = side as f64 / 2.0 - 1.0;
    // stripe and cross bars snap to the 4 px patch grid, so their patches
    // quantize losslessly; squares and circles keep 2 px phases
    let stripe_top = if spec.position == 0 { 8 } else { 4 };
    let hb = (top_y + (side - arm) / 2) & !3;
    let vb = (top_x + (side - arm) / 2) & !3;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let yy = y as i64;
            let xx = x as i64;
            let ry = yy - top_y;
            let rx = xx - top_x;
            if rx < 0 || rx >= side {
                continue;
            }
            let in_rows = ry >= 0 && ry < side;
            let inside = match spec.shape {
                0 => {
                    // blocky disk: paint whole 4x4 cells by cell-center distance
                    in_rows && {
                        let dy = (4 * (ry / 4) + 2 - side / 2) as f64;
                        let dx = (4 * (rx / 4) + 2 - side / 2) as f64;
                        dy * dy + dx * dx <= radius * radius
                    }
                }
                1 => in_rows,
                2 => {
                    // two full-width bars with a fixed 8 px gap
                    (yy >= stripe_top && yy < stripe_top + 4)
                        || (yy >= stripe_top + 12 && yy < stripe_top + 16)
                }
                3 => {
                    (yy >= hb && yy < hb + arm) || (xx >= vb && xx < vb + arm && in_rows)
                }
                _ => unreachable!(),
            };
            if inside {
                img.set(y, x, fg);
            }
        }
    }
    img
}

// ---- compliance oracle ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Recovered {
    background: Option<u8>,
    shape: Option<u8>,
    color: Option<u8>,
    position: Option<u8>,
}

/// Largest connected component of shape-colored pixels. Labeling runs on a
/// mask dilated by 4 px vertically so the bars of a striped shape count as
/// one component; only real shape pixels are returned.
fn shape_component(class: &[usize], h: usize, w: usize) -> Vec<usize> {
    let is_shape = |i: usize| class[i] >= 4;
    let mut dil = vec![false; h * w];
    for i in 0..h * w {
        if is_shape(i) {
            let (y, x) = (i / w, i % w);
            for dy in -4i64..=4 {
                let yy = y as i64 + dy;
                if (0..h as i64).contains(&yy) {
                    dil[yy as usize * w + x] = true;
                }
            }
        }
    }
    let mut label = vec![usize::MAX; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut next = 0;
    for start in 0..h * w {
        if !dil[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = next;
        while let Some(i) = stack.pop() {
            if is_shape(i) {
                members.push(i);
            }
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if dil[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        if members.len() > best.len() {
            best = members;
        }
        next += 1;
    }
    best
}

/// Row-profile statistics of a component: m1 = mean row span / box width,
/// quad = occupancy of the four quadrant boxes near the bounding-box
/// corners (a plus-shape leaves them empty, a disk fills them partially,
/// a square fills them), plus interior-gap-band and centroid info. The
/// bounding box is trimmed of near-empty fringe rows/columns so stray
/// quantization specks cannot inflate it.
struct CompStats {
    m1: f64,
    quad: f64,
    has_gap_band: bool,
    cy: f64,
    cx: f64,
}

fn comp_stats(comp: &[usize], w: usize) -> CompStats {
    let (mut sy, mut sx) = (0.0, 0.0);
    for &i in comp {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
    }
    let n = comp.len() as f64;
    let (cy, cx) = (sy / n, sx / n);

    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for &i in comp {
        let (y, x) = (i / w, i % w);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let mut row_count = vec![0usize; y1 - y0 + 1];
    let mut col_count = vec![0usize; x1 - x0 + 1];
    for &i in comp {
        row_count[i / w - y0] += 1;
        col_count[i % w - x0] += 1;
    }
    let rmax = *row_count.iter().max().unwrap();
    let cmax = *col_count.iter().max().unwrap();
    let rthr = (rmax / 8).max(2);
    let cthr = (cmax / 8).max(2);
    while y1 > y0 && row_count[y1 - y0] < rthr {
        y1 -= 1;
    }
    while y0 < y1 && row_count[0] < rthr {
        y0 += 1;
        row_count.remove(0);
    }
    while x1 > x0 && col_count[x1 - x0] < cthr {
        x1 -= 1;
    }
    while x0 < x1 && col_count[0] < cthr {
        x0 += 1;
        col_count.remove(0);
    }

    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut row_min = vec![usize::MAX; bh];
    let mut row_max = vec![0usize; bh];
    let mut in_box = vec![0usize; bh];
    // quadrant boxes sized to land between the arms of a plus-shape
    let s = (bh.min(bw) * 3 / 8).max(1);
    let mut quad_hits = 0usize;
    for &i in comp {
        let (y, x) = (i / w, i % w);
        if y < y0 || y > y1 || x < x0 || x > x1 {
            continue;
        }
        let r = y - y0;
        let c = x - x0;
        row_min[r] = row_min[r].min(c);
        row_max[r] = row_max[r].max(c);
        in_box[r] += 1;
        if (r < s || r >= bh - s) && (c < s || c >= bw - s) {
            quad_hits += 1;
        }
    }

    let spans: Vec<f64> = (0..bh)
        .map(|r| {
            if in_box[r] == 0 {
                0.0
            } else {
                (row_max[r] - row_min[r] + 1) as f64
            }
        })
        .collect();

    // stripes: a >=4-row near-empty interior band bounded by full-width
    // bar rows on both sides (cross-arm erosion gaps lack wide bounds)
    let mut has_gap_band = false;
    let mut r = 1;
    while r + 1 < bh {
        if in_box[r] * 5 <= bw {
            let start = r;
            let mut end = r;
            while end + 1 < bh && in_box[end + 1] * 5 <= bw {
                end += 1;
            }
            if end - start + 1 >= 4
                && start >= 1
                && end + 1 < bh
                && spans[start - 1] >= 0.75 * bw as f64
                && spans[end + 1] >= 0.75 * bw as f64
            {
                has_gap_band = true;
            }
            r = end + 1;
        } else {
            r += 1;
        }
    }

    let m1 = spans.iter().sum::<f64>() / (bh as f64 * bw as f64);
    let quad = quad_hits as f64 / (4 * s * s) as f64;

    CompStats {
        m1,
        quad,
        has_gap_band,
        cy,
        cx,
    }
}

fn classify_shape(st: &CompStats) -> u8 {
    if st.has_gap_band {
        return 2;
    }
    // prototypes measured on pristine renders; the quadrant occupancy
    // carries most of the separation, the span ratio m1 backs it up
    let protos = [
        (0u8, 0.80, 0.60), // circle
        (1u8, 1.00, 1.00), // square
        (3u8, 0.37, 0.00), // cross
    ];
    let mut best = protos[0].0;
    let mut best_d = f64::INFINITY;
    for &(sh, p1, pq) in &protos {
        let d = (st.m1 - p1) * (st.m1 - p1) + 2.0 * (st.quad - pq) * (st.quad - pq);
        if d < best_d {
            best_d = d;
            best = sh;
        }
    }
    best
}

fn recover(image: &Image) -> Recovered {
    let (h, w) = (image.height, image.width);
    let class: Vec<usize> = (0..h * w)
        .map(|i| nearest_palette(image.get(i / w, i % w)))
        .collect();

    // background: majority palette class on the 1px border ring
    let mut counts = [0usize; 8];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                counts[class[y * w + x]] += 1;
            }
        }
    }
    let border_major = (0..8).max_by_key(|&i| (counts[i], 8 - i)).unwrap();
    let background = if border_major < 4 {
        Some(border_major as u8)
    } else {
        None
    };

    let comp = shape_component(&class, h, w);
    if comp.len() < 8 {
        return Recovered {
            background,
            shape: None,
            color: None,
            position: None,
        };
    }

    // dominant shape color within the component
    let mut ccounts = [0usize; 8];
    for &i in &comp {
        ccounts[class[i]] += 1;
    }
    let color_major = (4..8).max_by_key(|&i| (ccounts[i], 8 - i)).unwrap();
    let color = Some((color_major - 4) as u8);

    let st = comp_stats(&comp, w);
    let shape = Some(classify_shape(&st));

    // centroid distance to image center decides the position class
    let mid = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    let dist = ((st.cy - mid) * (st.cy - mid) + (st.cx - mid) * (st.cx - mid)).sqrt();
    let position = Some(if dist <= 4.3 { 0u8 } else { 1u8 });

    Recovered {
        background,
        shape,
        color,
        position,
    }
}

#[doc(hidden)]
pub fn debug_recover(image: &Image) -> (Option<u8>, Option<u8>, Option<u8>, Option<u8>) {
    let r = recover(image);
    (r.background, r.shape, r.color, r.position)
}

#[doc(hidden)]
pub fn debug_row_profile(image: &Image) -> String {
    let (h, w) = (image.height, image.width);
    let class: Vec<usize> = (0..h * w)
        .map(|i| nearest_palette(image.get(i / w, i % w)))
        .collect();
    let comp = shape_component(&class, h, w);
    let mut rows = vec![0usize; h];
    for &i in &comp {
        rows[i / w] += 1;
    }
    rows.iter()
        .enumerate()
        .map(|(y, c)| format!("{y:2}:{c:2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[doc(hidden)]
pub fn debug_stats(image: &Image) -> (f64, f64) {
    let (h, w) = (image.height, image.width);
    let class: Vec<usize> = (0..h * w)
        .map(|i| nearest_palette(image.get(i / w, i % w)))
        .collect();
    let comp = shape_component(&class, h, w);
    if comp.is_empty() {
        return (0.0, 0.0);
    }
    let st = comp_stats(&comp, w);
    (st.m1, st.quad)
}

/// Checks an image against the attributes named by `words` using
/// deterministic pixel statistics. Unparseable text is an error; any
/// recovery failure is a plain non-compliance.
pub fn compliance_oracle(image: &Image, words: &[String]) -> Result<bool> {
    let claimed = AttributeSpec::parse_text(words)?;
    let got = recover(image);
    Ok(got.background == Some(claimed.background)
        && got.shape == Some(claimed.shape)
        && got.color == Some(claimed.color)
        && got.position == Some(claimed.position))
}

// ---- dataset ----

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub seed: u64,
    pub spec: AttributeSpec,
    pub text: Vec<String>,
    pub image: Image,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
}

/// Generates `n` records. Uniform spec draws by default; `stratified`
/// cycles the 128 specs evenly before a seeded shuffle.
pub fn make_dataset(n: usize, seed: u64, stratified: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset of zero records".into()));
    }
    let mut rng = Rng::substream(seed, &[0x6474]);
    let mut spec_indices: Vec<usize> = if stratified {
        let mut v: Vec<usize> = (0..n).map(|i| i % SPEC_COUNT).collect();
        rng.shuffle(&mut v);
        v
    } else {
        (0..n).map(|_| rng.below(SPEC_COUNT)).collect()
    };
    let records = spec_indices
        .drain(..)
        .enumerate()
        .map(|(i, si)| {
            let spec = AttributeSpec::from_index(si);
            let rec_seed = derive_seed(seed, &[0x7263, i as u64]);
            DatasetRecord {
                seed: rec_seed,
                spec,
                text: spec.text(),
                image: render(&spec, rec_seed),
            }
        })
        .collect();
    Ok(Dataset { records })
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"UFCD")?;
        bytes::write_u32(&mut w, 1)?;
        bytes::write_u32(&mut w, self.records.len() as u32)?;
        for rec in &self.records {
            bytes::write_u64(&mut w, rec.seed)?;
            w.write_all(&[
                rec.spec.background,
                rec.spec.shape,
                rec.spec.color,
                rec.spec.position,
            ])?;
            let text = rec.text.join(" ");
            bytes::write_u32(&mut w, text.len() as u32)?;
            w.write_all(text.as_bytes())?;
            let img: Vec<u8> = rec
                .image
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            w.write_all(&img)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        bytes::expect_magic(&mut r, b"UFCD", "dataset")?;
        let version = bytes::read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("dataset version {version}")));
        }
        let count = bytes::read_u32(&mut r)? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let seed = bytes::read_u64(&mut r)?;
            let mut spec_bytes = [0u8; 4];
            r.read_exact(&mut spec_bytes)?;
            let spec = AttributeSpec {
                background: spec_bytes[0],
                shape: spec_bytes[1],
                color: spec_bytes[2],
                position: spec_bytes[3],
            };
            if spec.background > 3 || spec.shape > 3 || spec.color > 3 || spec.position > 1 {
                return Err(Error::Format("spec attribute out of range".into()));
            }
            let tlen = bytes::read_u32(&mut r)? as usize;
            let tbytes = bytes::read_exact(&mut r, tlen)?;
            let text: Vec<String> = String::from_utf8(tbytes)
                .map_err(|_| Error::Format("dataset text not utf-8".into()))?
                .split(' ')
                .map(|s| s.to_string())
                .collect();
            let ibytes = bytes::read_exact(&mut r, IMAGE_SIZE * IMAGE_SIZE * 3)?;
            let mut image = Image::new(IMAGE_SIZE, IMAGE_SIZE);
            for (p, b) in image.pixels.iter_mut().zip(&ibytes) {
                *p = *b as f64 / 255.0;
            }
            records.push(DatasetRecord {
                seed,
                spec,
                text,
                image,
            });
        }
        Ok(Dataset { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic() {
        let spec = AttributeSpec::from_index(77);
        let a = render(&spec, 123);
        let b = render(&spec, 123);
        assert_eq!(a, b);
        let c = render(&spec, 124);
        assert_ne!(a, c);
    }

    #[test]
    fn corner_shapes_leave_origin_as_background() {
        for si in 0..SPEC_COUNT {
            let spec = AttributeSpec::from_index(si);
            if spec.position != 1 {
                continue;
            }
            for s in 0..8u64 {
                let img = render(&spec, s);
                let bg = palette_rgb(spec.background as usize);
                assert_eq!(img.get(0, 0), bg, "spec {si} seed {s}");
            }
        }
    }

    #[test]
    fn oracle_accepts_every_pristine_render() {
        for si in 0..SPEC_COUNT {
            let spec = AttributeSpec::from_index(si);
            for s in 0..8u64 {
                let img = render(&spec, s);
                assert!(
                    compliance_oracle(&img, &spec.text()).unwrap(),
                    "spec {si} ({:?}) seed {s}",
                    spec.text().join(" ")
                );
            }
        }
    }

    #[test]
    fn oracle_rejects_every_single_attribute_mutation() {
        for si in 0..SPEC_COUNT {
            let spec = AttributeSpec::from_index(si);
            let img = render(&spec, 3);
            for mi in 0..SPEC_COUNT {
                let m = AttributeSpec::from_index(mi);
                let differs = (m.background != spec.background) as u8
                    + (m.shape != spec.shape) as u8
                    + (m.color != spec.color) as u8
                    + (m.position != spec.position) as u8;
                if differs == 1 {
                    assert!(
                        !compliance_oracle(&img, &m.text()).unwrap(),
                        "spec {si} vs mutation {mi}"
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_rejects_unparseable_text() {
        let img = render(&AttributeSpec::from_index(0), 0);
        let words: Vec<String> = ["purple", "blob"].iter().map(|s| s.to_string()).collect();
        assert!(compliance_oracle(&img, &words).is_err());
    }

    #[test]
    fn chance_rate_is_about_one_in_128() {
        // random image against an independently random spec's text
        let mut rng = Rng::new(999);
        let mut hits = 0;
        let n = 20_000;
        for _ in 0..n {
            let a = AttributeSpec::from_index(rng.below(SPEC_COUNT));
            let b = AttributeSpec::from_index(rng.below(SPEC_COUNT));
            let img = render(&a, rng.below(1 << 20) as u64);
            if compliance_oracle(&img, &b.text()).unwrap() {
                hits += 1;
            }
        }
        let rate = hits as f64 / n as f64;
        assert!(
            (0.003..0.016).contains(&rate),
            "chance compliance rate {rate}"
        );
    }

    #[test]
    fn stratified_dataset_covers_specs_evenly() {
        let ds = make_dataset(SPEC_COUNT * 8, 7, true).unwrap();
        let mut counts = [0usize; SPEC_COUNT];
        for r in &ds.records {
            counts[r.spec.index()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 8));
    }

    #[test]
    fn dataset_file_round_trip_is_exact() {
        let ds = make_dataset(32, 5, false).unwrap();
        let dir = std::env::temp_dir().join("ufcgen-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.ufcd");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = std::env::temp_dir().join("ufcgen-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ufcd");
        let p2 = dir.join("b.ufcd");
        make_dataset(16, 9, false).unwrap().save(&p1).unwrap();
        make_dataset(16, 9, false).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn oracle_survives_vector_quantization() {
        // fit a codebook on a small dataset, then check all 128 specs
        // after an encode/decode round trip
        use crate::vq;
        let ds = make_dataset(SPEC_COUNT * 4, 11, true).unwrap();
        let mut patches = Vec::new();
        for rec in &ds.records {
            patches.extend(vq::extract_patches(&rec.image, 4, 4).unwrap());
        }
        let (cb, _) = vq::fit_codebook(&patches, 48, 64, 25, 13).unwrap();
        let mut ok = 0;
        let mut total = 0;
        for si in 0..SPEC_COUNT {
            let spec = AttributeSpec::from_index(si);
            for s in 0..2u64 {
                let img = render(&spec, s);
                let grid = vq::encode_image(&img, &cb, 4, 4).unwrap();
                let back = vq::decode_tokens(&grid, &cb, 4, 4).unwrap();
                total += 1;
                if compliance_oracle(&back, &spec.text()).unwrap() {
                    ok += 1;
                }
            }
        }
        let rate = ok as f64 / total as f64;
        assert!(rate >= 0.95, "vq-tolerance rate {rate}");
    }
}
