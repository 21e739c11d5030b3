use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense tensor of 64-bit reals. Training math runs in f64; file formats
/// store f32 (see the checkpoint and codebook writers).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gauss() * std).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            2 => self.dims[0],
            _ => panic!("rows() on rank-{} tensor", self.dims.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.dims.len() {
            1 => self.dims[0],
            2 => self.dims[1],
            _ => panic!("cols() on rank-{} tensor", self.dims.len()),
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---- raw kernels shared by the autodiff graph and the inference path ----

/// out[m,n] += a[m,k] * b[k,n], row-major. Blocks of eight output rows
/// share each streamed row of b, and the inner loop stays contiguous in
/// both b and out so it autovectorizes.
pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 8 <= m {
        let (o0123, o4567) = out[i * n..(i + 8) * n].split_at_mut(4 * n);
        let (o01, o23) = o0123.split_at_mut(2 * n);
        let (o0, o1) = o01.split_at_mut(n);
        let (o2, o3) = o23.split_at_mut(n);
        let (o45, o67) = o4567.split_at_mut(2 * n);
        let (o4, o5) = o45.split_at_mut(n);
        let (o6, o7) = o67.split_at_mut(n);
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let c: [f64; 8] = std::array::from_fn(|r| a[(i + r) * k + kk]);
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += c[0] * bv;
                o1[j] += c[1] * bv;
                o2[j] += c[2] * bv;
                o3[j] += c[3] * bv;
                o4[j] += c[4] * bv;
                o5[j] += c[5] * bv;
                o6[j] += c[6] * bv;
                o7[j] += c[7] * bv;
            }
        }
        i += 8;
    }
    if i + 4 <= m {
        let (o01, o23) = out[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (o0, o1) = o01.split_at_mut(n);
        let (o2, o3) = o23.split_at_mut(n);
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let c: [f64; 4] = std::array::from_fn(|r| a[(i + r) * k + kk]);
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += c[0] * bv;
                o1[j] += c[1] * bv;
                o2[j] += c[2] * bv;
                o3[j] += c[3] * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
        i += 1;
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of a vector of finite logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("softmax of non-finite logits".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Probability floor used by every cross-entropy in the crate so that
/// -ln(p) stays finite even for a zero probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// -ln(probs[target]) with the probability clamped at PROB_FLOOR.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::Index(format!(
            "cross_entropy target {} out of range {}",
            target,
            probs.len()
        )));
    }
    Ok(-probs[target].max(PROB_FLOOR).ln())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU (tanh approximation). Smooth everywhere, which keeps central
/// finite-difference gradient checks clean.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_element() {
        let p = softmax(&[3.7]).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        // e^0 = 1, e^{ln 3} = 3 -> [0.25, 0.75]
        let p = softmax(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_preserves_order() {
        let p = softmax(&[1.0, -2.0, 0.5, 9.0]).unwrap();
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p[3] > p[0] && p[0] > p[2] && p[2] > p[1]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let p = vec![0.25; 4];
        for t in 0..4 {
            assert!((cross_entropy(&p, t).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let p = vec![0.0, 1.0, 0.0];
        assert!(cross_entropy(&p, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let p = vec![0.25, 0.75];
        let expect = -(0.25f64.ln());
        assert!((cross_entropy(&p, 0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_out_of_range() {
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn cross_entropy_zero_prob_clamped() {
        let v = cross_entropy(&[0.0, 1.0], 0).unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(v.is_finite());
    }

    #[test]
    fn matmul_small_case() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = transpose(&a, 2, 3);
        let tt = transpose(&t, 3, 2);
        assert_eq!(a, tt);
    }

    #[test]
    fn sigmoid_basics() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-12);
        assert!(sigmoid(30.0) >= 1.0 - 1e-9);
        assert!((sigmoid(2.5) + sigmoid(-2.5) - 1.0).abs() < 1e-12);
    }
}
