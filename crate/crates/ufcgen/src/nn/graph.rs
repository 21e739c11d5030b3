//! Reverse-mode autodiff over a per-forward-pass tape.
//!
//! Ops append nodes to the tape; `backward` replays it in reverse. The tape
//! is single-use: it must be rebuilt for every forward pass, and calling
//! `backward` twice is a state error.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::tensor::{
    self, gelu, gelu_grad, matmul_acc, sigmoid, softmax_in_place, Tensor, PROB_FLOOR,
};

type BackFn = Box<dyn Fn(&Tensor, &[Node], &mut [Option<Tensor>])>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    done: Cell<bool>,
}

/// Handle to a node in a `Graph`.
pub type Var = usize;

fn grad_slot<'a>(
    grads: &'a mut [Option<Tensor>],
    id: usize,
    dims: &[usize],
) -> &'a mut [f64] {
    grads[id]
        .get_or_insert_with(|| Tensor::zeros(dims))
        .data_mut()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        debug_assert!(value.all_finite(), "non-finite values out of an op");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        nodes.len() - 1
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, id: Var) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn item(&self, id: Var) -> f64 {
        self.nodes.borrow()[id].value.item()
    }

    pub fn dims(&self, id: Var) -> Vec<usize> {
        self.nodes.borrow()[id].value.dims().to_vec()
    }

    /// C[m,n] = A[m,k] B[k,n]
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = {
            let nodes = self.nodes.borrow();
            (nodes[a].value.clone(), nodes[b].value.clone())
        };
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = Tensor::from_vec(&[m, n], tensor::matmul(av.data(), bv.data(), m, k, n))
            .expect("matmul shape");
        self.push(
            out,
            Some(Box::new(move |g, nodes, grads| {
                let a_val = &nodes[a].value;
                let b_val = &nodes[b].value;
                // gA += G B^T, computed as gA[i,k] += sum_j G[i,j] B[k,j]
                let bt = tensor::transpose(b_val.data(), k, n);
                matmul_acc(grad_slot(grads, a, &[m, k]), g.data(), &bt, m, n, k);
                // gB += A^T G
                let at = tensor::transpose(a_val.data(), m, k);
                matmul_acc(grad_slot(grads, b, &[k, n]), &at, g.data(), k, m, n);
            })),
        )
    }

    /// C[m,n] = A[m,k] B[n,k]^T, i.e. row-by-row dot products.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let (av, bv) = {
            let nodes = self.nodes.borrow();
            (nodes[a].value.clone(), nodes[b].value.clone())
        };
        let (m, k) = (av.rows(), av.cols());
        let (n, k2) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv.data()[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Some(Box::new(move |g, nodes, grads| {
                let a_val = &nodes[a].value;
                let b_val = &nodes[b].value;
                // gA += G B
                matmul_acc(grad_slot(grads, a, &[m, k]), g.data(), b_val.data(), m, n, k);
                // gB += G^T A
                let gt = tensor::transpose(g.data(), m, n);
                matmul_acc(grad_slot(grads, b, &[n, k]), &gt, a_val.data(), n, m, k);
            })),
        )
    }

    /// Elementwise sum; both operands must have identical dims.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            assert_eq!(av.dims(), bv.dims(), "add shape mismatch");
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::from_vec(av.dims(), data).unwrap()
        };
        let dims = out.dims().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                for id in [a, b] {
                    let slot = grad_slot(grads, id, &dims);
                    for (s, gv) in slot.iter_mut().zip(g.data()) {
                        *s += gv;
                    }
                }
            })),
        )
    }

    /// A[m,n] + b[n] broadcast over rows.
    pub fn add_bias_row(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, n) = (av.rows(), av.cols());
            assert_eq!(bv.len(), n, "bias length mismatch");
            let mut data = av.data().to_vec();
            for i in 0..m {
                for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
            Tensor::from_vec(&[m, n], data).unwrap()
        };
        let (m, n) = (out.rows(), out.cols());
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                {
                    let ga = grad_slot(grads, a, &[m, n]);
                    for (s, gv) in ga.iter_mut().zip(g.data()) {
                        *s += gv;
                    }
                }
                let gb = grad_slot(grads, b, &[n]);
                for i in 0..m {
                    for (s, gv) in gb.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *s += gv;
                    }
                }
            })),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a].value;
            Tensor::from_vec(av.dims(), av.data().iter().map(|x| x * c).collect()).unwrap()
        };
        let dims = out.dims().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                let ga = grad_slot(grads, a, &dims);
                for (s, gv) in ga.iter_mut().zip(g.data()) {
                    *s += c * gv;
                }
            })),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a].value;
            Tensor::from_vec(av.dims(), av.data().iter().map(|&x| gelu(x)).collect()).unwrap()
        };
        let dims = out.dims().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, nodes, grads| {
                let x = &nodes[a].value;
                let ga = grad_slot(grads, a, &dims);
                for ((s, gv), &xv) in ga.iter_mut().zip(g.data()).zip(x.data()) {
                    *s += gv * gelu_grad(xv);
                }
            })),
        )
    }

    /// Row-wise layer normalization with learned gain/offset.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x].value;
            let gv = &nodes[gamma].value;
            let bv = &nodes[beta].value;
            let (m, n) = (xv.rows(), xv.cols());
            assert_eq!(gv.len(), n);
            assert_eq!(bv.len(), n);
            let mut out = vec![0.0; m * n];
            let mut xhat = vec![0.0; m * n];
            let mut inv_std = vec![0.0; m];
            for i in 0..m {
                let row = &xv.data()[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..n {
                    let xh = (row[j] - mean) * is;
                    xhat[i * n + j] = xh;
                    out[i * n + j] = gv.data()[j] * xh + bv.data()[j];
                }
            }
            (
                Tensor::from_vec(&[m, n], out).unwrap(),
                xhat,
                inv_std,
            )
        };
        let (m, n) = (out.rows(), out.cols());
        self.push(
            out,
            Some(Box::new(move |g, nodes, grads| {
                let gamma_val = nodes[gamma].value.data().to_vec();
                {
                    let gg = grad_slot(grads, gamma, &[n]);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g.data()[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let gb = grad_slot(grads, beta, &[n]);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g.data()[i * n + j];
                        }
                    }
                }
                let gx = grad_slot(grads, x, &[m, n]);
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let xrow = &xhat[i * n..(i + 1) * n];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = grow[j] * gamma_val[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xrow[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let dxh = grow[j] * gamma_val[j];
                        gx[i * n + j] +=
                            inv_std[i] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                    }
                }
            })),
        )
    }

    /// Row-wise softmax restricted to positions where `allow` is true;
    /// disallowed entries get probability zero. Every row must allow at
    /// least one position.
    pub fn masked_softmax_rows(&self, x: Var, allow: Rc<Vec<bool>>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x].value;
            let (m, n) = (xv.rows(), xv.cols());
            assert_eq!(allow.len(), m * n, "attention mask dims");
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &xv.data()[i * n..(i + 1) * n];
                let arow = &allow[i * n..(i + 1) * n];
                let max = row
                    .iter()
                    .zip(arow)
                    .filter(|(_, &a)| a)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                debug_assert!(max.is_finite(), "attention row with no allowed position");
                let mut sum = 0.0;
                for j in 0..n {
                    if arow[j] {
                        let e = (row[j] - max).exp();
                        out[i * n + j] = e;
                        sum += e;
                    }
                }
                for j in 0..n {
                    out[i * n + j] /= sum;
                }
            }
            Tensor::from_vec(&[m, n], out).unwrap()
        };
        let (m, n) = (out.rows(), out.cols());
        let self_id = self.nodes.borrow().len();
        self.push(
            out,
            Some(Box::new(move |g, nodes, grads| {
                let p = nodes[self_id].value.data();
                let gx = grad_slot(grads, x, &[m, n]);
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let prow = &p[i * n..(i + 1) * n];
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] += prow[j] * (grow[j] - dot);
                    }
                }
            })),
        )
    }

    /// Gathers rows `idx` of a rank-2 tensor (also used for embedding lookup).
    pub fn gather_rows(&self, x: Var, idx: Vec<usize>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x].value;
            let (rows, n) = (xv.rows(), xv.cols());
            let mut data = Vec::with_capacity(idx.len() * n);
            for &i in &idx {
                assert!(i < rows, "gather row {i} out of {rows}");
                data.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
            }
            Tensor::from_vec(&[idx.len(), n], data).unwrap()
        };
        let n = out.cols();
        let src_dims = self.dims(x);
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                let gx = grad_slot(grads, x, &src_dims);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] += g.data()[r * n + j];
                    }
                }
            })),
        )
    }

    /// Places the rows of `x` at `dest` rows of an otherwise-zero
    /// [total_rows, n] tensor.
    pub fn scatter_rows(&self, x: Var, dest: Vec<usize>, total_rows: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x].value;
            let (m, n) = (xv.rows(), xv.cols());
            assert_eq!(m, dest.len());
            let mut data = vec![0.0; total_rows * n];
            for (r, &d) in dest.iter().enumerate() {
                assert!(d < total_rows);
                data[d * n..(d + 1) * n].copy_from_slice(&xv.data()[r * n..(r + 1) * n]);
            }
            Tensor::from_vec(&[total_rows, n], data).unwrap()
        };
        let n = out.cols();
        let src_dims = self.dims(x);
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                let gx = grad_slot(grads, x, &src_dims);
                for (r, &d) in dest.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += g.data()[d * n + j];
                    }
                }
            })),
        )
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x].value;
            let (m, n) = (xv.rows(), xv.cols());
            assert!(start + len <= n);
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
            }
            Tensor::from_vec(&[m, len], data).unwrap()
        };
        let m = out.rows();
        let src_dims = self.dims(x);
        let n = src_dims[1];
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                let gx = grad_slot(grads, x, &src_dims);
                for i in 0..m {
                    for j in 0..len {
                        gx[i * n + start + j] += g.data()[i * len + j];
                    }
                }
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let parts = parts.to_vec();
        let (out, widths) = {
            let nodes = self.nodes.borrow();
            let m = nodes[parts[0]].value.rows();
            let widths: Vec<usize> = parts.iter().map(|&p| nodes[p].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; m * total];
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = &nodes[p].value;
                assert_eq!(pv.rows(), m);
                for i in 0..m {
                    data[i * total + off..i * total + off + w]
                        .copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
                }
                off += w;
            }
            (Tensor::from_vec(&[m, total], data).unwrap(), widths)
        };
        let (m, total) = (out.rows(), out.cols());
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let gp = grad_slot(grads, p, &[m, w]);
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g.data()[i * total + off + j];
                        }
                    }
                    off += w;
                }
            })),
        )
    }

    /// Mean over rows of -ln softmax(row)[target]; the masked-token loss.
    pub fn softmax_ce_mean(&self, logits: Var, targets: Vec<usize>) -> Var {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits].value;
            let (m, k) = (lv.rows(), lv.cols());
            assert_eq!(m, targets.len());
            assert!(m > 0, "cross-entropy over zero rows");
            let mut probs = lv.data().to_vec();
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                assert!(t < k, "target {t} out of {k}");
                let row = &mut probs[i * k..(i + 1) * k];
                softmax_in_place(row);
                total += -(row[t].max(PROB_FLOOR)).ln();
            }
            (Tensor::scalar(total / m as f64), probs)
        };
        let dims = self.dims(logits);
        let (m, k) = (dims[0], dims[1]);
        self.push(
            out,
            Some(Box::new(move |g, _nodes, grads| {
                let gs = g.item() / m as f64;
                let gl = grad_slot(grads, logits, &[m, k]);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        gl[i * k + j] += gs * (probs[i * k + j] - indicator);
                    }
                }
            })),
        )
    }

    /// Numerically stable binary cross-entropy on a scalar logit.
    pub fn bce_logit(&self, logit: Var, label: f64) -> Var {
        let x = self.item(logit);
        let loss = x.max(0.0) - x * label + (-(x.abs())).exp().ln_1p();
        self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g, nodes, grads| {
                let x = nodes[logit].value.item();
                let gx = grad_slot(grads, logit, &[1]);
                gx[0] += g.item() * (sigmoid(x) - label);
            })),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        let terms = terms.to_vec();
        let total: f64 = {
            let nodes = self.nodes.borrow();
            terms.iter().map(|&(v, w)| nodes[v].value.item() * w).sum()
        };
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, _nodes, grads| {
                for &(v, w) in &terms {
                    let gv = grad_slot(grads, v, &[1]);
                    gv[0] += g.item() * w;
                }
            })),
        )
    }

    /// Sum of all elements.
    pub fn sum(&self, x: Var) -> Var {
        let total: f64 = self.nodes.borrow()[x].value.data().iter().sum();
        let dims = self.dims(x);
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, _nodes, grads| {
                let gx = grad_slot(grads, x, &dims);
                for s in gx.iter_mut() {
                    *s += g.item();
                }
            })),
        )
    }

    /// Runs reverse-mode accumulation from a scalar loss. Returns one
    /// gradient slot per node id (None where no gradient flowed).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.done.replace(true) {
            return Err(Error::State(
                "backward called twice on the same recorded forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss].value.len() != 1 {
            return Err(Error::InvalidArgument("backward from a non-scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].back {
                let g = grads[id].take().unwrap();
                back(&g, &nodes, &mut grads);
                grads[id] = Some(g);
            }
        }
        Ok(grads)
    }
}
