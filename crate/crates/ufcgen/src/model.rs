//! Bidirectional transformer over the unified sequence with three heads:
//! a token classifier over the codebook at every target position, and one
//! scalar logit each read off the first two positions. A causal mode with
//! a key/value cache provides the autoregressive baseline.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::bytes;
use crate::codec::{LayoutSequence, Modality};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{self, sigmoid, softmax_in_place, Tensor};
use crate::nn::{Gradients, Parameters};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Bidirectional,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub vocab_size: usize,
    pub k: usize,
    pub n_target: usize,
    pub max_text_len: usize,
    pub mode: Mode,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab_size < 8 + self.k {
            return Err(Error::InvalidArgument("vocab smaller than specials + codes".into()));
        }
        Ok(())
    }

    /// Generous upper bound on a processable layout length.
    pub fn max_seq_len(&self) -> usize {
        2 + self.max_text_len + 1 + 3 * (self.n_target + 1) + 1 + self.n_target
    }

    fn mode_u32(&self) -> u32 {
        match self.mode {
            Mode::Bidirectional => 0,
            Mode::Causal => 1,
        }
    }
}

/// Shapes of every named parameter implied by a config.
fn shape_map(c: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = c.width;
    let mut m = BTreeMap::new();
    m.insert("emb.token".into(), vec![c.vocab_size, d]);
    m.insert("pos.special".into(), vec![5, d]);
    m.insert("pos.text".into(), vec![c.max_text_len, d]);
    m.insert("pos.visual".into(), vec![c.n_target, d]);
    m.insert("pos.target".into(), vec![c.n_target, d]);
    for l in 0..c.layers {
        let p = format!("layer{l}");
        m.insert(format!("{p}.ln1.g"), vec![d]);
        m.insert(format!("{p}.ln1.b"), vec![d]);
        for w in ["wq", "wk", "wv", "wo"] {
            m.insert(format!("{p}.attn.{w}"), vec![d, d]);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            m.insert(format!("{p}.attn.{b}"), vec![d]);
        }
        m.insert(format!("{p}.ln2.g"), vec![d]);
        m.insert(format!("{p}.ln2.b"), vec![d]);
        m.insert(format!("{p}.ffn.w1"), vec![d, c.ff_width]);
        m.insert(format!("{p}.ffn.b1"), vec![c.ff_width]);
        m.insert(format!("{p}.ffn.w2"), vec![c.ff_width, d]);
        m.insert(format!("{p}.ffn.b2"), vec![d]);
    }
    m.insert("ln_f.g".into(), vec![d]);
    m.insert("ln_f.b".into(), vec![d]);
    m.insert("head.token.w".into(), vec![d, c.k]);
    m.insert("head.token.b".into(), vec![c.k]);
    m.insert("head.rel.w".into(), vec![d, 1]);
    m.insert("head.rel.b".into(), vec![1]);
    m.insert("head.fdl.w".into(), vec![d, 1]);
    m.insert("head.fdl.b".into(), vec![1]);
    m
}

/// Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Parameters {
    let mut rng = Rng::substream(seed, &[0x696e69]);
    let mut params = Parameters::new();
    for (name, dims) in shape_map(config) {
        let t = if name.ends_with(".g") {
            Tensor::full(&dims, 1.0)
        } else if name.ends_with(".b")
            || name.ends_with(".b1")
            || name.ends_with(".b2")
            || name.ends_with("bq")
            || name.ends_with("bk")
            || name.ends_with("bv")
            || name.ends_with("bo")
        {
            Tensor::zeros(&dims)
        } else {
            Tensor::randn(&dims, 0.02, &mut rng)
        };
        params.insert(&name, t);
    }
    params
}

fn validate_layout(layout: &LayoutSequence, c: &ModelConfig) -> Result<()> {
    if layout.len() > c.max_seq_len() {
        return Err(Error::InvalidArgument(format!(
            "layout length {} exceeds configured maximum {}",
            layout.len(),
            c.max_seq_len()
        )));
    }
    if layout.target_len() != c.n_target {
        return Err(Error::InvalidArgument(format!(
            "layout has {} target positions, model expects {}",
            layout.target_len(),
            c.n_target
        )));
    }
    for i in 0..layout.len() {
        let pos = layout.position[i] as usize;
        let bound = match layout.modality[i] {
            Modality::Special => 5,
            Modality::Text => c.max_text_len,
            Modality::Visual | Modality::Target => c.n_target,
        };
        if pos >= bound {
            return Err(Error::InvalidArgument(format!(
                "position id {pos} exceeds table size {bound}"
            )));
        }
        if layout.tokens[i] as usize >= c.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {} exceeds vocab {}",
                layout.tokens[i], c.vocab_size
            )));
        }
    }
    Ok(())
}

fn attention_allow(len: usize, mode: Mode) -> Rc<Vec<bool>> {
    let mut allow = vec![true; len * len];
    if mode == Mode::Causal {
        for i in 0..len {
            for j in i + 1..len {
                allow[i * len + j] = false;
            }
        }
    }
    Rc::new(allow)
}

// ---- differentiable forward (training path) ----

/// Heads of a recorded forward pass.
pub struct GraphOutput {
    /// [n_target, K] logits, one row per target position.
    pub token_logits: Var,
    pub rel_logit: Var,
    pub fdl_logit: Var,
}

/// Records forward passes for a parameter set on one tape, and maps
/// tape gradients back to named parameter gradients.
pub struct GraphModel<'g> {
    pub graph: &'g Graph,
    pub config: ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl<'g> GraphModel<'g> {
    pub fn new(graph: &'g Graph, params: &Parameters, config: ModelConfig) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| (n.clone(), graph.leaf(t.clone())))
            .collect();
        GraphModel {
            graph,
            config,
            vars,
        }
    }

    fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn embed(&self, layout: &LayoutSequence) -> Var {
        let g = self.graph;
        let len = layout.len();
        let tok = g.gather_rows(
            self.p("emb.token"),
            layout.tokens.iter().map(|&t| t as usize).collect(),
        );
        let mut x = tok;
        for (table, modality) in [
            ("pos.special", Modality::Special),
            ("pos.text", Modality::Text),
            ("pos.visual", Modality::Visual),
            ("pos.target", Modality::Target),
        ] {
            let mut ids = Vec::new();
            let mut rows = Vec::new();
            for i in 0..len {
                if layout.modality[i] == modality {
                    ids.push(layout.position[i] as usize);
                    rows.push(i);
                }
            }
            if ids.is_empty() {
                continue;
            }
            let gathered = g.gather_rows(self.p(table), ids);
            let scattered = g.scatter_rows(gathered, rows, len);
            x = g.add(x, scattered);
        }
        x
    }

    fn block(&self, x: Var, layer: usize, allow: &Rc<Vec<bool>>) -> Var {
        let g = self.graph;
        let c = &self.config;
        let p = format!("layer{layer}");
        let hd = c.head_dim();

        let xn = g.layer_norm(x, self.p(&format!("{p}.ln1.g")), self.p(&format!("{p}.ln1.b")), LN_EPS);
        let q = g.add_bias_row(g.matmul(xn, self.p(&format!("{p}.attn.wq"))), self.p(&format!("{p}.attn.bq")));
        let k = g.add_bias_row(g.matmul(xn, self.p(&format!("{p}.attn.wk"))), self.p(&format!("{p}.attn.bk")));
        let v = g.add_bias_row(g.matmul(xn, self.p(&format!("{p}.attn.wv"))), self.p(&format!("{p}.attn.bv")));

        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let scores = g.scale(g.matmul_bt(qh, kh), 1.0 / (hd as f64).sqrt());
            let probs = g.masked_softmax_rows(scores, Rc::clone(allow));
            heads.push(g.matmul(probs, vh));
        }
        let ctx = g.concat_cols(&heads);
        let proj = g.add_bias_row(g.matmul(ctx, self.p(&format!("{p}.attn.wo"))), self.p(&format!("{p}.attn.bo")));
        let x = g.add(x, proj);

        let xn2 = g.layer_norm(x, self.p(&format!("{p}.ln2.g")), self.p(&format!("{p}.ln2.b")), LN_EPS);
        let h1 = g.gelu(g.add_bias_row(g.matmul(xn2, self.p(&format!("{p}.ffn.w1"))), self.p(&format!("{p}.ffn.b1"))));
        let h2 = g.add_bias_row(g.matmul(h1, self.p(&format!("{p}.ffn.w2"))), self.p(&format!("{p}.ffn.b2")));
        g.add(x, h2)
    }

    /// Records the full forward pass on the tape.
    pub fn forward(&self, layout: &LayoutSequence) -> Result<GraphOutput> {
        validate_layout(layout, &self.config)?;
        let g = self.graph;
        let allow = attention_allow(layout.len(), self.config.mode);
        let mut x = self.embed(layout);
        for l in 0..self.config.layers {
            x = self.block(x, l, &allow);
        }
        let xf = g.layer_norm(x, self.p("ln_f.g"), self.p("ln_f.b"), LN_EPS);
        let target_rows: Vec<usize> = layout.target_positions().collect();
        let token_logits = g.add_bias_row(
            g.matmul(g.gather_rows(xf, target_rows), self.p("head.token.w")),
            self.p("head.token.b"),
        );
        let rel_logit = g.add_bias_row(
            g.matmul(g.gather_rows(xf, vec![0]), self.p("head.rel.w")),
            self.p("head.rel.b"),
        );
        let fdl_logit = g.add_bias_row(
            g.matmul(g.gather_rows(xf, vec![1]), self.p("head.fdl.w")),
            self.p("head.fdl.b"),
        );
        Ok(GraphOutput {
            token_logits,
            rel_logit,
            fdl_logit,
        })
    }

    /// Rows of `token_logits` at arbitrary sequence positions instead of
    /// the target span; used for next-token prediction in causal training.
    pub fn logits_at(&self, layout: &LayoutSequence, rows: Vec<usize>) -> Result<Var> {
        validate_layout(layout, &self.config)?;
        let g = self.graph;
        let allow = attention_allow(layout.len(), self.config.mode);
        let mut x = self.embed(layout);
        for l in 0..self.config.layers {
            x = self.block(x, l, &allow);
        }
        let xf = g.layer_norm(x, self.p("ln_f.g"), self.p("ln_f.b"), LN_EPS);
        Ok(g.add_bias_row(
            g.matmul(g.gather_rows(xf, rows), self.p("head.token.w")),
            self.p("head.token.b"),
        ))
    }

    /// Collects the named gradients accumulated by a backward pass.
    pub fn gradients(&self, params: &Parameters, grads: &[Option<Tensor>]) -> Gradients {
        let mut out = Gradients::zeros_like(params);
        for (name, &var) in &self.vars {
            if let Some(g) = &grads[var] {
                out.accumulate(name, g);
            }
        }
        out
    }
}

// ---- inference forward (no tape) ----

/// Heads of one inference forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// n_target * K logits, row-major per target position.
    pub token_logits: Vec<f64>,
    pub rel_logit: f64,
    pub fdl_logit: f64,
}

impl ModelOutput {
    pub fn logits_row(&self, i: usize, k: usize) -> &[f64] {
        &self.token_logits[i * k..(i + 1) * k]
    }
}

pub fn rel_score(output: &ModelOutput) -> f64 {
    sigmoid(output.rel_logit)
}

pub fn fdl_score(output: &ModelOutput) -> f64 {
    sigmoid(output.fdl_logit)
}

fn ln_row(x: &mut [f64], g: &[f64], b: &[f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..x.len() {
        x[j] = (x[j] - mean) * inv * g[j] + b[j];
    }
}

fn embed_row(params: &Parameters, token: u32, modality: Modality, pos: u32) -> Vec<f64> {
    let d = params.get("emb.token").cols();
    let tok = params.get("emb.token");
    let table = match modality {
        Modality::Special => "pos.special",
        Modality::Text => "pos.text",
        Modality::Visual => "pos.visual",
        Modality::Target => "pos.target",
    };
    let pos_t = params.get(table);
    let t = token as usize;
    let p = pos as usize;
    (0..d)
        .map(|j| tok.data()[t * d + j] + pos_t.data()[p * d + j])
        .collect()
}

/// Hidden states after the final layer norm, flattened [len, width].
fn infer_trunk(params: &Parameters, config: &ModelConfig, layout: &LayoutSequence) -> Vec<f64> {
    let (s, d) = (layout.len(), config.width);
    let hd = config.head_dim();
    let causal = config.mode == Mode::Causal;

    let mut x = vec![0.0; s * d];
    for i in 0..s {
        let row = embed_row(params, layout.tokens[i], layout.modality[i], layout.position[i]);
        x[i * d..(i + 1) * d].copy_from_slice(&row);
    }

    for l in 0..config.layers {
        let p = format!("layer{l}");
        let mut xn = x.clone();
        let (g1, b1) = (
            params.get(&format!("{p}.ln1.g")).data(),
            params.get(&format!("{p}.ln1.b")).data(),
        );
        for i in 0..s {
            ln_row(&mut xn[i * d..(i + 1) * d], g1, b1);
        }
        let mut q = tensor::matmul(&xn, params.get(&format!("{p}.attn.wq")).data(), s, d, d);
        let mut k = tensor::matmul(&xn, params.get(&format!("{p}.attn.wk")).data(), s, d, d);
        let mut v = tensor::matmul(&xn, params.get(&format!("{p}.attn.wv")).data(), s, d, d);
        for (m, b) in [(&mut q, "bq"), (&mut k, "bk"), (&mut v, "bv")] {
            let bias = params.get(&format!("{p}.attn.{b}")).data();
            for i in 0..s {
                for j in 0..d {
                    m[i * d + j] += bias[j];
                }
            }
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = vec![0.0; s * d];
        let mut scores = vec![0.0; s];
        for h in 0..config.heads {
            let off = h * hd;
            for i in 0..s {
                let limit = if causal { i + 1 } else { s };
                let qi = &q[i * d + off..i * d + off + hd];
                for j in 0..limit {
                    let kj = &k[j * d + off..j * d + off + hd];
                    scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores[..limit]);
                let out = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..limit {
                    let vj = &v[j * d + off..j * d + off + hd];
                    let w = scores[j];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
        let proj = tensor::matmul(&ctx, params.get(&format!("{p}.attn.wo")).data(), s, d, d);
        let bo = params.get(&format!("{p}.attn.bo")).data();
        for i in 0..s {
            for j in 0..d {
                x[i * d + j] += proj[i * d + j] + bo[j];
            }
        }

        let mut xn2 = x.clone();
        let (g2, b2) = (
            params.get(&format!("{p}.ln2.g")).data(),
            params.get(&format!("{p}.ln2.b")).data(),
        );
        for i in 0..s {
            ln_row(&mut xn2[i * d..(i + 1) * d], g2, b2);
        }
        let ff = config.ff_width;
        let mut h1 = tensor::matmul(&xn2, params.get(&format!("{p}.ffn.w1")).data(), s, d, ff);
        let b1f = params.get(&format!("{p}.ffn.b1")).data();
        for i in 0..s {
            for j in 0..ff {
                h1[i * ff + j] = tensor::gelu(h1[i * ff + j] + b1f[j]);
            }
        }
        let h2 = tensor::matmul(&h1, params.get(&format!("{p}.ffn.w2")).data(), s, ff, d);
        let b2f = params.get(&format!("{p}.ffn.b2")).data();
        for i in 0..s {
            for j in 0..d {
                x[i * d + j] += h2[i * d + j] + b2f[j];
            }
        }
    }

    let (gf, bf) = (params.get("ln_f.g").data(), params.get("ln_f.b").data());
    for i in 0..s {
        ln_row(&mut x[i * d..(i + 1) * d], gf, bf);
    }
    x
}

fn token_head_rows(
    params: &Parameters,
    config: &ModelConfig,
    x: &[f64],
    rows: &[usize],
) -> Vec<f64> {
    let d = config.width;
    let kk = config.k;
    let mut gathered = vec![0.0; rows.len() * d];
    for (r, &i) in rows.iter().enumerate() {
        gathered[r * d..(r + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
    }
    let mut logits = tensor::matmul(
        &gathered,
        params.get("head.token.w").data(),
        rows.len(),
        d,
        kk,
    );
    let tb = params.get("head.token.b").data();
    for i in 0..rows.len() {
        for j in 0..kk {
            logits[i * kk + j] += tb[j];
        }
    }
    logits
}

/// Full no-grad forward over a layout; mode comes from the config.
pub fn forward_infer(
    params: &Parameters,
    config: &ModelConfig,
    layout: &LayoutSequence,
) -> Result<ModelOutput> {
    validate_layout(layout, config)?;
    let x = infer_trunk(params, config, layout);
    let d = config.width;
    let target_rows: Vec<usize> = layout.target_positions().collect();
    let token_logits = token_head_rows(params, config, &x, &target_rows);
    let head_scalar = |name: &str, row: usize| -> f64 {
        let w = params.get(&format!("head.{name}.w")).data();
        let b = params.get(&format!("head.{name}.b")).data()[0];
        x[row * d..(row + 1) * d]
            .iter()
            .zip(w)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + b
    };
    Ok(ModelOutput {
        token_logits,
        rel_logit: head_scalar("rel", 0),
        fdl_logit: head_scalar("fdl", 1),
    })
}

/// Token-head logits at arbitrary sequence rows (no grad); used by the
/// uncached autoregressive reference path.
pub fn forward_infer_rows(
    params: &Parameters,
    config: &ModelConfig,
    layout: &LayoutSequence,
    rows: &[usize],
) -> Result<Vec<f64>> {
    validate_layout(layout, config)?;
    let x = infer_trunk(params, config, layout);
    Ok(token_head_rows(params, config, &x, rows))
}

// ---- causal decoding with a key/value cache ----

/// Per-decode cache of keys/values plus the consumed prefix, so a stale
/// or mismatched cache is detected instead of silently reused.
pub struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    prefix: Vec<u32>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache {
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
            prefix: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty()
    }
}

/// One token's trip through the causal stack, attending over the cache.
/// Returns the logits over the codebook for the NEXT target position.
fn causal_token_pass(
    params: &Parameters,
    config: &ModelConfig,
    cache: &mut KvCache,
    token: u32,
    modality: Modality,
    pos: u32,
) -> Vec<f64> {
    let d = config.width;
    let hd = config.head_dim();
    let mut x = embed_row(params, token, modality, pos);
    for l in 0..config.layers {
        let p = format!("layer{l}");
        let mut xn = x.clone();
        ln_row(
            &mut xn,
            params.get(&format!("{p}.ln1.g")).data(),
            params.get(&format!("{p}.ln1.b")).data(),
        );
        let matvec = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut out = b.data().to_vec();
            for (i, &xi) in xn.iter().enumerate() {
                let row = &w.data()[i * d..(i + 1) * d];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += xi * wv;
                }
            }
            out
        };
        let q = matvec(
            params.get(&format!("{p}.attn.wq")),
            params.get(&format!("{p}.attn.bq")),
        );
        let knew = matvec(
            params.get(&format!("{p}.attn.wk")),
            params.get(&format!("{p}.attn.bk")),
        );
        let vnew = matvec(
            params.get(&format!("{p}.attn.wv")),
            params.get(&format!("{p}.attn.bv")),
        );
        cache.k[l].extend_from_slice(&knew);
        cache.v[l].extend_from_slice(&vnew);
        let t_len = cache.k[l].len() / d;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = vec![0.0; d];
        let mut scores = vec![0.0; t_len];
        for h in 0..config.heads {
            let off = h * hd;
            let qh = &q[off..off + hd];
            for t in 0..t_len {
                let kh = &cache.k[l][t * d + off..t * d + off + hd];
                scores[t] = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores);
            for t in 0..t_len {
                let vh = &cache.v[l][t * d + off..t * d + off + hd];
                let w = scores[t];
                for (o, vv) in ctx[off..off + hd].iter_mut().zip(vh) {
                    *o += w * vv;
                }
            }
        }
        let wo = params.get(&format!("{p}.attn.wo")).data();
        let bo = params.get(&format!("{p}.attn.bo")).data();
        let mut proj = bo.to_vec();
        for (i, &ci) in ctx.iter().enumerate() {
            let row = &wo[i * d..(i + 1) * d];
            for (o, wv) in proj.iter_mut().zip(row) {
                *o += ci * wv;
            }
        }
        for j in 0..d {
            x[j] += proj[j];
        }

        let mut xn2 = x.clone();
        ln_row(
            &mut xn2,
            params.get(&format!("{p}.ln2.g")).data(),
            params.get(&format!("{p}.ln2.b")).data(),
        );
        let ff = config.ff_width;
        let w1 = params.get(&format!("{p}.ffn.w1")).data();
        let b1 = params.get(&format!("{p}.ffn.b1")).data();
        let mut h1 = b1.to_vec();
        for (i, &xi) in xn2.iter().enumerate() {
            let row = &w1[i * ff..(i + 1) * ff];
            for (o, wv) in h1.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        for v in h1.iter_mut() {
            *v = tensor::gelu(*v);
        }
        let w2 = params.get(&format!("{p}.ffn.w2")).data();
        let b2 = params.get(&format!("{p}.ffn.b2")).data();
        let mut h2 = b2.to_vec();
        for (i, &hi) in h1.iter().enumerate() {
            let row = &w2[i * d..(i + 1) * d];
            for (o, wv) in h2.iter_mut().zip(row) {
                *o += hi * wv;
            }
        }
        for j in 0..d {
            x[j] += h2[j];
        }
    }
    ln_row(&mut x, params.get("ln_f.g").data(), params.get("ln_f.b").data());
    let w = params.get("head.token.w").data();
    let b = params.get("head.token.b").data();
    let kk = config.k;
    let mut logits = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * kk..(i + 1) * kk];
        for (o, wv) in logits.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    logits
}

/// Trained model handle: immutable parameters plus an exact forward-pass
/// counter (every call that produces logits counts once).
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    forward_passes: AtomicU64,
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let expected = shape_map(&config);
        if params.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                expected.len()
            )));
        }
        for (name, dims) in &expected {
            if params.get(name).dims() != dims.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} has dims {:?}, expected {:?}",
                    params.get(name).dims(),
                    dims
                )));
            }
        }
        Ok(Model {
            config,
            params,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Model::new(config, params)
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Full bidirectional (or causal) forward with all three heads.
    pub fn forward(&self, layout: &LayoutSequence) -> Result<ModelOutput> {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        forward_infer(&self.params, &self.config, layout)
    }

    /// Runs the control prefix through the causal stack, filling the
    /// cache; returns the logits for the first target position. Counts
    /// as one forward pass.
    pub fn prefill(
        &self,
        cache: &mut KvCache,
        prefix: &[(u32, Modality, u32)],
    ) -> Result<Vec<f64>> {
        if self.config.mode != Mode::Causal {
            return Err(Error::InvalidArgument("prefill on a bidirectional model".into()));
        }
        if !cache.is_empty() {
            return Err(Error::State("prefill into a non-empty cache".into()));
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let mut logits = Vec::new();
        for &(tok, m, pos) in prefix {
            logits = causal_token_pass(&self.params, &self.config, cache, tok, m, pos);
            cache.prefix.push(tok);
        }
        Ok(logits)
    }

    /// Feeds the next prefix token through the cached causal stack. The
    /// whole prefix (controls + generated target tokens) is passed so a
    /// cache/prefix mismatch is a detectable state error.
    pub fn forward_causal_step(
        &self,
        cache: &mut KvCache,
        prefix: &[(u32, Modality, u32)],
    ) -> Result<Vec<f64>> {
        if self.config.mode != Mode::Causal {
            return Err(Error::InvalidArgument("causal step on a bidirectional model".into()));
        }
        if prefix.len() != cache.len() + 1 {
            return Err(Error::State(format!(
                "cache holds {} tokens but prefix has {}",
                cache.len(),
                prefix.len()
            )));
        }
        for (i, &(tok, _, _)) in prefix[..cache.len()].iter().enumerate() {
            if cache.prefix[i] != tok {
                return Err(Error::State(format!(
                    "cache diverges from prefix at position {i}"
                )));
            }
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let &(tok, m, pos) = prefix.last().unwrap();
        let logits = causal_token_pass(&self.params, &self.config, cache, tok, m, pos);
        cache.prefix.push(tok);
        Ok(logits)
    }

    // ---- checkpoint io ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"UFCB")?;
        bytes::write_u32(&mut w, 1)?;
        let c = &self.config;
        for v in [
            c.layers as u32,
            c.width as u32,
            c.heads as u32,
            c.ff_width as u32,
            c.vocab_size as u32,
            c.k as u32,
            c.n_target as u32,
            c.max_text_len as u32,
            c.mode_u32(),
        ] {
            bytes::write_u32(&mut w, v)?;
        }
        for (name, t) in self.params.iter() {
            bytes::write_u16(&mut w, name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.dims().len() as u8])?;
            for &d in t.dims() {
                bytes::write_u32(&mut w, d as u32)?;
            }
            for &v in t.data() {
                bytes::write_f32(&mut w, v as f32)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        bytes::expect_magic(&mut r, b"UFCB", "checkpoint")?;
        let version = bytes::read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        let mut fields = [0u32; 9];
        for f in fields.iter_mut() {
            *f = bytes::read_u32(&mut r)?;
        }
        let config = ModelConfig {
            layers: fields[0] as usize,
            width: fields[1] as usize,
            heads: fields[2] as usize,
            ff_width: fields[3] as usize,
            vocab_size: fields[4] as usize,
            k: fields[5] as usize,
            n_target: fields[6] as usize,
            max_text_len: fields[7] as usize,
            mode: match fields[8] {
                0 => Mode::Bidirectional,
                1 => Mode::Causal,
                m => return Err(Error::Format(format!("unknown mode {m}"))),
            },
        };
        config.validate()?;
        let expected = shape_map(&config);
        let mut params = Parameters::new();
        for _ in 0..expected.len() {
            let nlen = bytes::read_u16(&mut r)? as usize;
            let name = String::from_utf8(bytes::read_exact(&mut r, nlen)?)
                .map_err(|_| Error::Format("tensor name not utf-8".into()))?;
            let mut rank = [0u8; 1];
            std::io::Read::read_exact(&mut r, &mut rank)?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                dims.push(bytes::read_u32(&mut r)? as usize);
            }
            let want = expected
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if want != &dims {
                return Err(Error::Format(format!(
                    "tensor {name} has dims {:?}, config implies {:?}",
                    dims, want
                )));
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(bytes::read_f32(&mut r)? as f64);
            }
            params.insert(&name, Tensor::from_vec(&dims, data)?);
        }
        Model::new(config, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_text, Codec, ControlSet, Vocabulary};

    pub(crate) fn test_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            layers: 2,
            width: 32,
            heads: 4,
            ff_width: 64,
            vocab_size: 8 + 5 + 16,
            k: 16,
            n_target: 16,
            max_text_len: 8,
            mode,
        }
    }

    pub(crate) fn test_codec() -> Codec {
        let words: Vec<String> = ["red", "circle", "center", "on", "blue"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Codec::new(Vocabulary::new(&words, 16), 4, 4)
    }

    fn text_layout(codec: &Codec, masked: bool) -> LayoutSequence {
        let words: Vec<String> = ["red", "circle"].iter().map(|s| s.to_string()).collect();
        let controls = ControlSet {
            text: Some(encode_text(&words, &codec.vocab)),
            ..Default::default()
        };
        codec
            .build_sequence(&controls, &[3; 16], &[masked; 16])
            .unwrap()
    }

    #[test]
    fn forward_shape_contract() {
        let codec = test_codec();
        let model = Model::init(test_config(Mode::Bidirectional), 1).unwrap();
        let layout = text_layout(&codec, true);
        let out = model.forward(&layout).unwrap();
        assert_eq!(out.token_logits.len(), 16 * 16);
        assert!(out.rel_logit.is_finite() && out.fdl_logit.is_finite());
        assert_eq!(model.forward_passes(), 1);
    }

    #[test]
    fn forward_is_deterministic() {
        let codec = test_codec();
        let model = Model::init(test_config(Mode::Bidirectional), 2).unwrap();
        let layout = text_layout(&codec, true);
        let a = model.forward(&layout).unwrap();
        let b = model.forward(&layout).unwrap();
        assert_eq!(a.token_logits, b.token_logits);
        assert_eq!(a.rel_logit.to_bits(), b.rel_logit.to_bits());
    }

    #[test]
    fn token_rows_softmax_to_one() {
        let codec = test_codec();
        let model = Model::init(test_config(Mode::Bidirectional), 3).unwrap();
        let layout = text_layout(&codec, true);
        let out = model.forward(&layout).unwrap();
        for i in 0..16 {
            let p = tensor::softmax(out.logits_row(i, 16)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn oversized_layout_rejected() {
        let codec = test_codec();
        let model = Model::init(test_config(Mode::Bidirectional), 1).unwrap();
        let mut layout = text_layout(&codec, true);
        // inflate the text position id past the table
        layout.position[2] = 99;
        assert!(model.forward(&layout).is_err());
    }

    #[test]
    fn shape_contract_across_control_combinations() {
        let codec = test_codec();
        let model = Model::init(test_config(Mode::Bidirectional), 11).unwrap();
        for n_text in [0usize, 2, 5] {
            for n_vis in 0..=3usize {
                let controls = ControlSet {
                    text: (n_text > 0).then(|| vec![8; n_text]),
                    visuals: (0..n_vis)
                        .map(|_| crate::vq::TokenGrid::new(2, 2, vec![1, 2, 3, 4]).unwrap())
                        .collect(),
                    ..Default::default()
                };
                let layout = codec
                    .build_sequence(&controls, &[0; 16], &[true; 16])
                    .unwrap();
                let out = model.forward(&layout).unwrap();
                assert_eq!(out.token_logits.len(), 16 * 16, "n_text {n_text} n_vis {n_vis}");
                assert!(out.rel_logit.is_finite() && out.fdl_logit.is_finite());
            }
        }
    }

    #[test]
    fn sigmoid_heads() {
        let out = ModelOutput {
            token_logits: vec![],
            rel_logit: 0.0,
            fdl_logit: 30.0,
        };
        assert!((rel_score(&out) - 0.5).abs() < 1e-12);
        assert!(fdl_score(&out) >= 1.0 - 1e-9);
        let a = sigmoid(1.7);
        let b = sigmoid(-1.7);
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    /// In causal mode, changing a future token must not change the
    /// current position's logits; bidirectional mode has no such
    /// restriction.
    #[test]
    fn causal_mode_ignores_future_positions() {
        let codec = test_codec();
        let bid = Model::init(test_config(Mode::Bidirectional), 4).unwrap();
        let cau = Model::new(test_config(Mode::Causal), bid.params.clone()).unwrap();

        let mut layout = text_layout(&codec, false);
        let base_b = bid.forward(&layout).unwrap();
        let base_c = cau.forward(&layout).unwrap();
        // perturb the last target token
        let last = layout.len() - 1;
        layout.tokens[last] = codec.vocab.code_id(7);
        let pert_b = bid.forward(&layout).unwrap();
        let pert_c = cau.forward(&layout).unwrap();

        let k = 16;
        // causal: logits at target row 0 (position before the change) identical
        for j in 0..k {
            assert_eq!(
                base_c.logits_row(0, k)[j].to_bits(),
                pert_c.logits_row(0, k)[j].to_bits()
            );
        }
        // bidirectional: some earlier row changes
        let changed = (0..k).any(|j| base_b.logits_row(0, k)[j] != pert_b.logits_row(0, k)[j]);
        assert!(changed, "bidirectional model ignored a context change");
    }

    #[test]
    fn causal_cache_matches_full_forward() {
        let codec = test_codec();
        let model = Model::init(test_config(Mode::Causal), 5).unwrap();
        let layout = text_layout(&codec, false);

        // full causal forward: logits at every target row
        let full = forward_infer(&model.params, &model.config, &layout).unwrap();

        // incremental: prefill controls, then steps over target tokens
        let seq: Vec<(u32, Modality, u32)> = (0..layout.len())
            .map(|i| (layout.tokens[i], layout.modality[i], layout.position[i]))
            .collect();
        let mut cache = KvCache::new(model.config.layers);
        let controls = &seq[..layout.target_start];
        let mut logits = model.prefill(&mut cache, controls).unwrap();
        // prefill logits predict target position 0; compare against the
        // full forward's logits at the position before target 0 is not
        // exposed, so compare step logits at target rows instead
        for t in 0..16 {
            // logits currently predict target row t
            if t > 0 {
                let prefix = &seq[..layout.target_start + t];
                logits = model.forward_causal_step(&mut cache, prefix).unwrap();
            }
            let expect = if t == 0 {
                // row for target 0 comes from the last control position;
                // the full-forward output only exposes target rows, so
                // check consistency from row 1 onward
                continue;
            } else {
                full.logits_row(t - 1, 16)
            };
            let got = &logits;
            for j in 0..16 {
                assert!(
                    (got[j] - expect[j]).abs() < 1e-6,
                    "target row {t} logit {j}: {} vs {}",
                    got[j],
                    expect[j]
                );
            }
        }
        assert_eq!(model.forward_passes(), 16);
    }

    #[test]
    fn stale_cache_is_state_error() {
        let codec = test_codec();
        let model = Model::init(test_config(Mode::Causal), 6).unwrap();
        let layout = text_layout(&codec, false);
        let seq: Vec<(u32, Modality, u32)> = (0..layout.len())
            .map(|i| (layout.tokens[i], layout.modality[i], layout.position[i]))
            .collect();
        let mut cache = KvCache::new(model.config.layers);
        model.prefill(&mut cache, &seq[..layout.target_start]).unwrap();
        // wrong prefix length
        let err = model.forward_causal_step(&mut cache, &seq[..layout.target_start]);
        assert!(matches!(err, Err(Error::State(_))));
        // diverging prefix content
        let mut wrong: Vec<(u32, Modality, u32)> = seq[..layout.target_start + 1].to_vec();
        wrong[0].0 = 3;
        let err = model.forward_causal_step(&mut cache, &wrong);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let model = Model::init(test_config(Mode::Bidirectional), 7).unwrap();
        let dir = std::env::temp_dir().join("ufcgen-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ufcb");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        // f32 at rest: values match to f32 precision
        for (name, t) in model.params.iter() {
            let lt = loaded.params.get(name);
            assert_eq!(lt.dims(), t.dims());
            for (a, b) in lt.data().iter().zip(t.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        // corrupt a dim and expect a format error
        let mut bytes = std::fs::read(&path).unwrap();
        // first tensor record starts after magic+version+9 config u32s;
        // name_len u16 + name, then rank u8 + dims; flip a dim byte
        let name_len = u16::from_le_bytes([bytes[44], bytes[45]]) as usize;
        let dim_off = 46 + name_len + 1;
        bytes[dim_off] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(Model::load(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }

    /// Composite loss (masked-token CE + both binary heads) used by the
    /// finite-difference oracle below.
    fn check_loss(params: &Parameters, config: ModelConfig, layout: &LayoutSequence) -> f64 {
        let g = Graph::new();
        let gm = GraphModel::new(&g, params, config);
        let out = gm.forward(layout).unwrap();
        let masked_rows: Vec<usize> = (0..layout.target_len())
            .filter(|&i| layout.masked[layout.target_start + i])
            .collect();
        let targets: Vec<usize> = masked_rows.iter().map(|&i| (i * 7) % config.k).collect();
        let picked = g.gather_rows(out.token_logits, masked_rows);
        let msm = g.softmax_ce_mean(picked, targets);
        let rel = g.bce_logit(out.rel_logit, 1.0);
        let fdl = g.bce_logit(out.fdl_logit, 0.0);
        let loss = g.weighted_sum(&[(msm, 1.0), (rel, 0.5), (fdl, 0.5)]);
        g.item(loss)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let start = std::time::Instant::now();
        let config = ModelConfig {
            layers: 1,
            width: 16,
            heads: 4,
            ff_width: 32,
            vocab_size: 8 + 5 + 8,
            k: 8,
            n_target: 9,
            max_text_len: 4,
            mode: Mode::Bidirectional,
        };
        let words: Vec<String> = ["red", "circle", "on", "blue"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let codec = Codec::new(Vocabulary::new(&words, 8), 3, 3);
        let controls = ControlSet {
            text: Some(vec![8, 9]),
            visuals: vec![crate::vq::TokenGrid::new(2, 2, vec![0, 3, 5, 7]).unwrap()],
            ..Default::default()
        };
        let mut mask = vec![false; 9];
        for i in [0, 2, 5, 8] {
            mask[i] = true;
        }
        let layout = codec
            .build_sequence(&controls, &[1, 2, 3, 4, 5, 6, 7, 0, 1], &mask)
            .unwrap();

        let params = init_params(&config, 21);
        // analytic gradients
        let g = Graph::new();
        let gm = GraphModel::new(&g, &params, config);
        let out = gm.forward(&layout).unwrap();
        let masked_rows: Vec<usize> = (0..9).filter(|&i| mask[i]).collect();
        let targets: Vec<usize> = masked_rows.iter().map(|&i| (i * 7) % config.k).collect();
        let picked = g.gather_rows(out.token_logits, masked_rows);
        let msm = g.softmax_ce_mean(picked, targets);
        let rel = g.bce_logit(out.rel_logit, 1.0);
        let fdl = g.bce_logit(out.fdl_logit, 0.0);
        let loss = g.weighted_sum(&[(msm, 1.0), (rel, 0.5), (fdl, 0.5)]);
        let grads = g.backward(loss).unwrap();
        let named = gm.gradients(&params, &grads);

        let eps = 1e-4;
        let mut worst = 0.0f64;
        for (name, gt) in named.iter() {
            let base = params.get(name).clone();
            for i in 0..base.len() {
                let mut plus = params.clone();
                plus.get_mut(name).data_mut()[i] += eps;
                let mut minus = params.clone();
                minus.get_mut(name).data_mut()[i] -= eps;
                let fd = (check_loss(&plus, config, &layout)
                    - check_loss(&minus, config, &layout))
                    / (2.0 * eps);
                let an = gt.data()[i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                let rel_err = (fd - an).abs() / denom;
                if rel_err > worst {
                    worst = rel_err;
                }
                assert!(
                    rel_err < 1e-3,
                    "{name}[{i}]: fd {fd} vs analytic {an} (rel {rel_err})"
                );
            }
        }
        println!(
            "gradient check: worst relative error {worst:.2e} in {:.1}s",
            start.elapsed().as_secs_f64()
        );
        assert!(start.elapsed().as_secs_f64() < 10.0);
    }

    #[test]
    fn unused_heads_get_zero_gradient() {
        // a loss that never touches the fdl head leaves it at zero gradient
        let codec = test_codec();
        let config = test_config(Mode::Bidirectional);
        let params = init_params(&config, 9);
        let layout = text_layout(&codec, true);
        let g = Graph::new();
        let gm = GraphModel::new(&g, &params, config);
        let out = gm.forward(&layout).unwrap();
        let targets: Vec<usize> = (0..16).collect();
        let msm = g.softmax_ce_mean(out.token_logits, targets);
        let grads = g.backward(msm).unwrap();
        let named = gm.gradients(&params, &grads);
        assert!(named.get("head.fdl.w").data().iter().all(|&v| v == 0.0));
        assert!(named.get("head.rel.w").data().iter().all(|&v| v == 0.0));
        assert!(named.get("head.token.w").data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn every_parameter_receives_gradient_on_a_covering_batch() {
        // text + visual controls and both binary labels touch every table
        let codec = test_codec();
        let config = test_config(Mode::Bidirectional);
        let params = init_params(&config, 10);
        let g = Graph::new();
        let gm = GraphModel::new(&g, &params, config);

        let controls = ControlSet {
            text: Some(vec![8, 9, 10, 11, 12, 8, 9, 10]),
            visuals: vec![crate::vq::TokenGrid::new(4, 4, (0..16).collect()).unwrap()],
            ..Default::default()
        };
        let mut mask = [false; 16];
        for i in 0..16 {
            mask[i] = i % 2 == 0;
        }
        let codes: Vec<u16> = (0..16).collect();
        let layout = codec.build_sequence(&controls, &codes, &mask).unwrap();
        let out = gm.forward(&layout).unwrap();
        let masked_rows: Vec<usize> = (0..16).filter(|&i| mask[i]).collect();
        let targets: Vec<usize> = masked_rows.iter().map(|&i| i % config.k).collect();
        let picked = g.gather_rows(out.token_logits, masked_rows);
        let msm = g.softmax_ce_mean(picked, targets);
        let rel = g.bce_logit(out.rel_logit, 1.0);
        let fdl = g.bce_logit(out.fdl_logit, 0.0);
        let loss = g.weighted_sum(&[(msm, 1.0), (rel, 0.5), (fdl, 0.5)]);
        let grads = g.backward(loss).unwrap();
        let named = gm.gradients(&params, &grads);
        for (name, t) in named.iter() {
            // the token embedding covers only ids present in the layout
            if name == "emb.token" || name == "pos.text" {
                assert!(t.data().iter().any(|&v| v != 0.0), "{name} all zero");
                continue;
            }
            assert!(
                t.data().iter().any(|&v| v != 0.0),
                "parameter {name} received no gradient"
            );
        }
    }

    #[test]
    fn graph_and_infer_paths_agree() {
        let codec = test_codec();
        let config = test_config(Mode::Bidirectional);
        let params = init_params(&config, 8);
        let layout = text_layout(&codec, true);

        let infer = forward_infer(&params, &config, &layout).unwrap();
        let g = Graph::new();
        let gm = GraphModel::new(&g, &params, config);
        let out = gm.forward(&layout).unwrap();
        let logits = g.value(out.token_logits);
        for (a, b) in logits.data().iter().zip(&infer.token_logits) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((g.item(out.rel_logit) - infer.rel_logit).abs() < 1e-9);
        assert!((g.item(out.fdl_logit) - infer.fdl_logit).abs() < 1e-9);
    }
}
