//! Batch construction (masking strategies, control combinations, negative
//! instances) and the optimization loops for both the masked bidirectional
//! model and the left-to-right baseline.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bytes;
use crate::codec::{encode_text, Codec, ControlSet, Vocabulary};
use crate::data::{Dataset, IMAGE_SIZE};
use crate::decode::{pnag_decode, PnagConfig};
use crate::error::{Error, Result};
use crate::model::{init_params, GraphModel, Mode, Model, ModelConfig};
use crate::nn::graph::Graph;
use crate::nn::{Adam, Gradients, Parameters};
use crate::rng::Rng;
use crate::vq::{encode_image, Codebook, Image, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Uniform count of uniformly placed masks.
    RandomCount,
    /// Every maskable position.
    All,
    /// Union of one to three random boxes.
    InBoxes,
    /// Complement of such a union.
    OutBoxes,
}

pub const MASK_STRATEGIES: [MaskStrategy; 4] = [
    MaskStrategy::RandomCount,
    MaskStrategy::All,
    MaskStrategy::InBoxes,
    MaskStrategy::OutBoxes,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlCombo {
    TextAndVisual,
    Text,
    Visual,
    Empty,
}

pub const CONTROL_COMBOS: [ControlCombo; 4] = [
    ControlCombo::TextAndVisual,
    ControlCombo::Text,
    ControlCombo::Visual,
    ControlCombo::Empty,
];

pub fn sample_mask_strategy(rng: &mut Rng, probs: &[f64; 4]) -> MaskStrategy {
    MASK_STRATEGIES[rng.categorical(probs)]
}

pub fn sample_control_combo(rng: &mut Rng, probs: &[f64; 4]) -> ControlCombo {
    CONTROL_COMBOS[rng.categorical(probs)]
}

/// Mask over an h x w grid covering the union of axis-aligned boxes given
/// as (top, left, height, width).
pub fn mask_from_boxes(h: usize, w: usize, boxes: &[(usize, usize, usize, usize)]) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for &(top, left, bh, bw) in boxes {
        for y in top..(top + bh).min(h) {
            for x in left..(left + bw).min(w) {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

fn random_boxes(h: usize, w: usize, rng: &mut Rng) -> Vec<(usize, usize, usize, usize)> {
    let count = 1 + rng.below(3);
    (0..count)
        .map(|_| {
            let bh = 1 + rng.below(h);
            let bw = 1 + rng.below(w);
            let top = rng.below(h - bh + 1);
            let left = rng.below(w - bw + 1);
            (top, left, bh, bw)
        })
        .collect()
}

/// Draws target mask flags for one training sample. Preserved positions
/// are never masked; at least one position is always masked (empty draws
/// are resampled).
pub fn apply_mask_strategy(
    strategy: MaskStrategy,
    h: usize,
    w: usize,
    preserve_mask: Option<&[bool]>,
    rng: &mut Rng,
) -> Result<Vec<bool>> {
    let n = h * w;
    let maskable: Vec<usize> = (0..n)
        .filter(|&i| preserve_mask.map(|p| !p[i]).unwrap_or(true))
        .collect();
    if maskable.is_empty() {
        return Err(Error::Contract("no maskable position exists".into()));
    }
    for _attempt in 0..1000 {
        let mut mask = vec![false; n];
        match strategy {
            MaskStrategy::RandomCount => {
                let count = 1 + rng.below(maskable.len());
                let mut pool = maskable.clone();
                rng.shuffle(&mut pool);
                for &i in pool.iter().take(count) {
                    mask[i] = true;
                }
            }
            MaskStrategy::All => {
                for &i in &maskable {
                    mask[i] = true;
                }
            }
            MaskStrategy::InBoxes => {
                let boxed = mask_from_boxes(h, w, &random_boxes(h, w, rng));
                for &i in &maskable {
                    mask[i] = boxed[i];
                }
            }
            MaskStrategy::OutBoxes => {
                let boxed = mask_from_boxes(h, w, &random_boxes(h, w, rng));
                for &i in &maskable {
                    mask[i] = !boxed[i];
                }
            }
        }
        if mask.iter().any(|&m| m) {
            return Ok(mask);
        }
    }
    Err(Error::Contract("mask sampling kept drawing empty masks".into()))
}

/// Encodes a patch-aligned crop given in grid cells; whole-image crops
/// and crops smaller than 2x2 cells are rejected.
pub fn encode_crop(
    image: &Image,
    codebook: &Codebook,
    patch: usize,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Result<TokenGrid> {
    let (gh, gw) = (image.height / patch, image.width / patch);
    if ch < 2 || cw < 2 || ch > gh - 1 || cw > gw - 1 {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} cells outside the allowed 2x2..{}x{} range",
            gh - 1,
            gw - 1
        )));
    }
    if top + ch > gh || left + cw > gw {
        return Err(Error::InvalidArgument("crop leaves the grid".into()));
    }
    let sub = image.crop(top * patch, left * patch, ch * patch, cw * patch)?;
    encode_image(&sub, codebook, patch, patch)
}

/// One to three random patch-aligned crops of the target image, encoded
/// through the codebook. Training crops stay small (2 to 4 cells a side,
/// within the allowed 2x2..(h-1)x(w-1) range) to keep sequences short.
pub fn crop_visual_control(
    image: &Image,
    codebook: &Codebook,
    patch: usize,
    rng: &mut Rng,
) -> Result<Vec<TokenGrid>> {
    let (gh, gw) = (image.height / patch, image.width / patch);
    let count = 1 + rng.below(3);
    let side_span = 3.min(gh - 2).min(gw - 2);
    (0..count)
        .map(|_| {
            let ch = 2 + rng.below(side_span);
            let cw = 2 + rng.below(side_span);
            let top = rng.below(gh - ch + 1);
            let left = rng.below(gw - cw + 1);
            encode_crop(image, codebook, patch, top, left, ch, cw)
        })
        .collect()
}

/// Combined loss weights and sampling distributions plus the optimizer
/// and architecture knobs.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda_msm: f64,
    pub lambda_rel: f64,
    pub lambda_fdl: f64,
    pub strategy_probs: [f64; 4],
    pub combo_probs: [f64; 4],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub fdl_start_fraction: f64,
    pub seed: u64,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_text_len: usize,
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_msm: 1.0,
            lambda_rel: 0.5,
            lambda_fdl: 0.5,
            strategy_probs: [0.70, 0.10, 0.10, 0.10],
            combo_probs: [0.20, 0.55, 0.20, 0.05],
            epochs: 20,
            batch_size: 16,
            lr: 3e-4,
            fdl_start_fraction: 0.25,
            seed: 7,
            layers: 2,
            width: 64,
            heads: 4,
            ff_width: 256,
            max_text_len: 8,
            progress: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, probs) in [
            ("strategy_probs", &self.strategy_probs),
            ("combo_probs", &self.combo_probs),
        ] {
            if probs.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidArgument(format!("{name} has a negative entry")));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("{name} sums to {sum}")));
            }
        }
        if self.lambda_msm < 0.0 || self.lambda_rel < 0.0 || self.lambda_fdl < 0.0 {
            return Err(Error::InvalidArgument("negative loss weight".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fdl_start_fraction) {
            return Err(Error::InvalidArgument("fdl start fraction outside [0,1]".into()));
        }
        Ok(())
    }

    /// Parses a flat key=value file. Blank lines and '#' comments are
    /// allowed; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Format(format!("line {}: bad {what}", lineno + 1));
            let parse_f64 = |v: &str, what: &str| v.parse::<f64>().map_err(|_| bad(what));
            let parse_usize = |v: &str, what: &str| v.parse::<usize>().map_err(|_| bad(what));
            let parse_probs = |v: &str, what: &str| -> Result<[f64; 4]> {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(what))?;
                if parts.len() != 4 {
                    return Err(bad(what));
                }
                Ok([parts[0], parts[1], parts[2], parts[3]])
            };
            match key {
                "lambda1" => cfg.lambda_msm = parse_f64(value, "lambda1")?,
                "lambda2" => cfg.lambda_rel = parse_f64(value, "lambda2")?,
                "lambda3" => cfg.lambda_fdl = parse_f64(value, "lambda3")?,
                "strategy_probs" => cfg.strategy_probs = parse_probs(value, "strategy_probs")?,
                "combo_probs" => cfg.combo_probs = parse_probs(value, "combo_probs")?,
                "epochs" => cfg.epochs = parse_usize(value, "epochs")?,
                "batch_size" => cfg.batch_size = parse_usize(value, "batch_size")?,
                "lr" => cfg.lr = parse_f64(value, "lr")?,
                "fdl_start_fraction" => {
                    cfg.fdl_start_fraction = parse_f64(value, "fdl_start_fraction")?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "layers" => cfg.layers = parse_usize(value, "layers")?,
                "width" => cfg.width = parse_usize(value, "width")?,
                "heads" => cfg.heads = parse_usize(value, "heads")?,
                "ff_width" => cfg.ff_width = parse_usize(value, "ff_width")?,
                "max_text_len" => cfg.max_text_len = parse_usize(value, "max_text_len")?,
                "progress" => cfg.progress = value.parse().map_err(|_| bad("progress"))?,
                other => {
                    return Err(Error::Format(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn fdl_start_epoch(&self) -> usize {
        (self.fdl_start_fraction * self.epochs as f64).ceil() as usize
    }
}

/// Warmup over the first 3% of steps, then cosine decay to a tenth of
/// the peak rate.
fn lr_at(step: usize, total_steps: usize, peak: f64) -> f64 {
    let warmup = (total_steps / 33).max(1);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
    let floor = 0.1 * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// lambda1 * msm + lambda2 * rel + lambda3 * fdl; absent components
/// contribute zero.
pub fn total_loss(
    msm: Option<f64>,
    rel: Option<f64>,
    fdl: Option<f64>,
    lambda: (f64, f64, f64),
) -> f64 {
    lambda.0 * msm.unwrap_or(0.0) + lambda.1 * rel.unwrap_or(0.0) + lambda.2 * fdl.unwrap_or(0.0)
}

/// One training sample before layout assembly.
#[derive(Clone, Debug)]
pub struct SampleDraft {
    pub controls: ControlSet,
    pub codes: Vec<u16>,
    pub mask: Vec<bool>,
    pub rel_label: Option<f64>,
    pub fdl_label: Option<f64>,
    pub msm_enabled: bool,
}

/// Relevance negatives: controls rotate by one across the samples that
/// actually carry controls (a derangement, so no sample keeps its own),
/// targets and masks unchanged, masked-token loss disabled. Batches with
/// fewer than two eligible samples produce nothing.
pub fn make_rel_negatives(batch: &[SampleDraft]) -> Vec<SampleDraft> {
    let eligible: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].controls.has_text() || batch[i].controls.has_visuals())
        .collect();
    if eligible.len() < 2 {
        return Vec::new();
    }
    eligible
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let donor = eligible[(slot + 1) % eligible.len()];
            SampleDraft {
                controls: ControlSet {
                    text: batch[donor].controls.text.clone(),
                    visuals: batch[donor].controls.visuals.clone(),
                    preserve: batch[i].controls.preserve.clone(),
                },
                codes: batch[i].codes.clone(),
                mask: batch[i].mask.clone(),
                rel_label: Some(0.0),
                fdl_label: None,
                msm_enabled: false,
            }
        })
        .collect()
}

/// Grids synthesized from text alone by a parameter snapshot; they enter
/// training as fidelity negatives. Light decode settings keep the
/// per-epoch cost small.
pub fn make_fdl_negatives(
    snapshot: &Model,
    codec: &Codec,
    texts: &[Vec<u32>],
    n: usize,
    seed: u64,
) -> Result<Vec<(Vec<u32>, Vec<u16>)>> {
    let cfg = PnagConfig {
        candidates: 1,
        max_iterations: 4,
        ..PnagConfig::default()
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let text = texts[i % texts.len()].clone();
        let controls = ControlSet {
            text: Some(text.clone()),
            ..Default::default()
        };
        let (grid, _) = pnag_decode(&controls, snapshot, codec, &cfg, crate::rng::derive_seed(seed, &[0x666e, i as u64]))?;
        out.push((text, grid.codes));
    }
    Ok(out)
}

fn write_fdl_cache(path: &Path, negatives: &[(Vec<u32>, Vec<u16>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"UFCN")?;
    bytes::write_u32(&mut w, 1)?;
    bytes::write_u32(&mut w, negatives.len() as u32)?;
    for (text, codes) in negatives {
        bytes::write_u32(&mut w, text.len() as u32)?;
        for &t in text {
            bytes::write_u32(&mut w, t)?;
        }
        bytes::write_u32(&mut w, codes.len() as u32)?;
        for &c in codes {
            bytes::write_u16(&mut w, c)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Word lexicon of a dataset, sorted and deduplicated.
pub fn vocab_from_dataset(dataset: &Dataset, k: usize) -> Vocabulary {
    let mut words: Vec<String> = dataset
        .records
        .iter()
        .flat_map(|r| r.text.iter().cloned())
        .collect();
    words.sort();
    words.dedup();
    Vocabulary::new(&words, k)
}

pub struct TrainOutcome {
    pub model: Model,
    pub codec: Codec,
    pub epoch_losses: Vec<f64>,
    pub wall_seconds: f64,
    pub checkpoints: Vec<PathBuf>,
}

struct LossTerms {
    msm: Option<f64>,
    rel: Option<f64>,
    fdl: Option<f64>,
}

/// Forward/backward for one draft; gradients accumulate into `grads`.
fn accumulate_sample(
    params: &Parameters,
    model_config: ModelConfig,
    codec: &Codec,
    draft: &SampleDraft,
    lambda: (f64, f64, f64),
    fdl_active: bool,
    grads: &mut Gradients,
) -> Result<LossTerms> {
    let layout = codec.build_sequence(&draft.controls, &draft.codes, &draft.mask)?;
    let g = Graph::new();
    let gm = GraphModel::new(&g, params, model_config);
    let out = gm.forward(&layout)?;

    let mut terms = Vec::new();
    let mut report = LossTerms {
        msm: None,
        rel: None,
        fdl: None,
    };
    if draft.msm_enabled {
        let masked_rows: Vec<usize> = (0..layout.target_len())
            .filter(|&i| layout.masked[layout.target_start + i])
            .collect();
        if !masked_rows.is_empty() {
            let targets: Vec<usize> = masked_rows
                .iter()
                .map(|&i| draft.codes[i] as usize)
                .collect();
            let picked = g.gather_rows(out.token_logits, masked_rows);
            let msm = g.softmax_ce_mean(picked, targets);
            report.msm = Some(g.item(msm));
            terms.push((msm, lambda.0));
        }
    }
    if let Some(label) = draft.rel_label {
        let rel = g.bce_logit(out.rel_logit, label);
        report.rel = Some(g.item(rel));
        terms.push((rel, lambda.1));
    }
    if fdl_active {
        if let Some(label) = draft.fdl_label {
            let fdl = g.bce_logit(out.fdl_logit, label);
            report.fdl = Some(g.item(fdl));
            terms.push((fdl, lambda.2));
        }
    }
    if terms.is_empty() {
        return Ok(report);
    }
    let loss = g.weighted_sum(&terms);
    let node_grads = g.backward(loss)?;
    let named = gm.gradients(params, &node_grads);
    for (name, t) in named.iter() {
        grads.accumulate(name, t);
    }
    Ok(report)
}

/// Builds one positive draft from a dataset record.
fn positive_draft(
    text: &[String],
    image: &Image,
    codes: &[u16],
    codec: &Codec,
    codebook: &Codebook,
    patch: usize,
    config: &TrainConfig,
    fdl_active: bool,
    rng: &mut Rng,
) -> Result<SampleDraft> {
    let strategy = sample_mask_strategy(rng, &config.strategy_probs);
    let combo = sample_control_combo(rng, &config.combo_probs);
    let (want_text, want_visual) = match combo {
        ControlCombo::TextAndVisual => (true, true),
        ControlCombo::Text => (true, false),
        ControlCombo::Visual => (false, true),
        ControlCombo::Empty => (false, false),
    };
    let controls = ControlSet {
        text: want_text.then(|| encode_text(text, &codec.vocab)),
        visuals: if want_visual {
            crop_visual_control(image, codebook, patch, rng)?
        } else {
            Vec::new()
        },
        preserve: None,
    };
    let mask = apply_mask_strategy(strategy, codec.target_h, codec.target_w, None, rng)?;
    Ok(SampleDraft {
        controls,
        codes: codes.to_vec(),
        mask,
        rel_label: Some(1.0),
        fdl_label: if fdl_active { Some(1.0) } else { None },
        msm_enabled: true,
    })
}

/// Trains the bidirectional model on the three-task objective; one
/// checkpoint per epoch plus `model.ufcb` and `vocab.txt` in `out_dir`.
pub fn train(
    dataset: &Dataset,
    codebook: &Codebook,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();

    let patch = codebook.patch_side()?;
    let grid_side = IMAGE_SIZE / patch;
    let vocab = vocab_from_dataset(dataset, codebook.k());
    vocab.save_words(&out_dir.join("vocab.txt"))?;
    let codec = Codec::new(vocab, grid_side, grid_side);

    let model_config = ModelConfig {
        layers: config.layers,
        width: config.width,
        heads: config.heads,
        ff_width: config.ff_width,
        vocab_size: codec.vocab.total_size(),
        k: codebook.k(),
        n_target: grid_side * grid_side,
        max_text_len: config.max_text_len,
        mode: Mode::Bidirectional,
    };
    model_config.validate()?;

    let targets: Vec<Vec<u16>> = dataset
        .records
        .iter()
        .map(|r| encode_image(&r.image, codebook, patch, patch).map(|g| g.codes))
        .collect::<Result<_>>()?;
    let texts: Vec<Vec<u32>> = dataset
        .records
        .iter()
        .map(|r| encode_text(&r.text, &codec.vocab))
        .collect();

    let mut params = init_params(&model_config, config.seed);
    let mut adam = Adam::new(config.lr);
    let mut snapshot: Option<Parameters> = None;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    let n_records = dataset.records.len();
    let lambda = (config.lambda_msm, config.lambda_rel, config.lambda_fdl);

    for epoch in 0..config.epochs {
        let mut epoch_rng = Rng::substream(config.seed, &[0x6570, epoch as u64]);
        let fdl_wanted = epoch >= config.fdl_start_epoch();
        let fdl_negatives = match (&snapshot, fdl_wanted) {
            (Some(snap_params), true) => {
                let snap = Model::new(model_config, snap_params.clone())?;
                let n = (n_records / 8).max(1);
                let mut order: Vec<usize> = (0..n_records).collect();
                epoch_rng.shuffle(&mut order);
                let neg_texts: Vec<Vec<u32>> =
                    order.iter().take(n).map(|&i| texts[i].clone()).collect();
                let negs = make_fdl_negatives(
                    &snap,
                    &codec,
                    &neg_texts,
                    n,
                    crate::rng::derive_seed(config.seed, &[0x6664, epoch as u64]),
                )?;
                write_fdl_cache(&out_dir.join(format!("fdl-neg-ep{epoch:03}.bin")), &negs)?;
                negs
            }
            _ => Vec::new(),
        };
        let fdl_active = !fdl_negatives.is_empty();

        // epoch entry list: positives by index, negatives by value
        enum Entry {
            Positive(usize),
            FdlNegative(usize),
        }
        let mut entries: Vec<Entry> = (0..n_records).map(Entry::Positive).collect();
        entries.extend((0..fdl_negatives.len()).map(Entry::FdlNegative));
        epoch_rng.shuffle(&mut entries);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let n_batches = entries.len().div_ceil(config.batch_size);
        for (batch_idx, batch) in entries.chunks(config.batch_size).enumerate() {
            adam.lr = lr_at(
                epoch * 1000 + batch_idx * 1000 / n_batches,
                config.epochs * 1000,
                config.lr,
            );
            let mut drafts = Vec::with_capacity(batch.len() * 2);
            let mut positives = Vec::new();
            for (j, entry) in batch.iter().enumerate() {
                let mut rng = Rng::substream(
                    config.seed,
                    &[0x7361, epoch as u64, (batch_idx * config.batch_size + j) as u64],
                );
                match entry {
                    Entry::Positive(i) => positives.push(positive_draft(
                        &dataset.records[*i].text,
                        &dataset.records[*i].image,
                        &targets[*i],
                        &codec,
                        codebook,
                        patch,
                        config,
                        fdl_active,
                        &mut rng,
                    )?),
                    Entry::FdlNegative(i) => {
                        let (text, codes) = &fdl_negatives[*i];
                        let strategy = sample_mask_strategy(&mut rng, &config.strategy_probs);
                        let mask = apply_mask_strategy(
                            strategy,
                            codec.target_h,
                            codec.target_w,
                            None,
                            &mut rng,
                        )?;
                        drafts.push(SampleDraft {
                            controls: ControlSet {
                                text: Some(text.clone()),
                                ..Default::default()
                            },
                            codes: codes.clone(),
                            mask,
                            rel_label: None,
                            fdl_label: Some(0.0),
                            msm_enabled: false,
                        });
                    }
                }
            }
            // one relevance-negative batch per two positive batches keeps
            // the pass budget inside the wall-clock envelope
            if batch_idx % 2 == 0 {
                let negatives = make_rel_negatives(&positives);
                drafts.extend(negatives);
            }
            drafts.extend(positives);

            let mut grads = Gradients::zeros_like(&params);
            for draft in &drafts {
                let terms = accumulate_sample(
                    &params,
                    model_config,
                    &codec,
                    draft,
                    lambda,
                    fdl_active,
                    &mut grads,
                )?;
                loss_sum += total_loss(terms.msm, terms.rel, terms.fdl, lambda);
                loss_count += 1;
            }
            grads.scale(1.0 / drafts.len() as f64);
            adam.step(&mut params, &grads)?;
        }

        let epoch_loss = loss_sum / loss_count.max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::State(format!(
                "non-finite loss at epoch {epoch}; last checkpoint retained: {:?}",
                checkpoints.last()
            )));
        }
        epoch_losses.push(epoch_loss);
        let ckpt = out_dir.join(format!("ckpt-ep{epoch:03}.ufcb"));
        Model::new(model_config, params.clone())?.save(&ckpt)?;
        checkpoints.push(ckpt);
        snapshot = Some(params.clone());
        if config.progress {
            eprintln!(
                "epoch {epoch:>3}: loss {epoch_loss:.4}{} ({:.0}s)",
                if fdl_active { " [fdl on]" } else { "" },
                start.elapsed().as_secs_f64()
            );
        }
    }

    let model = Model::new(model_config, params)?;
    model.save(&out_dir.join("model.ufcb"))?;
    Ok(TrainOutcome {
        model,
        codec,
        epoch_losses,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoints,
    })
}

/// Teacher-forced left-to-right training of the causal baseline with the
/// same control-combination sampling but no masking tasks.
pub fn train_ar(
    dataset: &Dataset,
    codebook: &Codebook,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();

    let patch = codebook.patch_side()?;
    let grid_side = IMAGE_SIZE / patch;
    let vocab = vocab_from_dataset(dataset, codebook.k());
    vocab.save_words(&out_dir.join("vocab.txt"))?;
    let codec = Codec::new(vocab, grid_side, grid_side);
    let n_target = grid_side * grid_side;

    let model_config = ModelConfig {
        layers: config.layers,
        width: config.width,
        heads: config.heads,
        ff_width: config.ff_width,
        vocab_size: codec.vocab.total_size(),
        k: codebook.k(),
        n_target,
        max_text_len: config.max_text_len,
        mode: Mode::Causal,
    };
    model_config.validate()?;

    let targets: Vec<Vec<u16>> = dataset
        .records
        .iter()
        .map(|r| encode_image(&r.image, codebook, patch, patch).map(|g| g.codes))
        .collect::<Result<_>>()?;

    let mut params = init_params(&model_config, config.seed ^ 0xa5a5);
    let mut adam = Adam::new(config.lr);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    let no_mask = vec![false; n_target];

    for epoch in 0..config.epochs {
        let mut epoch_rng = Rng::substream(config.seed, &[0x6571, epoch as u64]);
        let mut order: Vec<usize> = (0..dataset.records.len()).collect();
        epoch_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let n_batches = order.len().div_ceil(config.batch_size);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            adam.lr = lr_at(
                epoch * 1000 + batch_idx * 1000 / n_batches,
                config.epochs * 1000,
                config.lr,
            );
            let mut grads = Gradients::zeros_like(&params);
            for (j, &i) in batch.iter().enumerate() {
                let mut rng = Rng::substream(
                    config.seed,
                    &[0x7362, epoch as u64, (batch_idx * config.batch_size + j) as u64],
                );
                let combo = sample_control_combo(&mut rng, &config.combo_probs);
                let (want_text, want_visual) = match combo {
                    ControlCombo::TextAndVisual => (true, true),
                    ControlCombo::Text => (true, false),
                    ControlCombo::Visual => (false, true),
                    ControlCombo::Empty => (false, false),
                };
                let controls = ControlSet {
                    text: want_text.then(|| encode_text(&dataset.records[i].text, &codec.vocab)),
                    visuals: if want_visual {
                        crop_visual_control(&dataset.records[i].image, codebook, patch, &mut rng)?
                    } else {
                        Vec::new()
                    },
                    preserve: None,
                };
                let layout = codec.build_sequence(&controls, &targets[i], &no_mask)?;
                // rows predicting target t: the token before it
                let rows: Vec<usize> =
                    (0..n_target).map(|t| layout.target_start + t - 1).collect();
                let g = Graph::new();
                let gm = GraphModel::new(&g, &params, model_config);
                let logits = gm.logits_at(&layout, rows)?;
                let tgt: Vec<usize> = targets[i].iter().map(|&c| c as usize).collect();
                let loss = g.softmax_ce_mean(logits, tgt);
                loss_sum += g.item(loss);
                loss_count += 1;
                let node_grads = g.backward(loss)?;
                let named = gm.gradients(&params, &node_grads);
                for (name, t) in named.iter() {
                    grads.accumulate(name, t);
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &grads)?;
        }

        let epoch_loss = loss_sum / loss_count.max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::State(format!(
                "non-finite loss at epoch {epoch}; last checkpoint retained: {:?}",
                checkpoints.last()
            )));
        }
        epoch_losses.push(epoch_loss);
        let ckpt = out_dir.join(format!("ar-ckpt-ep{epoch:03}.ufcb"));
        Model::new(model_config, params.clone())?.save(&ckpt)?;
        checkpoints.push(ckpt);
        if config.progress {
            eprintln!(
                "ar epoch {epoch:>3}: loss {epoch_loss:.4} ({:.0}s)",
                start.elapsed().as_secs_f64()
            );
        }
    }

    let model = Model::new(model_config, params)?;
    model.save(&out_dir.join("ar-model.ufcb"))?;
    Ok(TrainOutcome {
        model,
        codec,
        epoch_losses,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoints,
    })
}


/// Mean next-token cross-entropy of a causal model on held-out records
/// (text-conditioned); exp of this is the perplexity.
pub fn ar_heldout_ce(
    model: &Model,
    codec: &Codec,
    codebook: &Codebook,
    dataset: &Dataset,
) -> Result<f64> {
    let patch = codebook.patch_side()?;
    let n_target = codec.target_len();
    let no_mask = vec![false; n_target];
    let mut total = 0.0;
    let mut count = 0usize;
    for rec in &dataset.records {
        let codes = encode_image(&rec.image, codebook, patch, patch)?.codes;
        let controls = ControlSet {
            text: Some(encode_text(&rec.text, &codec.vocab)),
            ..Default::default()
        };
        let layout = codec.build_sequence(&controls, &codes, &no_mask)?;
        let rows: Vec<usize> = (0..n_target).map(|t| layout.target_start + t - 1).collect();
        let logits =
            crate::model::forward_infer_rows(&model.params, &model.config, &layout, &rows)?;
        let k = model.config.k;
        for t in 0..n_target {
            let probs = crate::nn::tensor::softmax(&logits[t * k..(t + 1) * k])?;
            total += crate::nn::tensor::cross_entropy(&probs, codes[t] as usize)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
