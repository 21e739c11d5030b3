//! Inference engines over a trained model: progressive refinement with
//! candidate scoring and dynamic termination, the fixed-iteration
//! mask-predict baseline, and cached autoregressive decoding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::bytes;
use crate::codec::{Codec, ControlSet, Modality};
use crate::error::{Error, Result};
use crate::model::{fdl_score, rel_score, KvCache, Mode, Model, ModelOutput};
use crate::nn::tensor::softmax_in_place;
use crate::rng::Rng;
use crate::vq::TokenGrid;

/// How re-mask weights derive from the per-position confidences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemaskWeighting {
    /// Weight 1 - Y: low-confidence positions are re-masked more often.
    InverseConfidence,
    /// Weight Y: the literal high-confidence reading, kept for ablation.
    Confidence,
}

#[derive(Clone, Copy, Debug)]
pub struct PnagConfig {
    /// Parallel candidates per iteration (B).
    pub candidates: usize,
    /// Relevance weight in the comprehensive score (sigma).
    pub score_mix: f64,
    /// Base re-mask ratio (alpha).
    pub alpha: f64,
    /// Decaying re-mask ratio (beta).
    pub beta: f64,
    /// Maximum iterations (T).
    pub max_iterations: usize,
    /// Consecutive non-improving iterations before stopping.
    pub patience: usize,
    pub temperature: f64,
    /// Argmax sampling instead of multinomial.
    pub greedy: bool,
    pub remask_weighting: RemaskWeighting,
    /// Score the B candidates on worker threads (identical results).
    pub parallel_candidates: bool,
}

impl Default for PnagConfig {
    fn default() -> Self {
        PnagConfig {
            candidates: 5,
            score_mix: 0.5,
            alpha: 0.8,
            beta: 0.2,
            max_iterations: 10,
            patience: 3,
            temperature: 1.0,
            greedy: false,
            remask_weighting: RemaskWeighting::InverseConfidence,
            parallel_candidates: false,
        }
    }
}

impl PnagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 1 {
            return Err(Error::InvalidArgument("need at least one candidate".into()));
        }
        if !(0.0..=1.0).contains(&self.score_mix) {
            return Err(Error::InvalidArgument("score mix outside [0,1]".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta > 1.0 {
            return Err(Error::InvalidArgument(
                "mask ratios must satisfy alpha,beta >= 0 and alpha+beta <= 1".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidArgument("need at least one iteration".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Number of target tokens to re-mask at iteration t (1-based):
/// floor(N * (alpha + (T-t)/(T-1) * beta)), clamped to [0, N]. For T = 1
/// the decayed term is zero. Callers clamp further to the non-preserved
/// count.
pub fn mask_count(t: usize, config: &PnagConfig, n_target: usize) -> usize {
    debug_assert!(t >= 1 && t <= config.max_iterations);
    let decay = if config.max_iterations > 1 {
        (config.max_iterations - t) as f64 / (config.max_iterations - 1) as f64
    } else {
        0.0
    };
    let ratio = config.alpha + decay * config.beta;
    ((n_target as f64 * ratio).floor() as usize).min(n_target)
}

/// One multinomial token draw. Returns the sampled code and its
/// temperature-1 probability. Greedy mode takes the argmax (ties low).
pub fn sample_token(logits: &[f64], temperature: f64, greedy: bool, rng: &mut Rng) -> (u16, f64) {
    let mut natural = logits.to_vec();
    softmax_in_place(&mut natural);
    let idx = if greedy {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    } else {
        let mut scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
        softmax_in_place(&mut scaled);
        rng.weighted(&scaled)
    };
    (idx as u16, natural[idx])
}

/// Draws `n` distinct indices from `eligible` with the given weights
/// (uniform fallback when all remaining weights vanish).
fn weighted_without_replacement(
    eligible: &[usize],
    weights: &[f64],
    n: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    debug_assert_eq!(eligible.len(), weights.len());
    let mut pool: Vec<usize> = (0..eligible.len()).collect();
    let mut w: Vec<f64> = weights.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n.min(eligible.len()) {
        let total: f64 = pool.iter().map(|&i| w[i]).sum();
        let pick = if total > 0.0 {
            let mut dart = rng.uniform() * total;
            let mut chosen = pool.len() - 1;
            for (pi, &i) in pool.iter().enumerate() {
                dart -= w[i];
                if dart < 0.0 {
                    chosen = pi;
                    break;
                }
            }
            chosen
        } else {
            rng.below(pool.len())
        };
        let idx = pool.swap_remove(pick);
        w[idx] = 0.0;
        out.push(eligible[idx]);
    }
    out
}

/// The comprehensive candidate score: sigma * relevance + (1 - sigma) *
/// fidelity, both read from the forward pass on the masked input.
pub fn score_candidate(output: &ModelOutput, score_mix: f64) -> f64 {
    score_mix * rel_score(output) + (1.0 - score_mix) * fdl_score(output)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    pub scores: Vec<f64>,
    pub selected: usize,
    /// Mask bitmap of the selected candidate's input.
    pub mask: Vec<bool>,
    /// Target codes after the predict step.
    pub codes: Vec<u16>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub iterations: Vec<IterationRecord>,
    pub t_max: usize,
    pub s_max: f64,
}

impl DecodeTrace {
    pub fn save(&self, path: &Path) -> Result<()> {
        let n_i = self.iterations.first().map(|r| r.codes.len()).unwrap_or(0);
        let b = self.iterations.first().map(|r| r.scores.len()).unwrap_or(0);
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"UFCT")?;
        bytes::write_u32(&mut w, 1)?;
        bytes::write_u32(&mut w, n_i as u32)?;
        bytes::write_u32(&mut w, b as u32)?;
        bytes::write_u32(&mut w, self.iterations.len() as u32)?;
        bytes::write_u32(&mut w, self.t_max as u32)?;
        bytes::write_f32(&mut w, self.s_max as f32)?;
        for rec in &self.iterations {
            bytes::write_u32(&mut w, rec.t as u32)?;
            for &s in &rec.scores {
                bytes::write_f32(&mut w, s as f32)?;
            }
            bytes::write_u32(&mut w, rec.selected as u32)?;
            let mut bits = vec![0u8; n_i.div_ceil(8)];
            for (i, &m) in rec.mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&bits)?;
            for &c in &rec.codes {
                bytes::write_u16(&mut w, c)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DecodeTrace> {
        let mut r = BufReader::new(File::open(path)?);
        bytes::expect_magic(&mut r, b"UFCT", "decode trace")?;
        if bytes::read_u32(&mut r)? != 1 {
            return Err(Error::Format("trace version".into()));
        }
        let n_i = bytes::read_u32(&mut r)? as usize;
        let b = bytes::read_u32(&mut r)? as usize;
        let count = bytes::read_u32(&mut r)? as usize;
        let t_max = bytes::read_u32(&mut r)? as usize;
        let s_max = bytes::read_f32(&mut r)? as f64;
        let mut iterations = Vec::with_capacity(count);
        for _ in 0..count {
            let t = bytes::read_u32(&mut r)? as usize;
            let mut scores = Vec::with_capacity(b);
            for _ in 0..b {
                scores.push(bytes::read_f32(&mut r)? as f64);
            }
            let selected = bytes::read_u32(&mut r)? as usize;
            let bits = bytes::read_exact(&mut r, n_i.div_ceil(8))?;
            let mask = (0..n_i).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();
            let mut codes = Vec::with_capacity(n_i);
            for _ in 0..n_i {
                codes.push(bytes::read_u16(&mut r)?);
            }
            iterations.push(IterationRecord {
                t,
                scores,
                selected,
                mask,
                codes,
            });
        }
        Ok(DecodeTrace {
            iterations,
            t_max,
            s_max,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MaskingRule {
    /// Weighted multinomial draws without replacement.
    Stochastic,
    /// The n lowest-confidence positions (ties to the lowest index).
    LowestConfidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SelectionRule {
    /// Return the snapshot from the best-scoring iteration.
    BestScore,
    /// Return the final iteration's output.
    LastIteration,
}

#[derive(Clone, Copy, Debug)]
struct EngineConfig {
    pnag: PnagConfig,
    patience: Option<usize>,
    masking: MaskingRule,
    selection: SelectionRule,
}

fn refine_decode(
    controls: &ControlSet,
    model: &Model,
    codec: &Codec,
    engine: &EngineConfig,
    seed: u64,
) -> Result<(TokenGrid, DecodeTrace)> {
    let cfg = &engine.pnag;
    cfg.validate()?;
    if model.config.mode != Mode::Bidirectional {
        return Err(Error::InvalidArgument(
            "iterative refinement needs a bidirectional model".into(),
        ));
    }
    let n = codec.target_len();
    if model.config.n_target != n {
        return Err(Error::InvalidArgument(format!(
            "model expects {} target positions, codec builds {n}",
            model.config.n_target
        )));
    }

    let preserved: Vec<bool> = controls
        .preserve
        .as_ref()
        .map(|p| p.mask.clone())
        .unwrap_or_else(|| vec![false; n]);
    let maskable: Vec<usize> = (0..n).filter(|&i| !preserved[i]).collect();

    // iteration-0 state: every non-preserved position is masked with zero
    // confidence; preserved positions hold their codes at confidence 1
    let mut codes = vec![0u16; n];
    let mut unfilled = vec![true; n];
    let mut confidence = vec![0.0f64; n];
    if let Some(p) = &controls.preserve {
        p.apply(&mut codes);
        for i in 0..n {
            if preserved[i] {
                unfilled[i] = false;
                confidence[i] = 1.0;
            }
        }
    }

    let mut trace = DecodeTrace::default();
    let mut s_max = 0.0f64;
    let mut t_max = 0usize;
    let mut best_codes = codes.clone();
    let mut stall = 0usize;

    for t in 1..=cfg.max_iterations {
        let n_remask = mask_count(t, cfg, n).min(maskable.len());

        // build candidate masks
        let mut cand_masks: Vec<Vec<bool>> = Vec::with_capacity(cfg.candidates);
        for b in 0..cfg.candidates {
            let chosen = match engine.masking {
                MaskingRule::Stochastic => {
                    let mut rng = Rng::substream(seed, &[0x6d61, t as u64, b as u64]);
                    let weights: Vec<f64> = maskable
                        .iter()
                        .map(|&i| match cfg.remask_weighting {
                            RemaskWeighting::InverseConfidence => 1.0 - confidence[i],
                            RemaskWeighting::Confidence => confidence[i],
                        })
                        .collect();
                    weighted_without_replacement(&maskable, &weights, n_remask, &mut rng)
                }
                MaskingRule::LowestConfidence => {
                    let mut order: Vec<usize> = maskable.clone();
                    order.sort_by(|&a, &b| {
                        confidence[a]
                            .partial_cmp(&confidence[b])
                            .unwrap()
                            .then(a.cmp(&b))
                    });
                    order.truncate(n_remask);
                    order
                }
            };
            let mut mask = unfilled.clone();
            for i in chosen {
                mask[i] = true;
            }
            cand_masks.push(mask);
        }

        // score each candidate on its masked input
        let outputs: Vec<ModelOutput> = if cfg.parallel_candidates && cfg.candidates > 1 {
            let mut slots: Vec<Option<Result<ModelOutput>>> =
                (0..cfg.candidates).map(|_| None).collect();
            std::thread::scope(|scope| {
                for (slot, mask) in slots.iter_mut().zip(&cand_masks) {
                    scope.spawn(|| {
                        *slot = Some(
                            codec
                                .build_sequence(controls, &codes, mask)
                                .and_then(|layout| model.forward(&layout)),
                        );
                    });
                }
            });
            slots
                .into_iter()
                .map(|s| s.expect("candidate thread finished"))
                .collect::<Result<Vec<_>>>()?
        } else {
            cand_masks
                .iter()
                .map(|mask| {
                    let layout = codec.build_sequence(controls, &codes, mask)?;
                    model.forward(&layout)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let scores: Vec<f64> = outputs
            .iter()
            .map(|o| score_candidate(o, cfg.score_mix))
            .collect();
        let mut selected = 0;
        for (b, &s) in scores.iter().enumerate() {
            if s > scores[selected] {
                selected = b;
            }
        }

        // predict: fill every masked position of the selected candidate
        // from its already-computed logits
        let sel_mask = &cand_masks[selected];
        let sel_out = &outputs[selected];
        let mut rng = Rng::substream(seed, &[0x7072, t as u64]);
        let k = model.config.k;
        for i in 0..n {
            if sel_mask[i] {
                let (code, conf) =
                    sample_token(sel_out.logits_row(i, k), cfg.temperature, cfg.greedy, &mut rng);
                codes[i] = code;
                confidence[i] = conf;
                unfilled[i] = false;
            }
        }

        let s_t = scores[selected];
        if s_t > s_max {
            s_max = s_t;
            t_max = t;
            best_codes = codes.clone();
            stall = 0;
        } else {
            stall += 1;
        }
        trace.iterations.push(IterationRecord {
            t,
            scores,
            selected,
            mask: sel_mask.clone(),
            codes: codes.clone(),
        });
        if let Some(patience) = engine.patience {
            if stall >= patience {
                break;
            }
        }
    }

    trace.s_max = s_max;
    trace.t_max = t_max;
    let final_codes = match engine.selection {
        SelectionRule::BestScore => best_codes,
        SelectionRule::LastIteration => codes,
    };
    // preserved positions hold their codes in every snapshot
    debug_assert!((0..n).all(|i| {
        !preserved[i]
            || trace
                .iterations
                .iter()
                .all(|rec| rec.codes[i] == final_codes[i])
    }));
    Ok((
        TokenGrid::new(codec.target_h, codec.target_w, final_codes)?,
        trace,
    ))
}

/// Progressive refinement: B candidate re-maskings per iteration, scored
/// by the relevance/fidelity heads on the masked input; the best
/// candidate is predicted, and decoding stops early after `patience`
/// iterations without a score improvement. Returns the snapshot from the
/// best-scoring iteration plus the full per-iteration trace.
pub fn pnag_decode(
    controls: &ControlSet,
    model: &Model,
    codec: &Codec,
    config: &PnagConfig,
    seed: u64,
) -> Result<(TokenGrid, DecodeTrace)> {
    refine_decode(
        controls,
        model,
        codec,
        &EngineConfig {
            pnag: *config,
            patience: Some(config.patience),
            masking: MaskingRule::Stochastic,
            selection: SelectionRule::BestScore,
        },
        seed,
    )
}

/// Mask-predict baseline: one candidate, deterministic re-masking of the
/// n lowest-confidence positions, always exactly T iterations, and the
/// final iteration is the output.
pub fn mnag_decode(
    controls: &ControlSet,
    model: &Model,
    codec: &Codec,
    max_iterations: usize,
    seed: u64,
) -> Result<(TokenGrid, DecodeTrace)> {
    let pnag = PnagConfig {
        candidates: 1,
        max_iterations,
        ..PnagConfig::default()
    };
    refine_decode(
        controls,
        model,
        codec,
        &EngineConfig {
            pnag,
            patience: None,
            masking: MaskingRule::LowestConfidence,
            selection: SelectionRule::LastIteration,
        },
        seed,
    )
}

/// Left-to-right decoding with a key/value cache: one prefill over the
/// control prefix plus one cached step per remaining target position,
/// N_I logit-producing passes in total. Preservation is only honored as
/// a prefix of the target sequence; anything else is rejected.
pub fn ar_decode(
    controls: &ControlSet,
    model: &Model,
    codec: &Codec,
    temperature: f64,
    greedy: bool,
    seed: u64,
) -> Result<TokenGrid> {
    if model.config.mode != Mode::Causal {
        return Err(Error::InvalidArgument("ar decoding needs a causal model".into()));
    }
    let n = codec.target_len();
    let forced: Vec<Option<u16>> = match &controls.preserve {
        None => vec![None; n],
        Some(p) => {
            let preserved_count = p.mask.iter().filter(|&&m| m).count();
            let is_prefix = p.mask.iter().take_while(|&&m| m).count() == preserved_count;
            if !is_prefix {
                return Err(Error::UnsupportedControl(
                    "left-to-right decoding can only preserve a prefix of the target sequence"
                        .into(),
                ));
            }
            let mut forced = vec![None; n];
            for (i, &c) in p.codes.iter().enumerate() {
                forced[i] = Some(c);
            }
            forced
        }
    };

    // layout gives the control prefix and per-position embedding info
    let probe_controls = ControlSet {
        text: controls.text.clone(),
        visuals: controls.visuals.clone(),
        preserve: None,
    };
    let layout = codec.build_sequence(&probe_controls, &vec![0u16; n], &vec![false; n])?;
    let seq: Vec<(u32, Modality, u32)> = (0..layout.len())
        .map(|i| (layout.tokens[i], layout.modality[i], layout.position[i]))
        .collect();

    let mut rng = Rng::substream(seed, &[0x6172]);
    let mut cache = KvCache::new(model.config.layers);
    let mut prefix: Vec<(u32, Modality, u32)> = seq[..layout.target_start].to_vec();
    let mut logits = model.prefill(&mut cache, &prefix)?;
    let mut codes = Vec::with_capacity(n);
    for i in 0..n {
        let code = match forced[i] {
            Some(c) => {
                // consume the stream exactly as a sampled step would, so
                // preserved prefixes do not shift later draws
                let _ = sample_token(&logits, temperature, greedy, &mut rng);
                c
            }
            None => sample_token(&logits, temperature, greedy, &mut rng).0,
        };
        codes.push(code);
        if i + 1 < n {
            prefix.push((codec.vocab.code_id(code), Modality::Target, i as u32));
            logits = model.forward_causal_step(&mut cache, &prefix)?;
        }
    }
    TokenGrid::new(codec.target_h, codec.target_w, codes)
}


/// Reference implementation without the cache: every step recomputes a
/// full causal forward. Same sampling stream, so outputs must match
/// `ar_decode` exactly.
pub fn ar_decode_uncached(
    controls: &ControlSet,
    model: &Model,
    codec: &Codec,
    temperature: f64,
    greedy: bool,
    seed: u64,
) -> Result<TokenGrid> {
    if model.config.mode != Mode::Causal {
        return Err(Error::InvalidArgument("ar decoding needs a causal model".into()));
    }
    if controls.preserve.is_some() {
        return Err(Error::UnsupportedControl(
            "the uncached reference does not take preservation".into(),
        ));
    }
    let n = codec.target_len();
    let mut rng = Rng::substream(seed, &[0x6172]);
    let mut codes: Vec<u16> = vec![0; n];
    for i in 0..n {
        let layout = codec.build_sequence(controls, &codes, &vec![false; n])?;
        let row = layout.target_start + i - 1;
        let logits = crate::model::forward_infer_rows(&model.params, &model.config, &layout, &[row])?;
        let (code, _) = sample_token(&logits, temperature, greedy, &mut rng);
        codes[i] = code;
    }
    TokenGrid::new(codec.target_h, codec.target_w, codes)
}
