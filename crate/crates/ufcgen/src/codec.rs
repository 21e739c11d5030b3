//! Unified token sequence: [REL][FDL] text [EOT] visual grids [EOV] target,
//! with per-modality position ids, mask flags, and preservation flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vq::TokenGrid;

pub const REL: u32 = 0;
pub const FDL: u32 = 1;
pub const EOT: u32 = 2;
pub const EOV: u32 = 3;
pub const SEP: u32 = 4;
pub const MASK: u32 = 5;
pub const PAD: u32 = 6;
pub const UNK: u32 = 7;

const SPECIAL_COUNT: u32 = 8;

/// Ids used by the dedicated special-token position table.
pub const SPECIAL_POS_TABLE: usize = 5;

fn special_pos_id(token: u32) -> u32 {
    // REL FDL EOT EOV SEP have dedicated slots in a 5-entry table
    debug_assert!(token < 5 || token == MASK);
    token.min(4)
}

/// Token id space: 8 specials, then words, then the K visual codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
    k: usize,
}

impl Vocabulary {
    /// Builds from a word lexicon (deduplicated, order preserved) and the
    /// visual codebook size.
    pub fn new(words: &[String], k: usize) -> Self {
        let mut uniq = Vec::new();
        let mut index = BTreeMap::new();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.clone(), SPECIAL_COUNT + uniq.len() as u32);
                uniq.push(w.clone());
            }
        }
        Vocabulary {
            words: uniq,
            index,
            k,
        }
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// 8 + |words| + K
    pub fn total_size(&self) -> usize {
        SPECIAL_COUNT as usize + self.words.len() + self.k
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word_for(&self, id: u32) -> Option<&str> {
        if id < SPECIAL_COUNT {
            return None;
        }
        self.words.get((id - SPECIAL_COUNT) as usize).map(|s| s.as_str())
    }

    pub fn code_id(&self, code: u16) -> u32 {
        debug_assert!((code as usize) < self.k);
        SPECIAL_COUNT + self.words.len() as u32 + code as u32
    }

    pub fn code_for(&self, id: u32) -> Option<u16> {
        let base = SPECIAL_COUNT + self.words.len() as u32;
        if id >= base && ((id - base) as usize) < self.k {
            Some((id - base) as u16)
        } else {
            None
        }
    }

    pub fn is_word(&self, id: u32) -> bool {
        id >= SPECIAL_COUNT && ((id - SPECIAL_COUNT) as usize) < self.words.len()
    }

    /// One word per line, UTF-8.
    pub fn save_words(&self, path: &Path) -> Result<()> {
        fs::write(path, self.words.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load_words(path: &Path, k: usize) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        let words: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::Format("empty vocabulary file".into()));
        }
        Ok(Vocabulary::new(&words, k))
    }
}

/// Maps words to ids; unknown words become UNK, length is preserved.
pub fn encode_text(words: &[String], vocab: &Vocabulary) -> Vec<u32> {
    words.iter().map(|w| vocab.word_id(w)).collect()
}

/// Preservation control: a mask over target positions plus the codes to
/// hold fixed at the masked-true positions (in position order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Preservation {
    pub mask: Vec<bool>,
    pub codes: Vec<u16>,
}

impl Preservation {
    pub fn new(mask: Vec<bool>, codes: Vec<u16>) -> Result<Self> {
        let n = mask.iter().filter(|&&m| m).count();
        if n != codes.len() {
            return Err(Error::InvalidArgument(format!(
                "preservation has {n} held positions but {} codes",
                codes.len()
            )));
        }
        Ok(Preservation { mask, codes })
    }

    /// Overwrites held positions with the preserved codes; other
    /// positions pass through untouched.
    pub fn apply(&self, state_codes: &mut [u16]) {
        debug_assert_eq!(state_codes.len(), self.mask.len());
        let mut held = self.codes.iter();
        for (slot, &keep) in state_codes.iter_mut().zip(&self.mask) {
            if keep {
                *slot = *held.next().expect("preservation codes exhausted");
            }
        }
    }
}

/// The optional controls conditioning one generation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ControlSet {
    pub text: Option<Vec<u32>>,
    pub visuals: Vec<TokenGrid>,
    pub preserve: Option<Preservation>,
}

impl ControlSet {
    pub fn has_text(&self) -> bool {
        self.text.as_ref().map(|t| !t.is_empty()).unwrap_or(false)
    }

    pub fn has_visuals(&self) -> bool {
        !self.visuals.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Special,
    Text,
    Visual,
    Target,
}

/// The flattened model input. Target positions are the trailing
/// `target_len` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSequence {
    pub tokens: Vec<u32>,
    pub modality: Vec<Modality>,
    pub position: Vec<u32>,
    pub masked: Vec<bool>,
    pub preserved: Vec<bool>,
    pub target_start: usize,
    pub vc_dims: Vec<(usize, usize)>,
    pub text_len: usize,
}

impl LayoutSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_len(&self) -> usize {
        self.tokens.len() - self.target_start
    }

    pub fn target_positions(&self) -> std::ops::Range<usize> {
        self.target_start..self.tokens.len()
    }

    /// Position ids, one per token, as embedded per modality table.
    pub fn position_ids(&self) -> &[u32] {
        &self.position
    }
}

/// Builds and parses layouts for a fixed target grid geometry.
#[derive(Clone, Debug)]
pub struct Codec {
    pub vocab: Vocabulary,
    pub target_h: usize,
    pub target_w: usize,
    pub v_max: usize,
}

impl Codec {
    pub fn new(vocab: Vocabulary, target_h: usize, target_w: usize) -> Self {
        Codec {
            vocab,
            target_h,
            target_w,
            v_max: 3,
        }
    }

    pub fn target_len(&self) -> usize {
        self.target_h * self.target_w
    }

    /// Assembles the unified sequence. Masked target positions carry MASK;
    /// preserved positions carry the preserved codes and must not be
    /// masked.
    pub fn build_sequence(
        &self,
        controls: &ControlSet,
        target_codes: &[u16],
        mask_flags: &[bool],
    ) -> Result<LayoutSequence> {
        let n_target = self.target_len();
        if target_codes.len() != n_target || mask_flags.len() != n_target {
            return Err(Error::InvalidArgument(format!(
                "target arrays must have length {n_target}"
            )));
        }
        if controls.visuals.len() > self.v_max {
            return Err(Error::InvalidArgument(format!(
                "{} visual controls exceed the maximum {}",
                controls.visuals.len(),
                self.v_max
            )));
        }
        if let Some(p) = &controls.preserve {
            if p.mask.len() != n_target {
                return Err(Error::InvalidArgument(
                    "preservation mask length mismatch".into(),
                ));
            }
            for i in 0..n_target {
                if p.mask[i] && mask_flags[i] {
                    return Err(Error::Contract(format!(
                        "target position {i} is preserved and masked"
                    )));
                }
            }
        }

        let mut target = target_codes.to_vec();
        if let Some(p) = &controls.preserve {
            p.apply(&mut target);
        }

        let cap = 2
            + controls.text.as_ref().map(|t| t.len()).unwrap_or(0)
            + 1
            + controls.visuals.iter().map(|v| v.len() + 1).sum::<usize>()
            + 1
            + n_target;
        let mut layout = LayoutSequence {
            tokens: Vec::with_capacity(cap),
            modality: Vec::with_capacity(cap),
            position: Vec::with_capacity(cap),
            masked: Vec::with_capacity(cap),
            preserved: Vec::with_capacity(cap),
            target_start: 0,
            vc_dims: controls.visuals.iter().map(|v| (v.h, v.w)).collect(),
            text_len: 0,
        };
        let push =
            |l: &mut LayoutSequence, tok: u32, m: Modality, pos: u32, masked: bool, pres: bool| {
                l.tokens.push(tok);
                l.modality.push(m);
                l.position.push(pos);
                l.masked.push(masked);
                l.preserved.push(pres);
            };

        push(&mut layout, REL, Modality::Special, special_pos_id(REL), false, false);
        push(&mut layout, FDL, Modality::Special, special_pos_id(FDL), false, false);
        if let Some(text) = &controls.text {
            layout.text_len = text.len();
            for (i, &wid) in text.iter().enumerate() {
                if !self.vocab.is_word(wid) && wid != UNK {
                    return Err(Error::InvalidArgument(format!(
                        "token {wid} is not a word id"
                    )));
                }
                push(&mut layout, wid, Modality::Text, i as u32, false, false);
            }
        }
        push(&mut layout, EOT, Modality::Special, special_pos_id(EOT), false, false);
        for (vi, grid) in controls.visuals.iter().enumerate() {
            if vi > 0 {
                push(&mut layout, SEP, Modality::Special, special_pos_id(SEP), false, false);
            }
            for (ci, &code) in grid.codes.iter().enumerate() {
                if code as usize >= self.vocab.k() {
                    return Err(Error::Index(format!(
                        "visual code {code} out of codebook range {}",
                        self.vocab.k()
                    )));
                }
                // spatial id in the grid's own coordinates
                let (r, c) = (ci / grid.w, ci % grid.w);
                push(
                    &mut layout,
                    self.vocab.code_id(code),
                    Modality::Visual,
                    (r * grid.w + c) as u32,
                    false,
                    false,
                );
            }
        }
        push(&mut layout, EOV, Modality::Special, special_pos_id(EOV), false, false);

        layout.target_start = layout.tokens.len();
        let preserve_mask = controls.preserve.as_ref().map(|p| p.mask.as_slice());
        for i in 0..n_target {
            if target[i] as usize >= self.vocab.k() {
                return Err(Error::Index(format!(
                    "target code {} out of codebook range {}",
                    target[i],
                    self.vocab.k()
                )));
            }
            let tok = if mask_flags[i] {
                MASK
            } else {
                self.vocab.code_id(target[i])
            };
            let pres = preserve_mask.map(|m| m[i]).unwrap_or(false);
            push(&mut layout, tok, Modality::Target, i as u32, mask_flags[i], pres);
        }
        Ok(layout)
    }

    /// Exact inverse of build_sequence (masked target positions come back
    /// as MASK-flagged with code 0).
    pub fn parse(&self, layout: &LayoutSequence) -> Result<(ControlSet, Vec<u16>, Vec<bool>)> {
        let toks = &layout.tokens;
        if toks.len() < 4 + self.target_len() || toks[0] != REL || toks[1] != FDL {
            return Err(Error::Format("layout does not start with [REL][FDL]".into()));
        }
        let mut i = 2;
        let mut text = Vec::new();
        while toks[i] != EOT {
            text.push(toks[i]);
            i += 1;
        }
        i += 1; // EOT
        let mut visuals = Vec::new();
        let mut current: Vec<u16> = Vec::new();
        let mut vc_iter = layout.vc_dims.iter();
        while toks[i] != EOV {
            if toks[i] == SEP {
                let &(h, w) = vc_iter.next().ok_or_else(|| {
                    Error::Format("more visual grids than recorded dims".into())
                })?;
                visuals.push(TokenGrid::new(h, w, std::mem::take(&mut current))?);
            } else {
                let code = self
                    .vocab
                    .code_for(toks[i])
                    .ok_or_else(|| Error::Format(format!("token {} is not a code", toks[i])))?;
                current.push(code);
            }
            i += 1;
        }
        if !current.is_empty() || layout.vc_dims.len() == 1 {
            let &(h, w) = vc_iter
                .next()
                .ok_or_else(|| Error::Format("more visual grids than recorded dims".into()))?;
            visuals.push(TokenGrid::new(h, w, std::mem::take(&mut current))?);
        }
        i += 1; // EOV
        if i != layout.target_start {
            return Err(Error::Format("target segment out of place".into()));
        }
        let mut codes = Vec::with_capacity(self.target_len());
        let mut mask = Vec::with_capacity(self.target_len());
        let mut pres_mask = Vec::with_capacity(self.target_len());
        let mut pres_codes = Vec::new();
        for t in i..toks.len() {
            let m = layout.masked[t];
            mask.push(m);
            let code = if m {
                0
            } else {
                self.vocab
                    .code_for(toks[t])
                    .ok_or_else(|| Error::Format("non-code token in target".into()))?
            };
            codes.push(code);
            pres_mask.push(layout.preserved[t]);
            if layout.preserved[t] {
                pres_codes.push(code);
            }
        }
        let preserve = if pres_mask.iter().any(|&p| p) {
            Some(Preservation::new(pres_mask, pres_codes)?)
        } else {
            None
        };
        Ok((
            ControlSet {
                text: if text.is_empty() && layout.text_len == 0 {
                    None
                } else {
                    Some(text)
                },
                visuals,
                preserve,
            },
            codes,
            mask,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn vocab() -> Vocabulary {
        let words: Vec<String> = ["red", "circle", "center", "on", "blue"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Vocabulary::new(&words, 64)
    }

    fn codec() -> Codec {
        Codec::new(vocab(), 8, 8)
    }

    #[test]
    fn encode_text_known_words() {
        let v = vocab();
        let words: Vec<String> = ["red", "circle"].iter().map(|s| s.to_string()).collect();
        let ids = encode_text(&words, &v);
        assert_eq!(ids, vec![v.word_id("red"), v.word_id("circle")]);
        assert!(ids.iter().all(|&i| v.is_word(i)));
    }

    #[test]
    fn encode_text_empty() {
        assert!(encode_text(&[], &vocab()).is_empty());
    }

    #[test]
    fn encode_text_unknown_maps_to_unk() {
        let words = vec!["zzz".to_string()];
        assert_eq!(encode_text(&words, &vocab()), vec![UNK]);
    }

    #[test]
    fn vocabulary_ranges_are_disjoint() {
        let v = vocab();
        assert_eq!(v.total_size(), 8 + 5 + 64);
        assert_eq!(v.word_id("red"), 8);
        assert_eq!(v.code_id(0), 13);
        assert_eq!(v.code_for(13), Some(0));
        assert_eq!(v.code_for(12), None);
        assert!(!v.is_word(MASK));
    }

    #[test]
    fn layout_length_text_only() {
        let c = codec();
        let controls = ControlSet {
            text: Some(vec![8, 9, 10]),
            ..Default::default()
        };
        let layout = c
            .build_sequence(&controls, &[0; 64], &[true; 64])
            .unwrap();
        // 2 + 3 + 1 + 0 + 1 + 64
        assert_eq!(layout.len(), 71);
        for t in 7..71 {
            assert_eq!(layout.tokens[t], MASK);
        }
        assert_eq!(layout.target_start, 7);
    }

    #[test]
    fn layout_length_no_controls() {
        let c = codec();
        let layout = c
            .build_sequence(&ControlSet::default(), &[0; 64], &[true; 64])
            .unwrap();
        assert_eq!(layout.len(), 68);
        assert_eq!(layout.tokens[2], EOT);
        assert_eq!(layout.tokens[3], EOV);
    }

    #[test]
    fn layout_two_visuals_one_separator() {
        let c = codec();
        let g1 = TokenGrid::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let g2 = TokenGrid::new(2, 2, vec![5, 6, 7, 8]).unwrap();
        let controls = ControlSet {
            text: Some(vec![8]),
            visuals: vec![g1, g2],
            ..Default::default()
        };
        let layout = c
            .build_sequence(&controls, &[0; 64], &[false; 64])
            .unwrap();
        // 2 + 1 + 1 + (4 + 1 + 4) + 1 + 64
        assert_eq!(layout.len(), 2 + 1 + 1 + 9 + 1 + 64);
        let seps = layout.tokens.iter().filter(|&&t| t == SEP).count();
        assert_eq!(seps, 1);
    }

    #[test]
    fn position_ids_per_modality() {
        let c = codec();
        let controls = ControlSet {
            text: Some(vec![8, 9]),
            ..Default::default()
        };
        let layout = c
            .build_sequence(&controls, &[0; 64], &[false; 64])
            .unwrap();
        // second text word gets text-table id 1
        assert_eq!(layout.position[3], 1);
        // target (0,0) gets target-table id 0
        assert_eq!(layout.position[layout.target_start], 0);
        // target (2,3) on 8x8 gets id 19
        assert_eq!(layout.position[layout.target_start + 19], 19);
        assert_eq!(layout.modality[layout.target_start + 19], Modality::Target);
    }

    #[test]
    fn preserved_positions_override_codes_and_forbid_masks() {
        let c = codec();
        let mut pmask = vec![false; 64];
        pmask[5] = true;
        let preserve = Preservation::new(pmask.clone(), vec![42]).unwrap();
        let controls = ControlSet {
            preserve: Some(preserve),
            ..Default::default()
        };
        let mut mask = vec![true; 64];
        mask[5] = false;
        let layout = c.build_sequence(&controls, &[0; 64], &mask).unwrap();
        assert_eq!(layout.tokens[layout.target_start + 5], c.vocab.code_id(42));
        assert!(layout.preserved[layout.target_start + 5]);

        let bad_mask = vec![true; 64];
        assert!(matches!(
            c.build_sequence(&controls, &[0; 64], &bad_mask),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn apply_preservation_cases() {
        let all = Preservation::new(vec![true; 4], vec![9, 8, 7, 6]).unwrap();
        let mut codes = vec![0, 1, 2, 3];
        all.apply(&mut codes);
        assert_eq!(codes, vec![9, 8, 7, 6]);

        let none = Preservation::new(vec![false; 4], vec![]).unwrap();
        let mut codes = vec![0, 1, 2, 3];
        none.apply(&mut codes);
        assert_eq!(codes, vec![0, 1, 2, 3]);

        let one = Preservation::new(vec![false, true, false, false], vec![5]).unwrap();
        let mut codes = vec![0, 1, 2, 3];
        one.apply(&mut codes);
        assert_eq!(codes, vec![0, 5, 2, 3]);
    }

    #[test]
    fn mask_only_on_target_and_preserved_never_masked() {
        let c = codec();
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let text = if rng.below(2) == 0 {
                Some((0..rng.below(5)).map(|_| 8 + rng.below(5) as u32).collect())
            } else {
                None
            };
            let n_vis = rng.below(3);
            let visuals = (0..n_vis)
                .map(|_| {
                    let h = 2 + rng.below(3);
                    let w = 2 + rng.below(3);
                    TokenGrid::new(h, w, (0..h * w).map(|_| rng.below(64) as u16).collect())
                        .unwrap()
                })
                .collect();
            let mut pmask = vec![false; 64];
            let mut pcodes = Vec::new();
            for i in 0..64 {
                if rng.below(8) == 0 {
                    pmask[i] = true;
                    pcodes.push(rng.below(64) as u16);
                }
            }
            let has_preserve = pmask.iter().any(|&b| b);
            let controls = ControlSet {
                text,
                visuals,
                preserve: if has_preserve {
                    Some(Preservation::new(pmask.clone(), pcodes).unwrap())
                } else {
                    None
                },
            };
            let codes: Vec<u16> = (0..64).map(|_| rng.below(64) as u16).collect();
            let mask: Vec<bool> = (0..64)
                .map(|i| !pmask[i] && rng.below(2) == 0)
                .collect();
            let layout = c.build_sequence(&controls, &codes, &mask).unwrap();
            for t in 0..layout.len() {
                if layout.masked[t] {
                    assert_eq!(layout.modality[t], Modality::Target);
                    assert!(!layout.preserved[t]);
                }
                if layout.modality[t] != Modality::Target {
                    assert_ne!(layout.tokens[t], MASK);
                }
            }
        }
    }

    #[test]
    fn round_trip_recovers_controls_target_and_mask() {
        let c = codec();
        let mut rng = Rng::new(11);
        for _ in 0..300 {
            let text = match rng.below(3) {
                0 => None,
                _ => Some(
                    (0..1 + rng.below(5))
                        .map(|_| 8 + rng.below(5) as u32)
                        .collect::<Vec<_>>(),
                ),
            };
            let n_vis = rng.below(4).min(3);
            let visuals: Vec<TokenGrid> = (0..n_vis)
                .map(|_| {
                    let h = 2 + rng.below(4);
                    let w = 2 + rng.below(4);
                    TokenGrid::new(h, w, (0..h * w).map(|_| rng.below(64) as u16).collect())
                        .unwrap()
                })
                .collect();
            let mut pmask = vec![false; 64];
            let mut pcodes = Vec::new();
            for i in 0..64 {
                if rng.below(6) == 0 {
                    pmask[i] = true;
                }
            }
            let codes: Vec<u16> = (0..64).map(|_| rng.below(64) as u16).collect();
            for i in 0..64 {
                if pmask[i] {
                    pcodes.push(codes[i]);
                }
            }
            let has_preserve = pmask.iter().any(|&b| b);
            let controls = ControlSet {
                text: text.clone(),
                visuals: visuals.clone(),
                preserve: if has_preserve {
                    Some(Preservation::new(pmask.clone(), pcodes).unwrap())
                } else {
                    None
                },
            };
            let mask: Vec<bool> = (0..64).map(|i| !pmask[i] && rng.below(3) == 0).collect();
            let layout = c.build_sequence(&controls, &codes, &mask).unwrap();
            let (got_controls, got_codes, got_mask) = c.parse(&layout).unwrap();
            assert_eq!(got_mask, mask);
            assert_eq!(got_controls.visuals, controls.visuals);
            match (&controls.text, &got_controls.text) {
                (None, None) => {}
                (Some(a), Some(b)) => assert_eq!(a, b),
                other => panic!("text mismatch {:?}", other),
            }
            assert_eq!(got_controls.preserve, controls.preserve);
            for i in 0..64 {
                if !mask[i] {
                    assert_eq!(got_codes[i], codes[i], "unmasked code {i}");
                }
            }
        }
    }
}
