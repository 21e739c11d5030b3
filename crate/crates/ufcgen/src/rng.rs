//! Deterministic PRNG (xoshiro256++ seeded via splitmix64).
//!
//! Every random decision in the workspace flows from a single seed through
//! counter-derived substreams, so changing how one pipeline stage consumes
//! randomness cannot shift another stage's stream.

/// splitmix64 step; used for seeding and substream derivation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of tag counters into a new substream seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = seed;
    let mut out = splitmix64(&mut s);
    for &t in tags {
        let mut st = out ^ t.wrapping_mul(0xd6e8_feb8_6659_fd93);
        out = splitmix64(&mut st);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Substream addressed by `tags` (e.g. `[epoch, sample]` or `[iteration, candidate]`).
    pub fn substream(seed: u64, tags: &[u64]) -> Self {
        Rng::new(derive_seed(seed, tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        let r = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        r
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // multiply-shift with rejection to avoid modulo bias
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let wide = (self.next_u64() as u128) * (n as u128);
            if wide as u64 >= threshold {
                return (wide >> 64) as usize;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box–Muller.
    pub fn gauss(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = self.uniform();
        let u1 = if u1 <= 0.0 { f64::MIN_POSITIVE } else { u1 };
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Multinomial draw over `probs` by inverse CDF on a single uniform.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        pick_by_quantile(self.uniform(), probs)
    }

    /// Weighted draw over `weights` (need not be normalized; total must be > 0).
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "weighted draw with nonpositive total");
        let mut dart = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// Inverse-CDF lookup: returns the first index whose cumulative probability
/// exceeds `q`, with buckets taken in the order listed.
pub fn pick_by_quantile(q: f64, probs: &[f64]) -> usize {
    debug_assert!(!probs.is_empty());
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if q < cum {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_by_tag() {
        let mut a = Rng::substream(7, &[0, 1]);
        let mut b = Rng::substream(7, &[0, 2]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn quantile_rule_matches_cumulative_order() {
        let probs = [0.70, 0.10, 0.10, 0.10];
        assert_eq!(pick_by_quantile(0.0, &probs), 0);
        assert_eq!(pick_by_quantile(0.69, &probs), 0);
        assert_eq!(pick_by_quantile(0.75, &probs), 1);
        assert_eq!(pick_by_quantile(0.85, &probs), 2);
        assert_eq!(pick_by_quantile(0.95, &probs), 3);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(3);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut r = Rng::new(11);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[r.below(5)] += 1;
        }
        for &c in &counts {
            let f = c as f64 / 50_000.0;
            assert!((f - 0.2).abs() < 0.01, "bucket freq {f}");
        }
    }
}
