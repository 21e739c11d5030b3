use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Named parameter set. BTreeMap keeps iteration order (and therefore
/// every update and checkpoint) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    map: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        debug_assert!(!self.map.contains_key(name), "duplicate parameter {name}");
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

/// One gradient tensor per named parameter, shape-matched.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Zeroed gradients matching a parameter set.
    pub fn zeros_like(params: &Parameters) -> Self {
        let map = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims())))
            .collect();
        Gradients { map }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown gradient {name}"))
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown gradient {name}"));
        debug_assert_eq!(slot.dims(), g.dims(), "gradient shape mismatch for {name}");
        for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
            *s += v;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

/// Adaptive-moment optimizer with bias correction.
///
/// Defaults: lr 3e-4, betas 0.9/0.999, eps 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step_count: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(3e-4)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update step. Rejects non-finite gradients before touching any
    /// parameter, naming the offending tensor.
    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite gradient in {name} at step {}",
                    self.step_count + 1
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.dims()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.dims()));
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single_param(1.25);
        let g = Gradients::zeros_like(&p);
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").item(), 1.25);
    }

    #[test]
    fn identical_calls_give_identical_results() {
        let run = || {
            let mut p = single_param(1.0);
            let mut g = Gradients::zeros_like(&p);
            g.accumulate("w", &Tensor::scalar(0.5));
            let mut opt = Adam::new(0.1);
            opt.step(&mut p, &g).unwrap();
            opt.step(&mut p, &g).unwrap();
            p.get("w").item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn single_step_matches_hand_evaluated_update() {
        // p0 = 1.0, g = 0.5, lr = 0.1, beta1 = 0.9, beta2 = 0.999, eps = 1e-8
        // m1 = 0.05            -> mhat = 0.05 / 0.1   = 0.5
        // v1 = 0.00025         -> vhat = 0.00025/0.001 = 0.25
        // p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
        let mut p = single_param(1.0);
        let mut g = Gradients::zeros_like(&p);
        g.accumulate("w", &Tensor::scalar(0.5));
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g).unwrap();
        let expect = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((p.get("w").item() - expect).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_rejected_before_update() {
        let mut p = single_param(1.0);
        let mut g = Gradients::zeros_like(&p);
        g.accumulate("w", &Tensor::scalar(f64::NAN));
        let mut opt = Adam::new(0.1);
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(p.get("w").item(), 1.0);
    }
}
