//! AdamW with decoupled weight decay and a constant learning rate.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Also decay norm scales/shifts, biases and the mask token.
    pub decay_all: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 40,
            batch_size: 128,
            decay_all: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("weight decay must be nonnegative and eps positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
    steps: Vec<u64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Applies one update to every parameter with a gradient. Fails before touching any
    /// parameter if a gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    params.entry(*id).name
                )));
            }
        }
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
            self.steps.resize(params.len(), 0);
        }
        let c = self.cfg;
        for (id, g) in grads {
            let kind = params.entry(*id).kind;
            if kind == ParamKind::Buffer {
                continue;
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let decay = if kind == ParamKind::Weight || c.decay_all {
                c.weight_decay
            } else {
                0.0
            };
            let n = g.numel();
            let m = self.first[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.second[i].get_or_insert_with(|| vec![T::zero(); n]);
            let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
            let bc1 = lit::<T>(1.0 - c.beta1.powi(t));
            let bc2 = lit::<T>(1.0 - c.beta2.powi(t));
            let lr = lit::<T>(c.learning_rate);
            let shrink = lit::<T>(1.0 - c.learning_rate * decay);
            let eps = lit::<T>(c.eps);
            let p = params.get_mut(*id).data_mut();
            for j in 0..n {
                let gj = g.data()[j];
                p[j] *= shrink;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(kind: ParamKind, v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64(&[1], &[v]).unwrap(), kind);
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (mut s, id) = one(ParamKind::Weight, 1.5);
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut s, &[(id, Tensor::zeros(&[1]))]).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 1.5);
    }

    #[test]
    fn zero_grad_shrinks_by_decay() {
        let (mut s, id) = one(ParamKind::Weight, 2.0);
        let cfg = OptimConfig::default();
        let mut opt = AdamW::new(cfg);
        opt.step(&mut s, &[(id, Tensor::zeros(&[1]))]).unwrap();
        let expect = 2.0 * (1.0 - cfg.learning_rate * cfg.weight_decay);
        assert!((s.get(id).data()[0] - expect).abs() < 1e-15);
        let (mut nd, nid) = one(ParamKind::NoDecay, 2.0);
        opt = AdamW::new(cfg);
        opt.step(&mut nd, &[(nid, Tensor::zeros(&[1]))]).unwrap();
        assert_eq!(nd.get(nid).data()[0], 2.0);
    }

    /// Hand-rolled update equations for one scalar.
    fn oracle(mut p: f64, g: f64, steps: usize, c: &OptimConfig) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            p -= c.learning_rate * c.weight_decay * p;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t as i32));
            let vh = v / (1.0 - c.beta2.powi(t as i32));
            p -= c.learning_rate * mh / (vh.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn three_steps_match_oracle() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let (mut s, id) = one(ParamKind::Weight, 0.7);
        let mut opt = AdamW::new(cfg);
        for _ in 0..3 {
            opt.step(&mut s, &[(id, Tensor::from_f64(&[1], &[0.3]).unwrap())]).unwrap();
        }
        let expect = oracle(0.7, 0.3, 3, &cfg);
        assert!((s.get(id).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let (mut s, id) = one(ParamKind::Weight, 1.0);
        let mut opt = AdamW::new(OptimConfig::default());
        let err = opt.step(&mut s, &[(id, Tensor::from_f64(&[1], &[f64::NAN]).unwrap())]);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(s.get(id).data()[0], 1.0);
    }
}
