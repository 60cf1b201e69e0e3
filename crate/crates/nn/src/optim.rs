use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer moments and step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<F> {
    pub config: AdamWConfig,
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr)
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    ///
    /// Parameters without a gradient are left untouched. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step_with_lr(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGradient { name: store.name(id).to_string() });
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let step_size = F::from_f64(lr / bc1);
        let bc2_sqrt = F::from_f64(bc2.sqrt());
        let eps = F::from_f64(c.eps);
        let decay = F::from_f64(1.0 - lr * c.weight_decay);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] *= decay;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::ParamId;

    fn one_param(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = one_param(1.5);
        let mut opt = AdamWState::new(AdamWConfig::default(), &store);
        let mut grads = ParamGrads::new(1);
        grads.accumulate(ParamId(0), &Tensor::scalar(0.0), 1.0);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(ParamId(0)).item(), 1.5);
    }

    #[test]
    fn decay_alone_scales_parameter() {
        let mut store = one_param(2.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.3, ..Default::default() };
        let mut opt = AdamWState::new(cfg, &store);
        let mut grads = ParamGrads::new(1);
        grads.accumulate(ParamId(0), &Tensor::scalar(0.0), 1.0);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get(ParamId(0)).item() - 2.0 * (1.0 - 0.1 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut store = one_param(0.0);
        let mut opt = AdamWState::new(AdamWConfig::default(), &store);
        let mut grads = ParamGrads::new(1);
        grads.accumulate(ParamId(0), &Tensor::scalar(f64::NAN), 1.0);
        assert!(matches!(opt.step(&mut store, &grads), Err(NnError::NonFiniteGradient { .. })));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = one_param(0.0);
        let cfg = AdamWConfig { lr: 1e-2, ..Default::default() };
        let mut opt = AdamWState::new(cfg, &store);
        let mut steps = 0;
        for _ in 0..2000 {
            let g = Graph::new();
            let x = g.param(&store, ParamId(0));
            let three = g.constant(Tensor::scalar(3.0));
            let loss = x.sub(three).unwrap().sum_sq();
            let grads = g.backward(loss).unwrap().param_grads(1);
            opt.step(&mut store, &grads).unwrap();
            steps += 1;
            if (store.get(ParamId(0)).item() - 3.0).abs() < 1e-3 && steps > 1500 {
                break;
            }
        }
        assert!((store.get(ParamId(0)).item() - 3.0).abs() < 1e-3);
    }
}
