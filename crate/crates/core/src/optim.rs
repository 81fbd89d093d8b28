//! AdamW with bias-corrected moments and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state; moment buffers are indexed like the parameters of the
/// store they were created for.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor2<S>>,
    pub v: Vec<Tensor2<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, ps: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor2<S>> = ps
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every non-frozen parameter from its accumulated gradient.
    /// Frozen parameters are left bit-identical.
    pub fn step(&mut self, ps: &mut ParamStore<S>) {
        self.step_where(ps, |_| true);
    }

    /// Like [`AdamW::step`] but only touches parameters whose group satisfies `select`.
    pub fn step_where(&mut self, ps: &mut ParamStore<S>, select: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let lr = S::of(c.lr);
        let b1 = S::of(c.beta1);
        let b2 = S::of(c.beta2);
        let eps = S::of(c.eps);
        let decay = S::one() - S::of(c.lr * c.weight_decay);
        let bc1 = S::one() - S::of(c.beta1.powi(t));
        let bc2 = S::one() - S::of(c.beta2.powi(t));
        let ids: Vec<_> = ps.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if ps.is_frozen(id) || !select(&ps.param(id).group) {
                continue;
            }
            let grad = ps.grad(id).data().to_vec();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = ps.value_mut(id).data_mut();
            for i in 0..w.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
