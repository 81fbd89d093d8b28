//! Multi-head scaled dot-product cross-attention with an explicit backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::activation::{softmax, softmax_backward};
use crate::nn::linear::Linear;
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Number of tokens a `model_dim` vector is split into.
    pub tokens: usize,
    pub token_dim: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    /// Splits `model_dim` into `tokens` tokens.
    pub fn new(num_heads: usize, tokens: usize, model_dim: usize) -> Result<Self> {
        if tokens == 0 || model_dim % tokens != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} is not divisible into {tokens} tokens"
            )));
        }
        let cfg = Self {
            num_heads,
            tokens,
            token_dim: model_dim / tokens,
            model_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens * self.token_dim != self.model_dim {
            return Err(Error::Config(format!(
                "tokens {} x token dim {} != model dim {}",
                self.tokens, self.token_dim, self.model_dim
            )));
        }
        if self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} is not divisible by {} heads",
                self.token_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    q_in: Tensor2<S>,
    k_in: Tensor2<S>,
    v_in: Tensor2<S>,
    q: Tensor2<S>,
    k: Tensor2<S>,
    v: Tensor2<S>,
    /// Per head, `queries × keys`; every row sums to one.
    pub weights: Vec<Tensor2<S>>,
    context: Tensor2<S>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads<S> {
    pub dq: Tensor2<S>,
    pub dk: Tensor2<S>,
    pub dv: Tensor2<S>,
}

/// Query, key, value and output projections are all `token_dim × token_dim`
/// with bias. Scores are scaled by `1/sqrt(head_dim)`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub cfg: AttentionConfig,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl CrossAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        group: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        Ok(Self {
            cfg,
            q_proj: Linear::new(ps, &format!("{name}.q"), group, d, d, rng),
            k_proj: Linear::new(ps, &format!("{name}.k"), group, d, d, rng),
            v_proj: Linear::new(ps, &format!("{name}.v"), group, d, d, rng),
            out_proj: Linear::new(ps, &format!("{name}.out"), group, d, d, rng),
        })
    }

    fn check(&self, what: &'static str, t: &Tensor2<impl Scalar>) -> Result<()> {
        if t.cols() != self.cfg.token_dim {
            return Err(Error::shape(what, self.cfg.token_dim, t.cols()));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        q_in: &Tensor2<S>,
        k_in: &Tensor2<S>,
        v_in: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, AttentionCache<S>)> {
        self.check("attention queries", q_in)?;
        self.check("attention keys", k_in)?;
        self.check("attention values", v_in)?;
        if k_in.rows() != v_in.rows() || k_in.rows() == 0 {
            return Err(Error::shape("attention key/value length", k_in.rows(), v_in.rows()));
        }
        let q = self.q_proj.forward(ps, q_in)?;
        let k = self.k_proj.forward(ps, k_in)?;
        let v = self.v_proj.forward(ps, v_in)?;

        let dh = self.cfg.head_dim();
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (tq, tk) = (q.rows(), k.rows());
        let mut context = Tensor2::zeros(tq, self.cfg.token_dim);
        let mut weights = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let off = h * dh;
            let mut w = Tensor2::zeros(tq, tk);
            for i in 0..tq {
                let qi = &q.row(i)[off..off + dh];
                let scores: Vec<S> = (0..tk)
                    .map(|j| {
                        let kj = &k.row(j)[off..off + dh];
                        qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale
                    })
                    .collect();
                let a = softmax(&scores);
                let ctx = &mut context.row_mut(i)[off..off + dh];
                for (j, &aij) in a.iter().enumerate() {
                    for (c, &vv) in ctx.iter_mut().zip(&v.row(j)[off..off + dh]) {
                        *c += aij * vv;
                    }
                }
                w.row_mut(i).copy_from_slice(&a);
            }
            weights.push(w);
        }
        let out = self.out_proj.forward(ps, &context)?;
        let cache = AttentionCache {
            q_in: q_in.clone(),
            k_in: k_in.clone(),
            v_in: v_in.clone(),
            q,
            k,
            v,
            weights,
            context,
        };
        Ok((out, cache))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &AttentionCache<S>,
        dy: &Tensor2<S>,
    ) -> Result<AttentionGrads<S>> {
        let dctx = self.out_proj.backward(ps, &cache.context, dy)?;
        let dh = self.cfg.head_dim();
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (tq, tk) = (cache.q.rows(), cache.k.rows());
        let mut dq = Tensor2::zeros(tq, self.cfg.token_dim);
        let mut dk = Tensor2::zeros(tk, self.cfg.token_dim);
        let mut dv = Tensor2::zeros(tk, self.cfg.token_dim);
        for (h, w) in cache.weights.iter().enumerate() {
            let off = h * dh;
            for i in 0..tq {
                let g = &dctx.row(i)[off..off + dh];
                let a = w.row(i);
                // d weights[i][j] = <g, v_j>
                let da: Vec<S> = (0..tk)
                    .map(|j| {
                        g.iter()
                            .zip(&cache.v.row(j)[off..off + dh])
                            .map(|(&x, &y)| x * y)
                            .sum()
                    })
                    .collect();
                for (j, &aij) in a.iter().enumerate() {
                    for (o, &gg) in dv.row_mut(j)[off..off + dh].iter_mut().zip(g) {
                        *o += aij * gg;
                    }
                }
                let ds = softmax_backward(a, &da);
                let qi = cache.q.row(i)[off..off + dh].to_vec();
                for (j, &s) in ds.iter().enumerate() {
                    let s = s * scale;
                    let kj = &cache.k.row(j)[off..off + dh];
                    for (o, &kk) in dq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                        *o += s * kk;
                    }
                    for (o, &qq) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                        *o += s * qq;
                    }
                }
            }
        }
        Ok(AttentionGrads {
            dq: self.q_proj.backward(ps, &cache.q_in, &dq)?,
            dk: self.k_proj.backward(ps, &cache.k_in, &dk)?,
            dv: self.v_proj.backward(ps, &cache.v_in, &dv)?,
        })
    }
}
