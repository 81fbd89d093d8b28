//! Residual MLP stem projecting raw per-sequence features to the latent width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// `y = LayerNorm(P(x) + W₂·gelu(W₁·x))`, where `P` is a learned projection when
/// the raw width differs from the latent width and the identity otherwise.
#[derive(Debug, Clone)]
pub struct Stem {
    pub proj: Option<Linear>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: LayerNorm,
    pub raw_dim: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct StemCache<S> {
    x: Tensor2<S>,
    h_pre: Tensor2<S>,
    h: Tensor2<S>,
    norm: LayerNormCache<S>,
}

impl Stem {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        group: &str,
        raw_dim: usize,
        dim: usize,
        ln_eps: f64,
        rng: &mut R,
    ) -> Self {
        let proj = (raw_dim != dim).then(|| Linear::new(ps, &format!("{group}.proj"), group, raw_dim, dim, rng));
        Self {
            proj,
            fc1: Linear::new(ps, &format!("{group}.fc1"), group, raw_dim, dim, rng),
            fc2: Linear::new(ps, &format!("{group}.fc2"), group, dim, dim, rng),
            norm: LayerNorm::new(ps, &format!("{group}.norm"), group, dim, ln_eps),
            raw_dim,
            dim,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor2<S>) -> Result<(Tensor2<S>, StemCache<S>)> {
        if x.cols() != self.raw_dim {
            return Err(Error::shape("stem input", self.raw_dim, x.cols()));
        }
        let h_pre = self.fc1.forward(ps, x)?;
        let h = gelu(&h_pre);
        let mut s = self.fc2.forward(ps, &h)?;
        match &self.proj {
            Some(p) => s.add_assign(&p.forward(ps, x)?)?,
            None => s.add_assign(x)?,
        }
        let (y, norm) = self.norm.forward(ps, &s)?;
        Ok((
            y,
            StemCache {
                x: x.clone(),
                h_pre,
                h,
                norm,
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &StemCache<S>,
        dy: &Tensor2<S>,
    ) -> Result<Tensor2<S>> {
        let ds = self.norm.backward(ps, &cache.norm, dy);
        let dh = self.fc2.backward(ps, &cache.h, &ds)?;
        let dh_pre = gelu_backward(&cache.h_pre, &dh)?;
        let mut dx = self.fc1.backward(ps, &cache.x, &dh_pre)?;
        match &self.proj {
            Some(p) => dx.add_assign(&p.backward(ps, &cache.x, &ds)?)?,
            None => dx.add_assign(&ds)?,
        }
        Ok(dx)
    }
}
