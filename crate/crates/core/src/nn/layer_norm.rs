use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Values kept from the forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    /// Normalized input before the affine map.
    pub xhat: Tensor2<S>,
    pub inv_std: Vec<S>,
}

/// Per-row normalization to zero mean and unit (biased) variance followed by
/// `gain ⊙ x̂ + bias`.
pub fn layer_norm<S: Scalar>(
    x: &Tensor2<S>,
    gain: &[S],
    bias: &[S],
    eps: S,
) -> Result<(Tensor2<S>, LayerNormCache<S>)> {
    let n = x.cols();
    if n < 2 {
        return Err(Error::shape("layer_norm", ">= 2 columns", n));
    }
    if gain.len() != n || bias.len() != n {
        return Err(Error::shape("layer_norm", n, format!("gain {} bias {}", gain.len(), bias.len())));
    }
    let nf = S::of(n as f64);
    let mut xhat = Tensor2::zeros(x.rows(), n);
    let mut y = Tensor2::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
        let is = S::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let xh = xhat.row(r).to_vec();
        for (((o, &h), &g), &b) in y.row_mut(r).iter_mut().zip(&xh).zip(gain).zip(bias) {
            *o = g * h + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<S: Scalar>(
    cache: &LayerNormCache<S>,
    gain: &[S],
    dy: &Tensor2<S>,
) -> (Tensor2<S>, Vec<S>, Vec<S>) {
    let n = dy.cols();
    let nf = S::of(n as f64);
    let mut dx = Tensor2::zeros(dy.rows(), n);
    let mut dgain = vec![S::zero(); n];
    let mut dbias = vec![S::zero(); n];
    let mut dxhat = vec![S::zero(); n];
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..n {
            dgain[j] += g[j] * xh[j];
            dbias[j] += g[j];
            dxhat[j] = g[j] * gain[j];
        }
        let sum_d: S = dxhat.iter().copied().sum();
        let sum_dx: S = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let scale = cache.inv_std[r] / nf;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = scale * (nf * dxhat[j] - sum_d - xh[j] * sum_dx);
        }
    }
    (dx, dgain, dbias)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, group: &str, dim: usize, eps: f64) -> Self {
        let gain = ps.add(format!("{name}.gain"), group, Tensor2::full(1, dim, S::one()));
        let bias = ps.add(format!("{name}.bias"), group, Tensor2::zeros(1, dim));
        Self { gain, bias, dim, eps }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, LayerNormCache<S>)> {
        layer_norm(x, ps.value(self.gain).data(), ps.value(self.bias).data(), S::of(self.eps))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &LayerNormCache<S>,
        dy: &Tensor2<S>,
    ) -> Tensor2<S> {
        let (dx, dg, db) = layer_norm_backward(cache, ps.value(self.gain).data(), dy);
        ps.accumulate_slice(self.gain, &dg);
        ps.accumulate_slice(self.bias, &db);
        dx
    }
}
