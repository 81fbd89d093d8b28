use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// `y = x·W + b` with `W` stored as `in_dim × out_dim`.
pub fn linear<S: Scalar>(x: &Tensor2<S>, w: &Tensor2<S>, b: &[S]) -> Result<Tensor2<S>> {
    if x.cols() != w.rows() {
        return Err(Error::shape("linear", w.rows(), x.cols()));
    }
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

/// Gradients of [`linear`] given the upstream gradient `dy`: `(dx, dW, db)`.
pub fn linear_backward<S: Scalar>(
    x: &Tensor2<S>,
    w: &Tensor2<S>,
    dy: &Tensor2<S>,
) -> Result<(Tensor2<S>, Tensor2<S>, Vec<S>)> {
    let dx = dy.matmul_nt(w)?;
    let dw = x.matmul_tn(dy)?;
    Ok((dx, dw, dy.col_sums()))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add_uniform(format!("{name}.weight"), group, in_dim, out_dim, in_dim, rng);
        let bias = ps.add(format!("{name}.bias"), group, Tensor2::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor2<S>) -> Result<Tensor2<S>> {
        linear(x, ps.value(self.weight), ps.value(self.bias).data())
    }

    /// Accumulates parameter gradients and returns `dx`. `x` is the forward input.
    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        x: &Tensor2<S>,
        dy: &Tensor2<S>,
    ) -> Result<Tensor2<S>> {
        let (dx, dw, db) = linear_backward(x, ps.value(self.weight), dy)?;
        ps.accumulate(self.weight, &dw);
        ps.accumulate_slice(self.bias, &db);
        Ok(dx)
    }
}
