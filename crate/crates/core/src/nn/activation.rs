//! Elementwise activations and the vector softmax.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Standard normal CDF.
#[inline]
fn phi_cdf<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    half * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
fn phi_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::of(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * S::of(0.5)).exp()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    x * phi_cdf(x)
}

/// `d/dx gelu(x) = Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    phi_cdf(x) + x * phi_pdf(x)
}

pub fn gelu<S: Scalar>(x: &Tensor2<S>) -> Tensor2<S> {
    x.map(gelu_scalar)
}

/// `dx` for [`gelu`] given its forward input.
pub fn gelu_backward<S: Scalar>(x: &Tensor2<S>, dy: &Tensor2<S>) -> Result<Tensor2<S>> {
    x.zip_map(dy, |x, g| gelu_derivative(x) * g)
}

#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid<S: Scalar>(x: &Tensor2<S>) -> Tensor2<S> {
    x.map(sigmoid_scalar)
}

/// `dx` for [`sigmoid`] given its forward output.
pub fn sigmoid_backward<S: Scalar>(y: &Tensor2<S>, dy: &Tensor2<S>) -> Result<Tensor2<S>> {
    y.zip_map(dy, |y, g| y * (S::one() - y) * g)
}

/// Max-shifted softmax. Tied inputs give exactly uniform output.
pub fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(softmax(x))` computed without forming the probabilities.
pub fn log_softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Vector-Jacobian product of softmax: `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub fn softmax_backward<S: Scalar>(y: &[S], dy: &[S]) -> Vec<S> {
    let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    y.iter().zip(dy).map(|(&p, &g)| p * (g - dot)).collect()
}

/// Row-wise [`softmax`].
pub fn softmax_rows<S: Scalar>(x: &Tensor2<S>) -> Tensor2<S> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let s = softmax(x.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}
