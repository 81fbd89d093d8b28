//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: Option<String>,
    pub checked: usize,
    /// Parameters in frozen groups; their analytic gradient is asserted zero
    /// and no finite difference is taken.
    pub frozen: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic against central-difference gradients for every
/// non-frozen parameter in `ps`.
///
/// `loss` must evaluate the scalar objective and backpropagate into the
/// gradients of `ps` (accumulating; the checker zeroes them between calls).
pub fn grad_check<S, F>(ps: &mut ParamStore<S>, opts: GradCheckOptions, mut loss: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut ParamStore<S>) -> Result<S>,
{
    ps.zero_grad();
    let l0 = loss(ps)?;
    if !l0.is_finite() {
        return Err(Error::NonFinite(format!("loss at the base point is {l0}")));
    }
    let analytic: Vec<Vec<f64>> = ps
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        frozen: Vec::new(),
    };
    let ids: Vec<_> = ps.ids().collect();
    let eps = S::of(opts.eps);
    for (pi, id) in ids.into_iter().enumerate() {
        let name = ps.param(id).name.clone();
        if ps.is_frozen(id) {
            if analytic[pi].iter().any(|&g| g != 0.0) {
                return Err(Error::Config(format!("frozen parameter {name} received gradient")));
            }
            report.frozen.push(name);
            continue;
        }
        for i in 0..analytic[pi].len() {
            let orig = ps.value(id).data()[i];
            ps.value_mut(id).data_mut()[i] = orig + eps;
            let plus = loss(ps)?;
            ps.value_mut(id).data_mut()[i] = orig - eps;
            let minus = loss(ps)?;
            ps.value_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * opts.eps);
            let err = relative_error(analytic[pi][i], numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(format!("{name}[{i}]"));
            }
        }
    }
    ps.zero_grad();
    Ok(report)
}
