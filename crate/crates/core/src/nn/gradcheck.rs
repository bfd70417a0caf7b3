//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |a_i − cd_i| / max(|a_i|, |cd_i|, floor)`, floor 1e-12 by
    /// default.
    pub max_rel_error: f64,
    /// Index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` (the gradient of `f` at `theta`) against central
/// differences with step `delta`.
pub fn gradient_check<F>(f: F, analytic: &[f64], theta: &[f64], delta: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    gradient_check_with_floor(f, analytic, theta, delta, 1e-12)
}

/// Like [`gradient_check`] with a custom denominator floor. Deep composites
/// have coordinates whose true gradient is zero or tiny (e.g. a shift that a
/// later normalization cancels), where central differences only measure
/// roundoff; a floor proportional to the gradient scale keeps those from
/// dominating the maximum.
pub fn gradient_check_with_floor<F>(
    mut f: F,
    analytic: &[f64],
    theta: &[f64],
    delta: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::dim(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::param(format!("floor {floor} must be positive")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::param(format!("step {delta} must be positive")));
    }
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + delta;
        let up = f(&probe);
        probe[i] = orig - delta;
        let down = f(&probe);
        probe[i] = orig;
        let cd = (up - down) / (2.0 * delta);
        let a = analytic[i];
        if !(cd.is_finite() && a.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
        }
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(floor);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: rel.max(report.max_rel_error),
                worst_index: i,
                analytic: a,
                numeric: cd,
            };
        }
    }
    Ok(report)
}
