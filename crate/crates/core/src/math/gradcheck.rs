//! Central finite-difference verification of tape gradients.

use super::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;
/// Slopes within this factor of the loss roundoff (`ulp(loss) / eps`) are
/// below what central differences resolve; they are compared on that scale.
const ROUNDOFF_MARGIN: f64 = 1e4;
/// One-sided slopes that disagree by more than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_per_param: Option<usize>,
    /// Length of [`GradCheckReport::worst`].
    pub keep_worst: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: DEFAULT_EPS, max_per_param: None, keep_worst: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Largest errors first.
    pub worst: Vec<CoordinateError>,
    /// Coordinates sitting on a non-differentiable point.
    pub skipped: Vec<Coordinate>,
    /// Coordinates whose perturbed loss was not finite.
    pub non_finite: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.non_finite.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `loss_fn` with central differences at every
/// parameter entry.
pub fn finite_difference_check<F>(params: &mut ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    let opts = GradCheckOptions { eps, ..GradCheckOptions::default() };
    finite_difference_check_with(params, &opts, loss_fn)
}

pub fn finite_difference_check_with<F>(params: &mut ParamStore, opts: &GradCheckOptions, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    if opts.eps <= 0.0 || !opts.eps.is_finite() {
        return Err(Error::domain("finite_difference_check", format!("eps must be positive, got {}", opts.eps)));
    }
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    tape.backward(loss, params)?;
    let base = tape.item(loss)?;
    drop(tape);

    let mut eval = |params: &ParamStore| -> Result<Option<f64>> {
        let mut tape = Tape::new();
        match loss_fn(params, &mut tape) {
            Ok(id) => {
                let v = tape.item(id)?;
                Ok(v.is_finite().then_some(v))
            }
            Err(Error::NonFinite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport::default();
    let mut errors = Vec::new();
    for name in names {
        let numel = params.value(&name)?.numel();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        for index in indices {
            let original = params.value(&name)?.data()[index];
            let analytic = params.grad(&name)?.data()[index];
            params.value_mut(&name)?.data_mut()[index] = original + opts.eps;
            let plus = eval(params)?;
            params.value_mut(&name)?.data_mut()[index] = original - opts.eps;
            let minus = eval(params)?;
            params.value_mut(&name)?.data_mut()[index] = original;

            let (Some(plus), Some(minus)) = (plus, minus) else {
                report.non_finite.push(Coordinate { param: name.clone(), index });
                continue;
            };
            let forward = (plus - base) / opts.eps;
            let backward = (base - minus) / opts.eps;
            let scale = forward.abs().max(backward.abs()).max(1e-4);
            if (forward - backward).abs() > KINK_TOL * scale {
                report.skipped.push(Coordinate { param: name.clone(), index });
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let roundoff = f64::EPSILON * base.abs().max(plus.abs()).max(minus.abs()) / opts.eps;
            let scale = analytic.abs().max(numeric.abs()).max(ROUNDOFF_MARGIN * roundoff).max(REL_FLOOR);
            let rel_error = (analytic - numeric).abs() / scale;
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel_error);
            errors.push(CoordinateError { param: name.clone(), index, analytic, numeric, rel_error });
        }
    }
    errors.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    errors.truncate(opts.keep_worst);
    report.worst = errors;
    Ok(report)
}
