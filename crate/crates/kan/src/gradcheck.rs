//! Finite-difference verification of analytic gradients.

use crate::error::AutodiffError;
use crate::graph::{GradMap, ParamStore};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Central-difference perturbation.
    pub epsilon: f64,
    /// Cap on checked coordinates per parameter; evenly strided when the
    /// parameter is larger. None checks every coordinate.
    pub max_coords_per_param: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { epsilon: DEFAULT_EPSILON, max_coords_per_param: None }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat coordinate where the worst error occurred.
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central finite differences of `f`.
///
/// The relative error at each sampled coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|); the report carries
/// the maximum. `f` must be deterministic; any non-finite value surfaces as
/// an error naming the parameter being perturbed.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamStore,
    analytic: &GradMap,
    opts: &CheckOptions,
) -> Result<CheckReport, AutodiffError>
where
    F: Fn(&ParamStore) -> Result<f64, AutodiffError>,
{
    let mut work = params.clone();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };

    // Checked parameters are the ones the analytic map covers; the store may
    // hold more than this particular function touches.
    let names: Vec<String> = analytic.keys().cloned().collect();
    for name in names {
        if !params.contains(&name) {
            return Err(AutodiffError::UnknownParameter(name.clone()));
        }
        let grad = &analytic[&name];
        if !grad.all_finite() {
            return Err(AutodiffError::NonFinite(name.clone()));
        }
        let len = grad.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if len > cap && cap > 0 => {
                (0..cap).map(|i| i * len / cap).collect()
            }
            _ => (0..len).collect(),
        };
        for coord in coords {
            let original = work.get(&name).expect("param present").data()[coord];

            work.get_mut(&name).expect("param present").data_mut()[coord] = original + opts.epsilon;
            let plus = f(&work)?;
            work.get_mut(&name).expect("param present").data_mut()[coord] = original - opts.epsilon;
            let minus = f(&work)?;
            work.get_mut(&name).expect("param present").data_mut()[coord] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(AutodiffError::NonFinite(name.clone()));
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grad.data()[coord];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_coord = coord;
            }
        }
    }
    Ok(report)
}
