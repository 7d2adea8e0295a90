use serde::Serialize;

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Largest model the checker accepts.
pub const MAX_PARAMS: usize = 5000;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error. Below it the comparison is
/// effectively absolute, so entries whose true gradient is ~0 don't blow up
/// on rounding noise of order `eps·|L|/h`.
pub const REL_FLOOR: f64 = 1e-5;
const WORST_KEPT: usize = 10;

/// Loss at one parameter point plus a fingerprint of the branches taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub kinks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checked: usize,
    /// Entries skipped because a ±h probe crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Vec<ParamError>,
    pub passed: bool,
}

impl GradcheckReport {
    /// Names of tensors with at least one entry over tolerance.
    pub fn failing_tensors(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for e in self.worst.iter().filter(|e| !(e.rel_error < self.tolerance)) {
            if !names.contains(&e.tensor.as_str()) {
                names.push(&e.tensor);
            }
        }
        names
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `probe` for every
/// parameter entry in `store`.
pub fn gradcheck<F>(store: &ParamStore, analytic: &Grads, tolerance: f64, mut probe: F) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore) -> Result<Probe>,
{
    let total = store.num_values();
    if total > MAX_PARAMS {
        return Err(Error::Unsupported(format!(
            "gradcheck needs at most {MAX_PARAMS} parameters, model has {total}"
        )));
    }
    if analytic.len() != store.len() {
        return Err(Error::ShapeMismatch("gradient layout differs from parameters".into()));
    }
    let base = probe(store)?;
    let mut work = store.clone();
    let mut errors = Vec::new();
    let mut skipped = 0;
    for ti in 0..store.len() {
        let name = &store.tensors[ti].name;
        for j in 0..store.tensors[ti].numel() {
            let orig = store.tensors[ti].values[j];
            work.tensors[ti].values[j] = orig + STEP;
            let up = probe(&work)?;
            work.tensors[ti].values[j] = orig - STEP;
            let down = probe(&work)?;
            work.tensors[ti].values[j] = orig;
            if up.kinks != base.kinks || down.kinks != base.kinks {
                skipped += 1;
                continue;
            }
            let numeric = (up.loss - down.loss) / (2.0 * STEP);
            let a = analytic.by_index(ti)[j];
            errors.push(ParamError {
                tensor: name.clone(),
                index: j,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let checked = errors.len();
    // NaN sorts as worst
    errors.sort_by(|a, b| b.rel_error.partial_cmp(&a.rel_error).unwrap_or(std::cmp::Ordering::Less));
    let max_rel_error = errors.first().map_or(0.0, |e| e.rel_error);
    let passed = errors.iter().all(|e| e.rel_error < tolerance);
    errors.truncate(WORST_KEPT);
    Ok(GradcheckReport { tolerance, checked, skipped, max_rel_error, worst: errors, passed })
}
