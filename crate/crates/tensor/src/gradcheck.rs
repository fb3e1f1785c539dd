//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the loss forward; it shares no code with
//! the backward sweep it validates.

use crate::params::{ParamId, ParamStore};

/// Default perturbation for float64 central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps entries whose true gradient is ~0 from being judged on
/// pure round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic(id)` against central differences of `loss` for every
/// scalar of every trainable parameter in `ids`.
///
/// `loss` must be a pure function of the store (fixed noise, fixed samples).
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: impl Fn(ParamId) -> Vec<f64>,
    mut loss: impl FnMut(&ParamStore) -> f64,
    step: f64,
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let grad = analytic(id);
        let n = store.get(id).numel();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + step;
            let up = loss(store);
            store.get_mut(id).data_mut()[j] = orig - step;
            let down = loss(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = relative_error(grad[j], numeric, floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradMismatch {
                    param: store.name(id).to_string(),
                    index: j,
                    analytic: grad[j],
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
