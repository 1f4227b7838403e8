//! Central finite-difference checks for analytic gradients.

use crate::param::{Gradients, ParamId, ParamSet};

/// Worst element-wise disagreement found by [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` for every
/// scalar of the listed parameters.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, floor)`, so
/// entries whose true gradient is below `floor` are compared absolutely.
pub fn check(
    ps: &ParamSet,
    ids: &[ParamId],
    analytic: &Gradients,
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> GradCheckReport {
    let mut work = ps.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &id in ids {
        let (rows, cols) = ps.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let base = ps.get(id)[[r, c]];
                work.get_mut(id)[[r, c]] = base + step;
                let up = loss(&work);
                work.get_mut(id)[[r, c]] = base - step;
                let down = loss(&work);
                work.get_mut(id)[[r, c]] = base;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_relative_error || !rel.is_finite() {
                    report.max_relative_error = rel;
                    report.worst_param = ps.name(id).to_string();
                    report.worst_index = (r, c);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    report
}
