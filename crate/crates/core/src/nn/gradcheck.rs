use super::NnError;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbed evaluations were rejected by the objective.
    pub skipped: usize,
}

/// Error relative to the numeric value, or absolute when that is below 1 in magnitude.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` with `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` on every coordinate.
///
/// `f` returns `None` when a perturbed point leaves the smooth piece the analytic gradient
/// belongs to (a firing boundary, a ReLU kink); such coordinates are skipped.
pub fn finite_diff_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<FdReport, NnError>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    if analytic.len() != point.len() {
        return Err(NnError::Shape(format!(
            "{} analytic entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
        skipped: 0,
    };
    let mut x = point.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            report.skipped += 1;
            continue;
        };
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NnError::Numeric(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if report.worst_coord.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = Some(i);
        }
    }
    Ok(report)
}
