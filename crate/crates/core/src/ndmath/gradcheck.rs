use serde::Serialize;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
///
/// Coordinates whose true gradient is tiny are compared on an absolute scale
/// instead, where central-difference roundoff would otherwise dominate.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences `(f(x+h) − f(x−h)) / 2h`
/// on every coordinate of `params`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance,
        passed: analytic.len() == params.len(),
    };
    if !report.passed {
        report.max_rel_error = f64::INFINITY;
        return report;
    }
    let mut x = params.to_vec();
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss_fn(&x);
        x[i] = orig - h;
        let minus = loss_fn(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        // NaN compares false, so route it explicitly.
        if err.is_nan() || err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> f64 {
        x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
    }

    #[test]
    fn quadratic_passes_tightly() {
        let x = [0.3, -1.1, 2.5, 0.7];
        let g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let r = finite_diff_check(quadratic, &x, &g, 1e-5, 1e-8);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = [0.3, -1.1, 2.5, 0.7];
        let g: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| 1.1 * 2.0 * (i as f64 + 1.0) * v)
            .collect();
        let r = finite_diff_check(quadratic, &x, &g, 1e-5, 1e-4);
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.1 / 1.1).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_fails() {
        let r = finite_diff_check(quadratic, &[1.0, 2.0], &[1.0], 1e-5, 1e-4);
        assert!(!r.passed);
    }
}
