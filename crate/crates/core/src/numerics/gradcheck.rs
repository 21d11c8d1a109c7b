//! Central finite-difference gradient verification.

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Coordinate (flat index into the concatenated parameters) of the worst error.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// `loss` is evaluated at perturbed copies of `params`; `params` itself is
/// left unchanged.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], analytic: &[f64], step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        coordinates: params.len(),
        ..Default::default()
    };
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = loss(&probe);
        probe[i] = params[i] - step;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if i == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}
