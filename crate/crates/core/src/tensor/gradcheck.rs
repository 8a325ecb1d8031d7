/// Result of comparing an analytic gradient with central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub relative_errors: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Entries whose magnitudes are both below this are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Central-difference check of `analytic` against `loss` at `params`.
pub fn gradient_check<F>(params: &[f64], analytic: &[f64], mut loss: F, step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length must match params");
    let mut p = params.to_vec();
    let mut relative_errors = Vec::with_capacity(p.len());
    let mut numeric = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        let n = (up - down) / (2.0 * step);
        numeric.push(n);
        relative_errors.push(relative_error(analytic[i], n));
    }
    let worst_index = relative_errors
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let max_relative_error = worst_index.map_or(0.0, |i| relative_errors[i]);
    GradCheckReport {
        relative_errors,
        numeric,
        max_relative_error,
        worst_index,
    }
}
