/// Mean and standard error (sample standard deviation over sqrt(n)).
/// A single value has zero standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Last finite entry and finite maximum of a metric column.
pub fn final_and_best(column: &[f64]) -> Option<(f64, f64)> {
    let last = column.iter().rev().copied().find(|v| v.is_finite())?;
    let best = column.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    Some((last, best))
}
