/// Central-difference gradient `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + step;
            let plus = f(&theta);
            theta[i] = orig - step;
            let minus = f(&theta);
            theta[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, or zero when both are within `floor` of each other.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= floor {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}
