//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use metacal::data::TaskDataset;
use metacal::model::{encode, prior_mean, SharedParams};

/// Inverse of a small dense matrix by Gauss–Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// GP posterior `(mean, variance)` by explicit inversion of the Gram matrix.
pub fn brute_force_posterior(
    params: &SharedParams,
    support: &TaskDataset,
    x: &[f64],
) -> (f64, f64) {
    let n = support.len();
    let beta = params.beta();
    let z: Vec<Vec<f64>> = (0..n)
        .map(|i| encode(params, support.features().row(i)).unwrap())
        .collect();
    let zq = encode(params, x).unwrap();
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        (-0.5 * d2).exp()
    };
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| k(&z[i], &z[j]) + if i == j { beta } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = gauss_jordan_inverse(&gram);
    let kq: Vec<f64> = z.iter().map(|zi| k(&zq, zi)).collect();
    let resid: Vec<f64> = (0..n)
        .map(|i| support.targets()[i] - prior_mean(params, support.features().row(i)).unwrap())
        .collect();
    let mut mean = prior_mean(params, x).unwrap();
    let mut explained = 0.0;
    for i in 0..n {
        for j in 0..n {
            mean += kq[i] * inv[i][j] * resid[j];
            explained += kq[i] * inv[i][j] * kq[j];
        }
    }
    (mean, 1.0 + beta - explained)
}

/// Standard normal CDF by composite Simpson quadrature of the density.
pub fn normal_cdf_quadrature(z: f64) -> f64 {
    if z.abs() > 40.0 {
        return if z > 0.0 { 1.0 } else { 0.0 };
    }
    let steps = 20_000;
    let h = z.abs() / steps as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(z.abs());
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(i as f64 * h);
    }
    let half = s * h / 3.0;
    if z >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

/// Standard normal quantile by bisection on the quadrature CDF.
pub fn normal_quantile_quadrature(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf_quadrature(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Calibration loss with each value's grid point found by counting, no sort.
pub fn calibration_loss_by_rank(values: &[f64]) -> f64 {
    let n = values.len();
    let mut total = 0.0;
    for (i, &v) in values.iter().enumerate() {
        // Rank with ties broken by position, matching any stable sort.
        let rank = values
            .iter()
            .enumerate()
            .filter(|&(j, &w)| w < v || (w == v && j < i))
            .count()
            + 1;
        total += (v - rank as f64 / n as f64).abs();
    }
    total / n as f64
}

/// ECE by comparing each CDF value directly with the levels.
pub fn ece_direct(cdf_values: &[f64]) -> f64 {
    let levels = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let n = cdf_values.len() as f64;
    levels
        .iter()
        .map(|&p| (p - cdf_values.iter().filter(|&&h| h <= p).count() as f64 / n).abs())
        .sum::<f64>()
        / levels.len() as f64
}
