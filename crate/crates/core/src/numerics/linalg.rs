//! Dense Cholesky factorization and SPD solves.

use super::Matrix;
use crate::error::{Error, Result};

/// Relative size of the first diagonal jitter, as a fraction of the mean diagonal.
pub const JITTER_SCALE: f64 = 1e-8;
/// Number of times the jitter is doubled before giving up.
pub const JITTER_DOUBLINGS: usize = 6;

/// Lower-triangular `L` with `L·Lᵀ = K`. Only the lower triangle of `k` is read.
pub fn cholesky_factor(k: &Matrix) -> Result<Matrix> {
    let n = square_dim(k)?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = k.get(j, j);
        for p in 0..j {
            diag -= l.get(j, p) * l.get(j, p);
        }
        if !(diag > 0.0) {
            return Err(Error::Singular { pivot: j });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = k.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Factor `k`, adding diagonal jitter only if the plain factorization fails.
///
/// Jitter starts at `JITTER_SCALE · mean(diag)` and doubles up to
/// `JITTER_DOUBLINGS` times. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(k: &Matrix) -> Result<(Matrix, f64)> {
    let n = square_dim(k)?;
    let mut last = match cholesky_factor(k) {
        Ok(l) => return Ok((l, 0.0)),
        Err(e) => e,
    };
    let mean_diag = (0..n).map(|i| k.get(i, i)).sum::<f64>() / n.max(1) as f64;
    let mut jitter = JITTER_SCALE * mean_diag.abs().max(f64::MIN_POSITIVE);
    for _ in 0..=JITTER_DOUBLINGS {
        let mut shifted = k.clone();
        for i in 0..n {
            shifted.set(i, i, k.get(i, i) + jitter);
        }
        match cholesky_factor(&shifted) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = e,
        }
        jitter *= 2.0;
    }
    Err(last)
}

/// Solve `L·X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    for i in 0..n {
        for c in 0..m {
            let mut s = x.get(i, c);
            for p in 0..i {
                s -= l.get(i, p) * x.get(p, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solve `Lᵀ·X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for c in 0..m {
            let mut s = x.get(i, c);
            for p in i + 1..n {
                s -= l.get(p, i) * x.get(p, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solve `K·X = B` given the Cholesky factor of `K`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Solve `K·X = B` for symmetric positive-definite `K` (jitter policy applied).
pub fn solve_spd(k: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = square_dim(k)?;
    if b.rows() != n {
        return Err(Error::Shape(format!(
            "solve_spd: matrix is {n}x{n} but right-hand side has {} rows",
            b.rows()
        )));
    }
    let (l, _) = cholesky_with_jitter(k)?;
    Ok(cholesky_solve(&l, b))
}

/// Adjoint of `K` given the factor `L` and the adjoint of `L`.
///
/// Returns the symmetric `K̄ = ½ L⁻ᵀ (Φ(LᵀL̄) + Φ(LᵀL̄)ᵀ) L⁻¹`, where `Φ` keeps the
/// lower triangle and halves the diagonal.
pub fn cholesky_backward(l: &Matrix, l_bar: &Matrix) -> Matrix {
    let n = l.rows();
    let mut phi = l.transpose_matmul(l_bar);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                phi.set(i, j, 0.0);
            } else if i == j {
                phi.set(i, j, 0.5 * phi.get(i, j));
            }
        }
    }
    // L⁻ᵀ Φ L⁻¹ = L⁻ᵀ (L⁻ᵀ Φᵀ)ᵀ
    let left = solve_lower_transpose(l, &phi.transpose());
    let grad = solve_lower_transpose(l, &left.transpose());
    let mut sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym.set(i, j, 0.5 * (grad.get(i, j) + grad.get(j, i)));
        }
    }
    sym
}

fn square_dim(k: &Matrix) -> Result<usize> {
    if k.rows() != k.cols() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    Ok(k.rows())
}
