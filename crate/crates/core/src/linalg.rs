//! Dense least-squares kernels on top of nalgebra.
//!
//! Every fit goes through a thin QR factorisation of the design matrix; the
//! normal equations are never formed or inverted directly. Rank is judged
//! from the singular values of `R` (which equal those of `X`).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest admissible ratio of singular values before a design is declared
/// rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coef: DVector<f64>,
    /// `(X'X)^{-1}`, computed as `R^{-1} R^{-T}`.
    pub xtx_inv: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

fn sv_ratio(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max <= 0.0 || !max.is_finite() {
        return 0.0;
    }
    sv.min() / max
}

/// Names of the columns that are (numerically) linear combinations of the
/// columns before them.
pub fn collinear_columns(r: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..r.ncols() {
        let mut cand = kept.clone();
        cand.push(j);
        if sv_ratio(&r.select_columns(&cand)) < RANK_TOL {
            bad.push(names.get(j).cloned().unwrap_or_else(|| format!("x{j}")));
        } else {
            kept = cand;
        }
    }
    bad
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{} rows in X, {} in y", n, y.len())));
    }
    if n < p {
        return Err(Error::InsufficientObservations { n, k: p });
    }
    if p == 0 {
        return Ok(LeastSquares {
            coef: DVector::zeros(0),
            xtx_inv: DMatrix::zeros(0, 0),
            residuals: y.clone(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DimensionMismatch("non-finite value in design".into()));
    }
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    if sv_ratio(&r) < RANK_TOL {
        let mut columns = collinear_columns(&r, names);
        if columns.is_empty() {
            columns = names.to_vec();
        }
        return Err(Error::RankDeficient { columns });
    }
    let qty = q.transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient { columns: names.to_vec() })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::RankDeficient { columns: names.to_vec() })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let residuals = y - x * &coef;
    Ok(LeastSquares {
        coef,
        xtx_inv,
        residuals,
    })
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite);
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }
    m.clone().cholesky().ok_or(Error::NotPositiveDefinite)
}

/// Inverse of a symmetric matrix through its eigen-decomposition, with
/// eigenvalues below `floor` raised to `floor`. The flag reports whether any
/// eigenvalue was clipped.
pub fn symmetric_inverse_clipped(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clipped = false;
    let inv_vals = eig.eigenvalues.map(|l| {
        if l < floor {
            clipped = true;
            1.0 / floor
        } else {
            1.0 / l
        }
    });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&inv_vals) * v.transpose(), clipped)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
