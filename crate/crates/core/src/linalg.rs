use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Columns that are (numerically) linear combinations of earlier columns.
///
/// Sequential modified Gram-Schmidt; a column is aliased when its residual
/// norm falls below `1e-9` of its original norm (all-zero columns included).
pub fn aliased_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let (n, p) = x.shape();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..p {
        let mut v: DVector<f64> = x.column(j).into_owned();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            out.push(j);
            continue;
        }
        for q in &basis {
            let d = q.dot(&v);
            v.axpy(-d, q, 1.0);
        }
        // second pass for stability
        for q in &basis {
            let d = q.dot(&v);
            v.axpy(-d, q, 1.0);
        }
        let r = v.norm();
        if r <= 1e-9 * norm0 || n <= basis.len() {
            out.push(j);
        } else {
            basis.push(v / r);
        }
    }
    out
}

/// Least-squares solution of `x b = y` via Householder QR plus one step of
/// iterative refinement. `x` must have full column rank.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let p = x.ncols();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let solve = |rhs: &DVector<f64>| -> Result<DVector<f64>> {
        r.solve_upper_triangular(&(q.transpose() * rhs))
            .ok_or_else(|| Error::Singular("least-squares R factor".into()))
    };
    let mut b = solve(y)?;
    let resid = y - x * &b;
    b += solve(&resid)?;
    Ok(b)
}

pub fn cholesky(a: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    a.cholesky().ok_or_else(|| Error::Singular("matrix not positive definite".into()))
}

pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky(a.clone())?.solve(b))
}

/// log det of a symmetric positive-definite matrix.
pub fn logdet_spd(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
