//! Small dense linear-algebra helpers shared by the filters and the planner.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number above which innovation matrices are regularized.
pub const REGULARIZATION_CONDITION: f64 = 1e12;
/// Diagonal jitter added to ill-conditioned innovation matrices.
pub const REGULARIZATION_JITTER: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

/// Eigenvalues of a symmetric matrix (symmetrized first), ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| a.total_cmp(b));
    values
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// 2-norm condition number of a symmetric matrix; infinite when singular or indefinite.
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    let values = symmetric_eigenvalues(m);
    let (Some(&lo), Some(&hi)) = (values.first(), values.last()) else {
        return 1.0;
    };
    if lo <= 0.0 {
        return f64::INFINITY;
    }
    hi / lo
}

/// Inverse of a symmetric positive-definite matrix. Matrices whose condition
/// number exceeds [`REGULARIZATION_CONDITION`] get [`REGULARIZATION_JITTER`]
/// added to the diagonal first.
pub fn regularized_spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let sym = symmetrize(m);
    if let Some(chol) = sym.clone().cholesky() {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        // Squared ratio of Cholesky pivots bounds the condition number from below;
        // only ask for the spectrum when it is already large.
        if lo > 0.0 && (hi / lo).powi(2) < 1e-2 * REGULARIZATION_CONDITION {
            return Ok(chol.inverse());
        }
    }
    let condition = symmetric_condition(&sym);
    let sym = if !(condition <= REGULARIZATION_CONDITION) {
        sym + DMatrix::identity(n, n) * REGULARIZATION_JITTER
    } else {
        sym
    };
    sym.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical {
            what: "innovation covariance is not positive definite after regularization".into(),
            step: None,
            condition,
        })
}

/// A factor `L` with `L Lᵀ = m` for a symmetric PSD matrix. Uses Cholesky when
/// possible and a clamped eigen-square-root otherwise.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    if let Some(chol) = sym.clone().cholesky() {
        return chol.l();
    }
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Pivoted Cholesky factor `W` of a symmetric PSD matrix with `Wᵀ W = m`.
///
/// `W` is upper triangular up to a column permutation; rows past the numerical
/// rank are zero.
pub fn pivoted_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::dim("pivoted_cholesky", "square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    let n = m.nrows();
    let mut a = symmetrize(m);
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let tol = (n as f64) * f64::EPSILON * scale.max(f64::MIN_POSITIVE);

    for k in 0..n {
        let (pivot, pivot_value) = (k..n)
            .map(|j| (j, a[(j, j)]))
            .fold((k, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_value <= tol {
            if pivot_value < -1e3 * tol.max(1e-14) {
                return Err(Error::Input("weight matrix is not positive semidefinite".into()));
            }
            break;
        }
        if pivot != k {
            a.swap_rows(k, pivot);
            a.swap_columns(k, pivot);
            r.swap_columns(k, pivot);
            perm.swap(k, pivot);
        }
        let rkk = a[(k, k)].sqrt();
        r[(k, k)] = rkk;
        for i in (k + 1)..n {
            r[(k, i)] = a[(k, i)] / rkk;
        }
        for i in (k + 1)..n {
            for j in (k + 1)..n {
                a[(i, j)] -= r[(k, i)] * r[(k, j)];
            }
        }
    }

    let mut w = DMatrix::<f64>::zeros(n, n);
    for (k, &p) in perm.iter().enumerate() {
        w.set_column(p, &r.column(k));
    }
    Ok(w)
}

/// Moore-Penrose pseudo-inverse via SVD.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    let eps = f64::EPSILON * (m.nrows().max(m.ncols()) as f64) * max_sv;
    svd.pseudo_inverse(eps.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn check_square(context: &'static str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::dim(context, format!("{n}x{n}"), format!("{}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub fn check_shape(context: &'static str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::dim(
            context,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

pub fn check_len(context: &'static str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::dim(context, n, v.len()));
    }
    Ok(())
}
