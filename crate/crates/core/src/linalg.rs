//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative diagonal jitter used when a kernel-derived matrix must be factorized.
pub const KERNEL_JITTER: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Ratio of extreme singular values; `inf` for a singular matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    if m.iter().any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factorization that retries with growing diagonal jitter
/// (relative to the mean diagonal) before giving up.
pub fn cholesky_jittered(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = (m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut jitter = KERNEL_JITTER * scale;
    for _ in 0..8 {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        jitter *= 100.0;
    }
    Err(Error::NumericalConditioning {
        context: context.to_string(),
        cond: condition_number(m),
    })
}

/// Cholesky of a PSD kernel matrix with the fixed relative jitter always added.
pub fn cholesky_kernel(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let scale = m.diagonal().iter().fold(0.0_f64, |a, d| a.max(d.abs())).max(1.0e-300);
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] += KERNEL_JITTER * scale;
    }
    cholesky_jittered(&shifted, context)
}

pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log-density of `x ~ N(mean, cov)`.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky_jittered(cov, "multivariate normal density")?;
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).ok_or_else(|| Error::NumericalConditioning {
        context: "multivariate normal density".into(),
        cond: condition_number(cov),
    })?;
    Ok(-0.5 * (x.len() as f64 * LN_2PI + chol_log_det(&chol) + z.norm_squared()))
}

/// Symmetric eigen-decomposition with eigenpairs sorted by descending eigenvalue.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Replaces eigenvalues below `floor` by `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose()))
}

/// Least squares fit `y ≈ X b` through the pseudo-inverse; returns coefficients
/// and whether `X` was found rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON * 16.0;
    let rank_deficient = svd.singular_values.iter().any(|&s| s <= tol);
    let coef = svd.solve(y, tol).unwrap_or_else(|_| DVector::zeros(x.ncols()));
    (coef, rank_deficient)
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
