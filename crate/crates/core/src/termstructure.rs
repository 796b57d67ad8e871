//! Bond pricing under the JSZ canonical form, rotation of the latent state
//! to observed principal components, and the cross-sectional likelihood.
//!
//! In latent space the short rate is the sum of the states (`δ_0 = 0`,
//! `δ_1 = 1`), `μ^Q = [k_∞^Q, 0, …, 0]` and `Φ^Q = diag(g^Q)`. Log bond prices
//! `log P_t^n = A_n + B_n' X_t` follow
//!
//! ```text
//! A_{n+1} = A_n + B_n' μ^Q + ½ B_n' Σ Σ' B_n − δ_0
//! B_{n+1} = Φ^Q' B_n − δ_1,          A_1 = −δ_0,  B_1 = −δ_1
//! ```
//!
//! and yields load on the state through `A_{n,X} = −A_n/n`, `B_{n,X} = −B_n/n`.
//! The covariance is parameterized in PC space (`Σ_P = W B_X Σ`), so the
//! latent covariance needed by the `A` recursion is recovered after `B_X`.
//!
//! The pricing routines are generic over the scalar so the same code runs in
//! `f64` and in complex arithmetic (for complex-step derivatives).

use nalgebra::{ComplexField, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};

/// Largest condition number of `W B_X` accepted by the rotation.
pub const MAX_ROTATION_CONDITION: f64 = 1e12;

/// Risk-neutral parameters of one particle, with `Σ_P` in PC space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub k_inf_q: f64,
    pub g_q: DVector<f64>,
    pub sigma_p_chol: DMatrix<f64>,
    pub sigma_e2: f64,
}

impl QParams {
    pub fn n_factors(&self) -> usize {
        self.g_q.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_ordered_eigenvalues(self.g_q.as_slice())?;
        let n = self.n_factors();
        if self.sigma_p_chol.nrows() != n || self.sigma_p_chol.ncols() != n {
            return Err(Error::Domain(format!(
                "Σ_P must be {n}×{n}, got {}×{}",
                self.sigma_p_chol.nrows(),
                self.sigma_p_chol.ncols()
            )));
        }
        for i in 0..n {
            if !(self.sigma_p_chol[(i, i)] > 0.0) {
                return Err(Error::Domain(format!("Σ_P diagonal entry {i} is not positive")));
            }
            for j in (i + 1)..n {
                if self.sigma_p_chol[(i, j)] != 0.0 {
                    return Err(Error::Domain("Σ_P must be lower triangular".into()));
                }
            }
        }
        if !(self.sigma_e2 > 0.0) || !self.sigma_e2.is_finite() {
            return Err(Error::Domain(format!("σ_e² must be positive, got {}", self.sigma_e2)));
        }
        if !self.k_inf_q.is_finite() {
            return Err(Error::Domain("k_∞^Q is not finite".into()));
        }
        Ok(())
    }

    pub fn sigma_p_cov(&self) -> DMatrix<f64> {
        &self.sigma_p_chol * self.sigma_p_chol.transpose()
    }
}

fn check_ordered_eigenvalues(g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(Error::Identification("g^Q is empty".into()));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Identification("g^Q has non-finite entries".into()));
    }
    if g.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Identification(format!(
            "eigenvalues of Φ^Q must be strictly decreasing, got {g:?}"
        )));
    }
    Ok(())
}

fn check_maturities(maturities: &[usize]) -> Result<()> {
    if maturities.is_empty() {
        return Err(Error::Domain("no maturities given".into()));
    }
    if maturities.iter().any(|&m| m == 0) {
        return Err(Error::Domain("maturity 0 is not priced; maturities start at 1 month".into()));
    }
    if maturities.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(format!("maturities must be strictly ascending, got {maturities:?}")));
    }
    Ok(())
}

/// Price loadings `B_n`, `n = 1..=n_max` (index `n-1`).
pub(crate) fn b_recursion<T: ComplexField<RealField = f64> + Copy>(g: &[T], n_max: usize) -> Vec<DVector<T>> {
    let n = g.len();
    let one = T::from_real(1.0);
    let mut out = Vec::with_capacity(n_max);
    out.push(DVector::from_element(n, -one));
    for k in 1..n_max {
        let prev: &DVector<T> = &out[k - 1];
        let next = DVector::from_iterator(n, (0..n).map(|i| g[i] * prev[i] - one));
        out.push(next);
    }
    out
}

/// Price loadings `A_n` given `B_n` and the latent state covariance `ΣΣ'`.
pub(crate) fn a_recursion<T: ComplexField<RealField = f64> + Copy>(
    k_inf: T,
    b: &[DVector<T>],
    latent_cov: &DMatrix<T>,
) -> Vec<T> {
    let half = T::from_real(0.5);
    let mut out = Vec::with_capacity(b.len());
    let mut a = T::zero();
    out.push(a);
    for bn in b.iter().take(b.len().saturating_sub(1)) {
        // μ^Q = [k_∞, 0, …]
        let mut quad = T::zero();
        for i in 0..bn.len() {
            let mut row = T::zero();
            for j in 0..bn.len() {
                row = row + latent_cov[(i, j)] * bn[j];
            }
            quad = quad + bn[i] * row;
        }
        a = a + bn[0] * k_inf + half * quad;
        out.push(a);
    }
    out
}

/// Yield loadings `A_{n,X}`, `B_{n,X}` at the requested maturities, for a
/// latent covariance given directly.
pub fn compute_latent_loadings(
    k_inf_q: f64,
    g_q: &DVector<f64>,
    latent_cov: &DMatrix<f64>,
    maturities: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_ordered_eigenvalues(g_q.as_slice())?;
    check_maturities(maturities)?;
    let n_max = *maturities.last().unwrap();
    let b = b_recursion(g_q.as_slice(), n_max);
    let a = a_recursion(k_inf_q, &b, latent_cov);
    let n = g_q.len();
    let mut a_x = DVector::zeros(maturities.len());
    let mut b_x = DMatrix::zeros(maturities.len(), n);
    for (row, &m) in maturities.iter().enumerate() {
        let scale = -1.0 / m as f64;
        a_x[row] = a[m - 1] * scale;
        for k in 0..n {
            b_x[(row, k)] = b[m - 1][k] * scale;
        }
    }
    Ok((a_x, b_x))
}

/// Yield loadings expressed on the observed PCs, with the rotated
/// risk-neutral dynamics and short-rate coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingLoadings {
    pub a_x: DVector<f64>,
    pub b_x: DMatrix<f64>,
    pub a_p: DVector<f64>,
    pub b_p: DMatrix<f64>,
    pub delta0_p: f64,
    pub delta1_p: DVector<f64>,
    pub mu_p_q: DVector<f64>,
    pub phi_p_q: DMatrix<f64>,
    pub maturities: Vec<usize>,
}

pub(crate) struct Rotation<T: ComplexField<RealField = f64> + Copy> {
    pub inv_wb: DMatrix<T>,
    pub w_a_x: DVector<T>,
    pub mu_p_q: DVector<T>,
    pub phi_p_q: DMatrix<T>,
    pub delta0_p: T,
    pub delta1_p: DVector<T>,
}

fn real_part<T: ComplexField<RealField = f64> + Copy>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|x| x.real())
}

/// Core of the rotation; `a_x` and `b_x` hold the panel-maturity rows.
pub(crate) fn rotation<T: ComplexField<RealField = f64> + Copy>(
    a_x: &DVector<T>,
    b_x: &DMatrix<T>,
    w: &DMatrix<T>,
    k_inf: T,
    g: &[T],
) -> Result<Rotation<T>> {
    let n = g.len();
    let wb = w * b_x;
    let cond = linalg::condition_number(&real_part(&wb));
    if !(cond < MAX_ROTATION_CONDITION) {
        return Err(Error::KnifeEdgeRotation { cond });
    }
    let inv_wb = wb.clone().try_inverse().ok_or(Error::KnifeEdgeRotation { cond })?;
    let w_a_x = w * a_x;
    let phi_q = DMatrix::from_diagonal(&DVector::from_column_slice(g));
    let mut mu_q = DVector::zeros(n);
    mu_q[0] = k_inf;
    let phi_p_q = &wb * phi_q * &inv_wb;
    let eye = DMatrix::<T>::identity(n, n);
    let mu_p_q = &wb * mu_q + (eye - &phi_p_q) * &w_a_x;
    let ones = DVector::from_element(n, T::from_real(1.0));
    // δ_0P = δ_0 − δ_1'(W B_X)^{-1} W A_X with δ_0 = 0, δ_1 = 1
    let inv_w_a = &inv_wb * &w_a_x;
    let delta0_p = -(ones.transpose() * &inv_w_a)[(0, 0)];
    let delta1_p = inv_wb.transpose() * ones;
    Ok(Rotation { inv_wb, w_a_x, mu_p_q, phi_p_q, delta0_p, delta1_p })
}

/// Rotates latent yield loadings to PC loadings:
/// `A_P = A_X − B_X (W B_X)^{-1} W A_X`, `B_P = B_X (W B_X)^{-1}`.
pub fn rotate_loadings(
    a_x: &DVector<f64>,
    b_x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    k_inf_q: f64,
    g_q: &DVector<f64>,
    maturities: &[usize],
) -> Result<PricingLoadings> {
    if w.ncols() != a_x.len() || b_x.nrows() != a_x.len() || w.nrows() != b_x.ncols() {
        return Err(Error::Domain("rotate_loadings: inconsistent shapes".into()));
    }
    let rot = rotation(a_x, b_x, w, k_inf_q, g_q.as_slice())?;
    let b_p = b_x * &rot.inv_wb;
    let a_p = a_x - b_x * (&rot.inv_wb * &rot.w_a_x);
    Ok(PricingLoadings {
        a_x: a_x.clone(),
        b_x: b_x.clone(),
        a_p,
        b_p,
        delta0_p: rot.delta0_p,
        delta1_p: rot.delta1_p,
        mu_p_q: rot.mu_p_q,
        phi_p_q: rot.phi_p_q,
        maturities: maturities.to_vec(),
    })
}

/// Full set of PC-space loadings for maturities `1..=n_max` plus the rotated
/// Q dynamics, generic in the scalar type.
pub(crate) struct Ladder<T: ComplexField<RealField = f64> + Copy> {
    pub a_x: Vec<T>,
    pub b_x: Vec<DVector<T>>,
    pub a_p: Vec<T>,
    pub b_p: Vec<DVector<T>>,
    pub mu_p_q: DVector<T>,
    pub phi_p_q: DMatrix<T>,
    pub delta0_p: T,
    pub delta1_p: DVector<T>,
}

/// JSZ pricing with `Σ_P` in PC space. `w` is `N×J` for the panel maturities.
pub(crate) fn jsz_ladder<T: ComplexField<RealField = f64> + Copy>(
    k_inf: T,
    g: &[T],
    sigma_p_chol: &DMatrix<T>,
    w: &DMatrix<f64>,
    panel_maturities: &[usize],
    n_max: usize,
) -> Result<Ladder<T>> {
    let n = g.len();
    let j = panel_maturities.len();
    let n_max = n_max.max(*panel_maturities.last().unwrap_or(&1));
    let b = b_recursion(g, n_max);
    let mut b_x = DMatrix::<T>::zeros(j, n);
    for (row, &m) in panel_maturities.iter().enumerate() {
        let scale = T::from_real(-1.0 / m as f64);
        for k in 0..n {
            b_x[(row, k)] = b[m - 1][k] * scale;
        }
    }
    let wt: DMatrix<T> = w.map(T::from_real);
    let wb = &wt * &b_x;
    let cond = linalg::condition_number(&real_part(&wb));
    if !(cond < MAX_ROTATION_CONDITION) {
        return Err(Error::KnifeEdgeRotation { cond });
    }
    let inv_wb = wb.try_inverse().ok_or(Error::KnifeEdgeRotation { cond })?;
    // Σ = (W B_X)^{-1} Σ_P
    let latent_chol = &inv_wb * sigma_p_chol;
    let latent_cov = &latent_chol * latent_chol.transpose();
    let a = a_recursion(k_inf, &b, &latent_cov);
    let a_x = DVector::from_iterator(j, panel_maturities.iter().map(|&m| a[m - 1] * T::from_real(-1.0 / m as f64)));
    let rot = rotation(&a_x, &b_x, &wt, k_inf, g)?;
    let shift = &rot.inv_wb * &rot.w_a_x;
    let mut a_p = Vec::with_capacity(n_max);
    let mut b_p = Vec::with_capacity(n_max);
    let mut a_x_all = Vec::with_capacity(n_max);
    let mut b_x_all = Vec::with_capacity(n_max);
    for (m, (bm, am)) in b.into_iter().zip(a).enumerate() {
        let scale = T::from_real(-1.0 / (m + 1) as f64);
        let bx = bm * scale;
        let ax = am * scale;
        let mut dot = T::zero();
        for k in 0..n {
            dot = dot + bx[k] * shift[k];
        }
        a_p.push(ax - dot);
        b_p.push(rot.inv_wb.tr_mul(&bx));
        a_x_all.push(ax);
        b_x_all.push(bx);
    }
    Ok(Ladder {
        a_x: a_x_all,
        b_x: b_x_all,
        a_p,
        b_p,
        mu_p_q: rot.mu_p_q,
        phi_p_q: rot.phi_p_q,
        delta0_p: rot.delta0_p,
        delta1_p: rot.delta1_p,
    })
}

/// Priced term structure of one parameter draw: PC loadings at any maturity
/// up to `n_max` and the panel loadings used by the likelihood.
#[derive(Debug, Clone)]
pub struct AffineTermStructure {
    a_p: Vec<f64>,
    b_p: Vec<DVector<f64>>,
    pub loadings: PricingLoadings,
}

impl AffineTermStructure {
    pub fn new(qp: &QParams, w: &DMatrix<f64>, maturities: &[usize], n_max: usize) -> Result<Self> {
        qp.validate()?;
        check_maturities(maturities)?;
        if w.nrows() != qp.n_factors() || w.ncols() != maturities.len() {
            return Err(Error::Domain(format!(
                "W must be {}×{}, got {}×{}",
                qp.n_factors(),
                maturities.len(),
                w.nrows(),
                w.ncols()
            )));
        }
        let ladder = jsz_ladder(qp.k_inf_q, qp.g_q.as_slice(), &qp.sigma_p_chol, w, maturities, n_max)?;
        let n = qp.n_factors();
        let j = maturities.len();
        let a_x = DVector::from_iterator(j, maturities.iter().map(|&m| ladder.a_x[m - 1]));
        let mut b_x = DMatrix::zeros(j, n);
        for (row, &m) in maturities.iter().enumerate() {
            b_x.set_row(row, &ladder.b_x[m - 1].transpose());
        }
        let a_p = DVector::from_iterator(j, maturities.iter().map(|&m| ladder.a_p[m - 1]));
        let mut b_p = DMatrix::zeros(j, n);
        for (row, &m) in maturities.iter().enumerate() {
            b_p.set_row(row, &ladder.b_p[m - 1].transpose());
        }
        let loadings = PricingLoadings {
            a_x,
            b_x,
            a_p,
            b_p,
            delta0_p: ladder.delta0_p,
            delta1_p: ladder.delta1_p.clone(),
            mu_p_q: ladder.mu_p_q.clone(),
            phi_p_q: ladder.phi_p_q.clone(),
            maturities: maturities.to_vec(),
        };
        Ok(Self { a_p: ladder.a_p, b_p: ladder.b_p, loadings })
    }

    pub fn max_maturity(&self) -> usize {
        self.a_p.len()
    }

    /// `(A_{n,P}, B_{n,P})` for a maturity in `1..=max_maturity()`.
    pub fn loadings_at(&self, n: usize) -> Result<(f64, &DVector<f64>)> {
        if n == 0 || n > self.a_p.len() {
            return Err(Error::Domain(format!(
                "maturity {n} outside the priced range 1..={}",
                self.a_p.len()
            )));
        }
        Ok((self.a_p[n - 1], &self.b_p[n - 1]))
    }

    pub fn yield_at(&self, n: usize, pcs: &DVector<f64>) -> Result<f64> {
        let (a, b) = self.loadings_at(n)?;
        Ok(a + b.dot(pcs))
    }
}

/// Observed principal components with the loading matrix that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcPanel {
    /// `(T+1)×N`, row `t` is `P_t = W y_t`.
    pub p: DMatrix<f64>,
    /// `N×J` loadings.
    pub w: DMatrix<f64>,
    /// `(J−N)×J` orthonormal basis of the null space of `W`.
    pub w_perp: DMatrix<f64>,
}

impl PcPanel {
    pub fn n_obs(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.w.nrows()
    }

    pub fn pcs_at(&self, t: usize) -> DVector<f64> {
        self.p.row(t).transpose()
    }

    /// Rotates a yield panel with externally supplied loadings (frozen `W`).
    pub fn with_loadings(yields: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Self> {
        if yields.ncols() != w.ncols() {
            return Err(Error::Data(format!(
                "yield panel has {} maturities but W has {} columns",
                yields.ncols(),
                w.ncols()
            )));
        }
        let p = yields * w.transpose();
        let w_perp = null_space_basis(w)?;
        Ok(Self { p, w: w.clone(), w_perp })
    }
}

/// Orthonormal rows spanning the null space of `w` (`N×J`, full row rank).
pub fn null_space_basis(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, j) = (w.nrows(), w.ncols());
    let gram = w * w.transpose();
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::DegeneratePanel("W does not have full row rank".into()))?;
    let proj = DMatrix::<f64>::identity(j, j) - w.transpose() * gram_inv * w;
    let (_vals, vecs) = linalg::sorted_symmetric_eigen(&proj);
    let mut basis = DMatrix::zeros(j - n, j);
    for k in 0..(j - n) {
        let mut row = vecs.column(k).transpose();
        fix_sign(&mut row);
        basis.set_row(k, &row);
    }
    Ok(basis)
}

pub(crate) fn fix_sign(row: &mut nalgebra::RowDVector<f64>) {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.abs() > row[best].abs() {
            best = i;
        }
    }
    if row[best] < 0.0 {
        row.neg_mut();
    }
}

/// First `n_factors` principal components of a `(T+1)×J` yield panel.
///
/// `W` holds the leading eigenvectors of the sample covariance as rows, each
/// signed so its largest-magnitude entry is positive. PCs are `P_t = W y_t`
/// (levels, not demeaned).
pub fn extract_pcs(yields: &DMatrix<f64>, n_factors: usize) -> Result<PcPanel> {
    let (rows, j) = (yields.nrows(), yields.ncols());
    if rows <= j {
        return Err(Error::DegeneratePanel(format!(
            "need more observations than maturities (T+1={rows}, J={j})"
        )));
    }
    if n_factors == 0 || n_factors >= j {
        return Err(Error::DegeneratePanel(format!("cannot extract {n_factors} PCs from {j} maturities")));
    }
    if yields.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("yield panel contains non-finite values".into()));
    }
    let mean = yields.row_mean();
    let mut centered = yields.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let cov = centered.transpose() * &centered / (rows as f64 - 1.0);
    let (vals, vecs) = linalg::sorted_symmetric_eigen(&cov);
    let level = yields.iter().fold(0.0_f64, |a, v| a.max(v * v));
    // variation below ~1e-12 relative to the yield level is rounding noise
    if !(vals[0] > 1e-24 * level) {
        return Err(Error::DegeneratePanel("yield covariance is zero (no variation in the panel)".into()));
    }
    let mut w = DMatrix::zeros(n_factors, j);
    let mut w_perp = DMatrix::zeros(j - n_factors, j);
    for k in 0..j {
        let mut row = vecs.column(k).transpose();
        fix_sign(&mut row);
        if k < n_factors {
            w.set_row(k, &row);
        } else {
            w_perp.set_row(k - n_factors, &row);
        }
    }
    let p = yields * w.transpose();
    Ok(PcPanel { p, w, w_perp })
}

/// Measurement errors `W_⊥ e_t` with `e_t = y_t − A_P − B_P P_t`, one row per date.
pub fn projected_errors(
    pcs: &DMatrix<f64>,
    yields: &DMatrix<f64>,
    a_p: &DVector<f64>,
    b_p: &DMatrix<f64>,
    w_perp: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut fitted = pcs * b_p.transpose();
    for mut r in fitted.row_iter_mut() {
        r += a_p.transpose();
    }
    (yields - fitted) * w_perp.transpose()
}

/// Cross-sectional log-likelihood `Σ_t log N(W_⊥ e_t; 0, σ_e² I_{J−N})`.
pub fn q_loglik(panel: &PcPanel, yields: &DMatrix<f64>, loadings: &PricingLoadings, sigma_e2: f64) -> Result<f64> {
    if !(sigma_e2 > 0.0) {
        return Err(Error::Domain("σ_e² must be positive".into()));
    }
    if yields.nrows() != panel.n_obs() || yields.ncols() != loadings.a_p.len() {
        return Err(Error::Domain("q_loglik: yields and panel shapes disagree".into()));
    }
    let u = projected_errors(&panel.p, yields, &loadings.a_p, &loadings.b_p, &panel.w_perp);
    Ok(q_loglik_from_errors(&u, sigma_e2).iter().sum())
}

/// Per-date cross-sectional log-likelihood terms.
pub fn q_loglik_from_errors(u: &DMatrix<f64>, sigma_e2: f64) -> Vec<f64> {
    let dim = u.ncols() as f64;
    let norm = -0.5 * dim * (LN_2PI + sigma_e2.ln());
    u.row_iter().map(|r| norm - 0.5 * r.norm_squared() / sigma_e2).collect()
}
