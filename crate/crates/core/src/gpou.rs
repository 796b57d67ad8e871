//! P-dynamics of the PCs with a Gaussian-process mean shift:
//!
//! ```text
//! P_t = μ_P^P + Φ_P^P P_{t−1} + v(M_{t−1}) + Σ_P ε_t
//! ```
//!
//! Stacking the residuals `s_t = P_t − μ_P^P − Φ_P^P P_{t−1}` equation by
//! equation gives `S ~ N(0, K_P)` with `K_P = K + Σ_PΣ_P' ⊗ I_T` once the
//! function values `V` are integrated out.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpkernel::{sq_dist, GpCov, N_BLOCKS};
use crate::linalg::{self, LN_2PI};
use crate::termstructure::{PricingLoadings, QParams};

/// Physical-measure VAR coefficients of the PCs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PDynParams {
    pub mu: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub lambda0: DVector<f64>,
    pub lambda1: DMatrix<f64>,
    pub sigma_p_chol: DMatrix<f64>,
}

impl PDynParams {
    pub fn omega(&self) -> DMatrix<f64> {
        &self.sigma_p_chol * self.sigma_p_chol.transpose()
    }

    /// The free risk price `λ_{1,2}` read back from the dynamics.
    pub fn lambda12(&self) -> f64 {
        self.lambda1[(0, 1)]
    }
}

/// `μ_P^P = μ_P^Q + λ_0P`, `Φ_P^P = Φ_P^Q + λ_1P` for general risk prices.
pub fn build_p_dynamics_general(
    qp: &QParams,
    loadings: &PricingLoadings,
    lambda0: &DVector<f64>,
    lambda1: &DMatrix<f64>,
) -> PDynParams {
    PDynParams {
        mu: &loadings.mu_p_q + lambda0,
        phi: &loadings.phi_p_q + lambda1,
        lambda0: lambda0.clone(),
        lambda1: lambda1.clone(),
        sigma_p_chol: qp.sigma_p_chol.clone(),
    }
}

/// Restricted risk prices: only `λ_{1,2}` is free and `λ_0P = 0`.
pub fn build_p_dynamics(qp: &QParams, loadings: &PricingLoadings, lambda12: f64) -> PDynParams {
    let n = qp.n_factors();
    let mut lambda1 = DMatrix::zeros(n, n);
    lambda1[(0, 1)] = lambda12;
    build_p_dynamics_general(qp, loadings, &DVector::zeros(n), &lambda1)
}

/// VAR residuals stacked equation-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedResiduals {
    /// Length `3T`; `s[j*T + t]` is equation `j` at time `t+1`.
    pub s: DVector<f64>,
    /// `T×3`, row `t` is `s_{t+1}'`.
    pub by_time: DMatrix<f64>,
}

impl StackedResiduals {
    pub fn from_by_time(by_time: DMatrix<f64>) -> Self {
        let (t, n) = by_time.shape();
        let s = DVector::from_iterator(t * n, (0..n).flat_map(|j| (0..t).map(move |i| (j, i))).map(|(j, i)| by_time[(i, j)]));
        Self { s, by_time }
    }

    pub fn t_len(&self) -> usize {
        self.by_time.nrows()
    }

    /// Residuals reordered time-major (`s_1', s_2', …`).
    pub fn time_major(&self) -> DVector<f64> {
        DVector::from_iterator(self.by_time.len(), self.by_time.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))
    }
}

/// `s_t = P_t − μ − Φ P_{t−1}` for `t = 1..=T`, with `p` holding `P_0..P_T` as rows.
pub fn residuals(p: &DMatrix<f64>, pd: &PDynParams) -> Result<StackedResiduals> {
    residuals_with_offset(p, pd, None)
}

/// As [`residuals`] with an extra per-time intercept (row `t` shifts `s_{t+1}`).
pub fn residuals_with_offset(p: &DMatrix<f64>, pd: &PDynParams, offset: Option<&DMatrix<f64>>) -> Result<StackedResiduals> {
    if p.nrows() < 2 {
        return Err(Error::Domain("need at least two PC observations for residuals".into()));
    }
    let t = p.nrows() - 1;
    let n = p.ncols();
    let mut by_time = DMatrix::zeros(t, n);
    for i in 0..t {
        let prev = p.row(i).transpose();
        let mut s = p.row(i + 1).transpose() - &pd.mu - &pd.phi * prev;
        if let Some(off) = offset {
            s -= off.row(i).transpose();
        }
        by_time.set_row(i, &s.transpose());
    }
    Ok(StackedResiduals::from_by_time(by_time))
}

/// `K_P = K + Σ_PΣ_P' ⊗ I_T` in equation-major order.
pub fn k_p_matrix(k: &GpCov, omega: &DMatrix<f64>) -> DMatrix<f64> {
    let t = k.t_len();
    let mut kp = k.dense();
    for a in 0..N_BLOCKS {
        for b in 0..N_BLOCKS {
            for i in 0..t {
                kp[(a * t + i, b * t + i)] += omega[(a, b)];
            }
        }
    }
    kp
}

fn chol_omega(sigma_p_chol: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let omega = sigma_p_chol * sigma_p_chol.transpose();
    linalg::cholesky_jittered(&omega, "Σ_PΣ_P'")
}

fn factor_k_p(k: &GpCov, sigma_p_chol: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
    let kp = k_p_matrix(k, &(sigma_p_chol * sigma_p_chol.transpose()));
    let chol = linalg::cholesky_jittered(&kp, "K_P = K + Σ_PΣ_P' ⊗ I")?;
    Ok((kp, chol))
}

fn check_shapes(s: &StackedResiduals, k: &GpCov) -> Result<()> {
    if s.t_len() != k.t_len() || s.by_time.ncols() != N_BLOCKS {
        return Err(Error::Domain(format!(
            "residuals cover {} periods but the kernel covers {}",
            s.t_len(),
            k.t_len()
        )));
    }
    Ok(())
}

/// Marginal log-density of the stacked residuals, `log N(S; 0, K_P)`.
pub fn p_loglik(s: &StackedResiduals, k: &GpCov, sigma_p_chol: &DMatrix<f64>) -> Result<f64> {
    check_shapes(s, k)?;
    if k.is_zero() {
        return var_loglik(&s.by_time, sigma_p_chol);
    }
    let (_, chol) = factor_k_p(k, sigma_p_chol)?;
    let z = chol.l().solve_lower_triangular(&s.s).ok_or_else(|| Error::NumericalConditioning {
        context: "K_P triangular solve".into(),
        cond: f64::INFINITY,
    })?;
    Ok(-0.5 * (s.s.len() as f64 * LN_2PI + linalg::chol_log_det(&chol) + z.norm_squared()))
}

/// `Σ_t log N(s_t; 0, Σ_PΣ_P')` for residuals given by time.
pub fn var_loglik(by_time: &DMatrix<f64>, sigma_p_chol: &DMatrix<f64>) -> Result<f64> {
    Ok(var_loglik_terms(by_time, sigma_p_chol)?.iter().sum())
}

/// Per-period iid Gaussian log-densities.
pub fn var_loglik_terms(by_time: &DMatrix<f64>, sigma_p_chol: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = by_time.ncols() as f64;
    let chol = chol_omega(sigma_p_chol)?;
    let norm = -0.5 * (n * LN_2PI + linalg::chol_log_det(&chol));
    let l = chol.l();
    by_time
        .row_iter()
        .map(|r| {
            let z = l.solve_lower_triangular(&r.transpose()).ok_or_else(|| Error::NumericalConditioning {
                context: "Σ_P triangular solve".into(),
                cond: f64::INFINITY,
            })?;
            Ok(norm - 0.5 * z.norm_squared())
        })
        .collect()
}

/// Log-likelihood of every prefix `s_1..s_t`, `t = 0..=T` (entry 0 is zero).
///
/// Ordering `S` time-major makes each prefix covariance a leading block of the
/// full `K_P`, so one Cholesky factor serves all prefixes.
pub fn p_prefix_logliks(s: &StackedResiduals, k: &GpCov, sigma_p_chol: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_shapes(s, k)?;
    let t = s.t_len();
    let mut out = Vec::with_capacity(t + 1);
    out.push(0.0);
    if k.is_zero() {
        let mut acc = 0.0;
        for v in var_loglik_terms(&s.by_time, sigma_p_chol)? {
            acc += v;
            out.push(acc);
        }
        return Ok(out);
    }
    let omega = sigma_p_chol * sigma_p_chol.transpose();
    let n = N_BLOCKS;
    let mut kp = DMatrix::zeros(n * t, n * t);
    for a in 0..t {
        for b in 0..t {
            for j in 0..n {
                kp[(a * n + j, b * n + j)] = k.blocks[j][(a, b)];
            }
        }
        for i in 0..n {
            for j in 0..n {
                kp[(a * n + i, a * n + j)] += omega[(i, j)];
            }
        }
    }
    let chol = linalg::cholesky_jittered(&kp, "time-major K_P")?;
    let l = chol.l_dirty();
    let z = l.solve_lower_triangular(&s.time_major()).ok_or_else(|| Error::NumericalConditioning {
        context: "time-major K_P triangular solve".into(),
        cond: f64::INFINITY,
    })?;
    let (mut logdet, mut quad) = (0.0, 0.0);
    for step in 0..t {
        for i in step * n..(step + 1) * n {
            logdet += l[(i, i)].ln();
            quad += z[i] * z[i];
        }
        out.push(-0.5 * ((step + 1) as f64 * n as f64 * LN_2PI + quad) - logdet);
    }
    Ok(out)
}

/// Log-likelihood with its derivatives with respect to the residuals (through
/// `α = K_P^{-1}S`), the innovation covariance and the log length-scales.
#[derive(Debug, Clone)]
pub struct PLikGrad {
    pub loglik: f64,
    /// `T×3`; `∂ℓ/∂s_t = −α_t`.
    pub alpha: DMatrix<f64>,
    /// `∂ℓ/∂Ω` treating the entries of `Ω = Σ_PΣ_P'` as free (symmetric).
    pub d_omega: DMatrix<f64>,
    /// `∂ℓ/∂log ℓ_j`; zero for inactive blocks.
    pub d_log_ell: [f64; N_BLOCKS],
}

impl PLikGrad {
    /// Chain rule to the lower Cholesky factor of `Ω`.
    pub fn d_chol(&self, sigma_p_chol: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.d_omega * 2.0 * sigma_p_chol).lower_triangle()
    }
}

pub fn p_loglik_grad(s: &StackedResiduals, k: &GpCov, sigma_p_chol: &DMatrix<f64>) -> Result<PLikGrad> {
    check_shapes(s, k)?;
    let t = s.t_len();
    let n = N_BLOCKS;
    if k.is_zero() {
        let chol = chol_omega(sigma_p_chol)?;
        let inv = chol.inverse();
        let alpha = &s.by_time * &inv;
        let d_omega = (alpha.transpose() * &alpha - &inv * t as f64) * 0.5;
        let loglik = var_loglik(&s.by_time, sigma_p_chol)?;
        return Ok(PLikGrad { loglik, alpha, d_omega, d_log_ell: [0.0; N_BLOCKS] });
    }
    let (_, chol) = factor_k_p(k, sigma_p_chol)?;
    let a = chol.solve(&s.s);
    let loglik = -0.5 * (s.s.len() as f64 * LN_2PI + linalg::chol_log_det(&chol) + s.s.dot(&a));
    let inv = chol.inverse();
    let g = (&a * a.transpose() - inv) * 0.5;
    let mut d_omega = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d_omega[(i, j)] = (0..t).map(|r| g[(i * t + r, j * t + r)]).sum();
        }
    }
    let mut d_log_ell = [0.0; N_BLOCKS];
    let d2 = sq_dist(&k.inputs);
    for (j, d) in d_log_ell.iter_mut().enumerate() {
        if !k.hypers.is_on(j) {
            continue;
        }
        let inv_l2 = 1.0 / k.hypers.ell[j].powi(2);
        let mut acc = 0.0;
        for r in 0..t {
            for c in 0..t {
                acc += g[(j * t + r, j * t + c)] * k.blocks[j][(r, c)] * d2[(r, c)] * inv_l2;
            }
        }
        *d = acc;
    }
    let alpha = DMatrix::from_fn(t, n, |r, j| a[j * t + r]);
    Ok(PLikGrad { loglik, alpha, d_omega, d_log_ell })
}

/// Posterior of the function values, `V | S ~ N(K K_P^{-1} S, K − K K_P^{-1} K)`.
pub fn posterior_v(s: &StackedResiduals, k: &GpCov, sigma_p_chol: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_shapes(s, k)?;
    let m = s.s.len();
    if k.is_zero() {
        return Ok((DVector::zeros(m), DMatrix::zeros(m, m)));
    }
    let kd = k.dense();
    let (_, chol) = factor_k_p(k, sigma_p_chol)?;
    let mean = &kd * chol.solve(&s.s);
    let cov = linalg::symmetrize(&(&kd - &kd * chol.solve(&kd)));
    Ok((mean, cov))
}

/// One-step predictive Gaussian of `P_{T+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcPredictive {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// GP part of the mean, `k' K_P^{-1} S`.
    pub correction: DVector<f64>,
}

/// `P_{T+1} | P_T, S ~ N(μ + Φ P_T + k'K_P^{-1}S, k0 + Σ_PΣ_P' − k'K_P^{-1}k)`.
pub fn predictive_pc(
    p_t: &DVector<f64>,
    s: &StackedResiduals,
    k: &GpCov,
    k0: &DMatrix<f64>,
    k_next: &DMatrix<f64>,
    pd: &PDynParams,
) -> Result<PcPredictive> {
    check_shapes(s, k)?;
    let omega = pd.omega();
    let base = &pd.mu + &pd.phi * p_t;
    if k.is_zero() {
        return Ok(PcPredictive { mean: base, cov: omega, correction: DVector::zeros(N_BLOCKS) });
    }
    let (_, chol) = factor_k_p(k, &pd.sigma_p_chol)?;
    let correction = k_next.transpose() * chol.solve(&s.s);
    let cov = linalg::symmetrize(&(k0 + &omega - k_next.transpose() * chol.solve(k_next)));
    let cov = clip_psd(&cov)?;
    Ok(PcPredictive { mean: base + &correction, cov, correction })
}

/// Zeroes slightly negative eigenvalues left by rounding.
fn clip_psd(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = cov.clone().symmetric_eigen();
    let scale = cov.diagonal().amax().max(f64::MIN_POSITIVE);
    let min = eig.eigenvalues.min();
    if min < -1e-8 * scale.max(1.0) {
        return Err(Error::NumericalConditioning { context: "predictive covariance".into(), cond: min });
    }
    if min >= 0.0 {
        return Ok(cov.clone());
    }
    Ok(linalg::floor_eigenvalues(cov, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpkernel::{build_block_k, build_cross_k, KernelHypers};
    use approx::assert_relative_eq;

    fn chol() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.1, 0.4, 0.0, -0.05, 0.02, 0.3])
    }

    fn pd_identity() -> PDynParams {
        PDynParams {
            mu: DVector::from_vec(vec![0.1, -0.2, 0.05]),
            phi: DMatrix::identity(3, 3),
            lambda0: DVector::zeros(3),
            lambda1: DMatrix::zeros(3, 3),
            sigma_p_chol: chol(),
        }
    }

    fn panel() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 3, &[1.0, 0.2, -0.1, 1.3, 0.1, 0.0, 0.9, 0.4, 0.2, 1.1, 0.0, -0.3])
    }

    #[test]
    fn hand_residuals_with_identity_feedback() {
        let p = panel();
        let pd = pd_identity();
        let r = residuals(&p.rows(0, 3).into_owned(), &pd).unwrap();
        for t in 0..2 {
            for j in 0..3 {
                let want = p[(t + 1, j)] - pd.mu[j] - p[(t, j)];
                assert_relative_eq!(r.by_time[(t, j)], want, epsilon = 1e-15);
                assert_eq!(r.s[j * 2 + t], r.by_time[(t, j)]);
            }
        }
    }

    #[test]
    fn noiseless_var_has_zero_residuals() {
        let pd = PDynParams { phi: DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 0.5, 0.2])), ..pd_identity() };
        let mut p = DMatrix::zeros(6, 3);
        p.set_row(0, &DVector::from_vec(vec![1.0, 0.3, -0.2]).transpose());
        for t in 1..6 {
            let next = &pd.mu + &pd.phi * p.row(t - 1).transpose();
            p.set_row(t, &next.transpose());
        }
        let r = residuals(&p, &pd).unwrap();
        assert!(r.s.amax() < 1e-15);
    }

    #[test]
    fn risk_price_construction() {
        let loadings = PricingLoadings {
            a_x: DVector::zeros(1),
            b_x: DMatrix::zeros(1, 3),
            a_p: DVector::zeros(1),
            b_p: DMatrix::zeros(1, 3),
            delta0_p: 0.0,
            delta1_p: DVector::zeros(3),
            mu_p_q: DVector::from_vec(vec![1e-4, 2e-4, -1e-4]),
            phi_p_q: DMatrix::from_row_slice(3, 3, &[0.99, 0.01, 0.0, 0.0, 0.95, 0.02, 0.0, 0.0, 0.8]),
            maturities: vec![1],
        };
        let qp = QParams {
            k_inf_q: 0.0,
            g_q: DVector::from_vec(vec![0.99, 0.95, 0.8]),
            sigma_p_chol: chol(),
            sigma_e2: 1e-9,
        };
        let zero = build_p_dynamics(&qp, &loadings, 0.0);
        assert_eq!(zero.mu, loadings.mu_p_q);
        assert_eq!(zero.phi, loadings.phi_p_q);
        let pd = build_p_dynamics(&qp, &loadings, 0.05);
        let diff = &pd.phi - &loadings.phi_p_q;
        assert_relative_eq!(diff[(0, 1)], 0.05, epsilon = 1e-15);
        assert_eq!(diff.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_relative_eq!(pd.phi[(0, 1)] - loadings.phi_p_q[(0, 1)], pd.lambda12(), epsilon = 1e-15);
    }

    #[test]
    fn zero_kernel_is_iid_var() {
        let p = panel();
        let r = residuals(&p, &pd_identity()).unwrap();
        let k = build_block_k(&[0.1, 0.2, 0.3], &KernelHypers::inactive()).unwrap();
        let got = p_loglik(&r, &k, &chol()).unwrap();
        let omega = chol() * chol().transpose();
        let want: f64 = (0..3)
            .map(|t| linalg::mvn_log_density(&r.by_time.row(t).transpose(), &DVector::zeros(3), &omega).unwrap())
            .sum();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn doubling_residuals_scales_quadratic_term() {
        let p = panel();
        let r = residuals(&p, &pd_identity()).unwrap();
        let h = KernelHypers { ell: [1.0, 0.5, 2.0], sigma: [0.3, 0.2, 0.1], active: [true, true, false] };
        let k = build_block_k(&[0.1, -0.4, 0.3], &h).unwrap();
        let zero = StackedResiduals::from_by_time(DMatrix::zeros(3, 3));
        let l0 = p_loglik(&zero, &k, &chol()).unwrap();
        let l1 = p_loglik(&r, &k, &chol()).unwrap();
        let l2 = p_loglik(&StackedResiduals::from_by_time(&r.by_time * 2.0), &k, &chol()).unwrap();
        assert_relative_eq!(l2 - l0, 4.0 * (l1 - l0), max_relative = 1e-12);
    }

    #[test]
    fn prefix_logliks_match_windowed_evaluation() {
        let p = panel();
        let r = residuals(&p, &pd_identity()).unwrap();
        let m = [0.1, -0.4, 0.3];
        let h = KernelHypers { ell: [1.0, 0.5, 2.0], sigma: [0.3, 0.2, 0.1], active: [true, true, false] };
        let k = build_block_k(&m, &h).unwrap();
        let pre = p_prefix_logliks(&r, &k, &chol()).unwrap();
        for t in 1..=3 {
            let sub = residuals(&p.rows(0, t + 1).into_owned(), &pd_identity()).unwrap();
            let ks = build_block_k(&m[..t], &h).unwrap();
            assert_relative_eq!(pre[t], p_loglik(&sub, &ks, &chol()).unwrap(), max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_kernel_posterior_and_predictive() {
        let p = panel();
        let pd = pd_identity();
        let r = residuals(&p, &pd).unwrap();
        let m = [0.1, -0.4, 0.3];
        let h = KernelHypers::inactive();
        let k = build_block_k(&m, &h).unwrap();
        let (mean, cov) = posterior_v(&r, &k, &chol()).unwrap();
        assert!(mean.iter().all(|&x| x == 0.0) && cov.iter().all(|&x| x == 0.0));
        let (k0, kn) = build_cross_k(&m, 0.2, &h).unwrap();
        let pt = p.row(3).transpose();
        let pred = predictive_pc(&pt, &r, &k, &k0, &kn, &pd).unwrap();
        assert!((&pred.mean - (&pd.mu + &pd.phi * &pt)).amax() < 1e-15);
        assert!((&pred.cov - pd.omega()).amax() < 1e-15);
    }

    #[test]
    fn distant_input_kills_gp_correction() {
        let p = panel();
        let pd = pd_identity();
        let r = residuals(&p, &pd).unwrap();
        let m = [0.1, -0.4, 0.3];
        let h = KernelHypers { ell: [0.5, 0.5, 0.5], sigma: [0.3, 0.2, 0.1], active: [true; 3] };
        let k = build_block_k(&m, &h).unwrap();
        let (k0, kn) = build_cross_k(&m, 0.3 + 20.0 * 0.5, &h).unwrap();
        let pred = predictive_pc(&p.row(3).transpose(), &r, &k, &k0, &kn, &pd).unwrap();
        assert!(pred.correction.amax() < 1e-6);
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![0.09, 0.04, 0.01])) + pd.omega();
        assert!((&pred.cov - want).amax() < 1e-6);
    }

    #[test]
    fn posterior_approaches_residuals_for_large_signal() {
        let p = panel();
        let pd = pd_identity();
        let r = residuals(&p, &pd).unwrap();
        let sd = (r.s.map(|x| x * x).sum() / r.s.len() as f64).sqrt();
        let h = KernelHypers { ell: [1.0; 3], sigma: [1e3 * sd; 3], active: [true; 3] };
        let k = build_block_k(&[0.1, -0.4, 0.3], &h).unwrap();
        let (mean, _) = posterior_v(&r, &k, &chol()).unwrap();
        assert!((&mean - &r.s).norm() <= 1e-2 * r.s.norm());
    }

    proptest::proptest! {
        #[test]
        fn posterior_never_exceeds_prior_variance(
            m in proptest::collection::vec(-2.0f64..2.0, 3),
            s in proptest::collection::vec(-1.0f64..1.0, 9),
            l in 0.2f64..3.0,
            sig in 0.05f64..2.0,
        ) {
            let h = KernelHypers { ell: [l; 3], sigma: [sig, 0.5 * sig, 2.0 * sig], active: [true; 3] };
            let k = build_block_k(&m, &h).unwrap();
            let r = StackedResiduals::from_by_time(DMatrix::from_row_slice(3, 3, &s));
            let (_, cov) = posterior_v(&r, &k, &chol()).unwrap();
            proptest::prop_assert!(cov.trace() <= k.dense().trace() + 1e-12);
        }

        #[test]
        fn gp_correction_is_linear_in_residuals(
            s1 in proptest::collection::vec(-1.0f64..1.0, 9),
            s2 in proptest::collection::vec(-1.0f64..1.0, 9),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let m = [0.1, -0.4, 0.3];
            let h = KernelHypers { ell: [0.8, 1.2, 0.5], sigma: [0.3, 0.2, 0.4], active: [true, true, false] };
            let k = build_block_k(&m, &h).unwrap();
            let (k0, kn) = build_cross_k(&m, 0.05, &h).unwrap();
            let pd = pd_identity();
            let pt = DVector::from_vec(vec![0.2, 0.1, -0.1]);
            let (x1, x2) = (DMatrix::from_row_slice(3, 3, &s1), DMatrix::from_row_slice(3, 3, &s2));
            let corr = |x: DMatrix<f64>| predictive_pc(&pt, &StackedResiduals::from_by_time(x), &k, &k0, &kn, &pd).unwrap().correction;
            let mixed = corr(&x1 * a + &x2 * b);
            let want = corr(x1) * a + corr(x2) * b;
            proptest::prop_assert!((mixed - want).amax() < 1e-10);
        }
    }
}

