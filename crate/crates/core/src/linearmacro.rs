//! Linear unspanned-macro benchmark:
//!
//! ```text
//! P_t = μ_P^P + Φ_P^P P_{t−1} + Φ_PM M_{t−1} + Σ_P ε_t
//! ```
//!
//! with `vec(B) = S λ_γ + r`, `B = [μ_P^P, Φ_P^P, Φ_PM]` and `r = vec[μ_P^Q, Φ_P^Q, 0]`.
//! The free entries are `λ_{1,2}` and the unmasked rows of `Φ_PM`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpou::{self, PDynParams, StackedResiduals};
use crate::termstructure::PricingLoadings;

const N: usize = 3;
const R: usize = 1;
const COLS: usize = N + R + 1;

/// Selection structure mapping free coefficients into `vec(B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRestriction {
    /// `N(N+R+1) × n_free` zero/one matrix.
    pub s_sel: DMatrix<f64>,
    pub r_vec: DVector<f64>,
    pub mask: [bool; N],
}

/// Column-major index of `B[(row, col)]` inside `vec(B)`.
fn vec_index(row: usize, col: usize) -> usize {
    col * N + row
}

/// Positions in `vec(B)` of the free coefficients, `λ_{1,2}` first.
pub fn free_positions(mask: &[bool; N]) -> Vec<usize> {
    let mut pos = vec![vec_index(0, 1 + 1)];
    for (row, &on) in mask.iter().enumerate() {
        if on {
            pos.push(vec_index(row, N + 1));
        }
    }
    pos
}

pub fn build_restriction(mask: &[bool; N], mu_p_q: &DVector<f64>, phi_p_q: &DMatrix<f64>) -> Result<LinearRestriction> {
    if mu_p_q.len() != N || phi_p_q.shape() != (N, N) {
        return Err(Error::Domain("linear restriction requires three factors and one macro".into()));
    }
    let pos = free_positions(mask);
    let mut s_sel = DMatrix::zeros(N * COLS, pos.len());
    for (c, &p) in pos.iter().enumerate() {
        s_sel[(p, c)] = 1.0;
    }
    let mut r_vec = DVector::zeros(N * COLS);
    for row in 0..N {
        r_vec[vec_index(row, 0)] = mu_p_q[row];
        for col in 0..N {
            r_vec[vec_index(row, col + 1)] = phi_p_q[(row, col)];
        }
    }
    Ok(LinearRestriction { s_sel, r_vec, mask: *mask })
}

impl LinearRestriction {
    pub fn n_free(&self) -> usize {
        self.s_sel.ncols()
    }

    /// `β = S λ_γ + r`.
    pub fn beta(&self, lambda_gamma: &DVector<f64>) -> Result<DVector<f64>> {
        if lambda_gamma.len() != self.n_free() {
            return Err(Error::Domain(format!(
                "λ_γ has length {}, expected {}",
                lambda_gamma.len(),
                self.n_free()
            )));
        }
        Ok(&self.s_sel * lambda_gamma + &self.r_vec)
    }

    /// Inverse map `λ_γ = S'(β − r)`.
    pub fn lambda_gamma(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.s_sel.transpose() * (beta - &self.r_vec)
    }

    /// `B = [μ, Φ, Φ_PM]` as an `N×(N+R+1)` matrix.
    pub fn coefficients(&self, lambda_gamma: &DVector<f64>) -> Result<DMatrix<f64>> {
        let beta = self.beta(lambda_gamma)?;
        Ok(DMatrix::from_column_slice(N, COLS, beta.as_slice()))
    }
}

/// P-dynamics and macro loadings `Φ_PM` implied by `λ_γ`.
pub fn linear_dynamics(
    loadings: &PricingLoadings,
    sigma_p_chol: &DMatrix<f64>,
    lambda_gamma: &DVector<f64>,
    mask: &[bool; N],
) -> Result<(PDynParams, DVector<f64>)> {
    let restr = build_restriction(mask, &loadings.mu_p_q, &loadings.phi_p_q)?;
    let b = restr.coefficients(lambda_gamma)?;
    let mu = b.column(0).into_owned();
    let phi = b.columns(1, N).into_owned();
    let phi_pm = b.column(N + 1).into_owned();
    let pd = PDynParams {
        lambda0: &mu - &loadings.mu_p_q,
        lambda1: &phi - &loadings.phi_p_q,
        mu,
        phi,
        sigma_p_chol: sigma_p_chol.clone(),
    };
    Ok((pd, phi_pm))
}

/// Residuals `P_t − μ − Φ P_{t−1} − Φ_PM M_{t−1}`; `macros[t]` is `M_t` and
/// must cover at least `M_0..M_{T−1}`.
pub fn linear_residuals(p: &DMatrix<f64>, macros: &[f64], pd: &PDynParams, phi_pm: &DVector<f64>) -> Result<StackedResiduals> {
    let t = p.nrows().saturating_sub(1);
    if macros.len() < t {
        return Err(Error::Data(format!("need {t} lagged macro values, got {}", macros.len())));
    }
    let offset = DMatrix::from_fn(t, N, |i, j| phi_pm[j] * macros[i]);
    gpou::residuals_with_offset(p, pd, Some(&offset))
}

/// Gaussian VAR log-likelihood of `P_1..P_T` given `(1, P_{t−1}, M_{t−1})`.
pub fn linear_p_loglik(
    p: &DMatrix<f64>,
    macros: &[f64],
    loadings: &PricingLoadings,
    sigma_p_chol: &DMatrix<f64>,
    lambda_gamma: &DVector<f64>,
    mask: &[bool; N],
) -> Result<f64> {
    let (pd, phi_pm) = linear_dynamics(loadings, sigma_p_chol, lambda_gamma, mask)?;
    let r = linear_residuals(p, macros, &pd, &phi_pm)?;
    gpou::var_loglik(&r.by_time, sigma_p_chol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotated() -> (DVector<f64>, DMatrix<f64>) {
        (
            DVector::from_vec(vec![1e-4, -2e-4, 5e-5]),
            DMatrix::from_row_slice(3, 3, &[0.99, 0.02, 0.0, 0.01, 0.95, 0.0, 0.0, 0.03, 0.8]),
        )
    }

    #[test]
    fn full_mask_has_four_free_coefficients() {
        let (mu, phi) = rotated();
        let r = build_restriction(&[true; 3], &mu, &phi).unwrap();
        assert_eq!(r.n_free(), N * R + 1);
        for c in 0..r.n_free() {
            assert_eq!(r.s_sel.column(c).sum(), 1.0);
        }
    }

    #[test]
    fn masked_row_is_never_free() {
        let (mu, phi) = rotated();
        let r = build_restriction(&[false, true, true], &mu, &phi).unwrap();
        let b = r.coefficients(&DVector::from_vec(vec![0.3, 7.0, -2.0])).unwrap();
        assert_eq!(b[(0, N + 1)], 0.0);
        assert_eq!(b[(1, N + 1)], 7.0);
        assert_eq!(b[(0, 2)], phi[(0, 1)] + 0.3);
    }

    #[test]
    fn beta_round_trip() {
        let (mu, phi) = rotated();
        let r = build_restriction(&[true, false, true], &mu, &phi).unwrap();
        let lg = DVector::from_vec(vec![-0.11, 0.42, 1.7]);
        let beta = r.beta(&lg).unwrap();
        assert!((r.lambda_gamma(&beta) - &lg).amax() < 1e-15);
        assert!((r.beta(&r.lambda_gamma(&beta)).unwrap() - &beta).amax() < 1e-15);
    }

    fn reference_loadings() -> (PricingLoadings, DMatrix<f64>) {
        let params = crate::simulate::reference_params();
        let mats = [3, 12, 36, 60, 120];
        let w = crate::simulate::loadings_basis(&params, &mats).unwrap();
        let ts = crate::termstructure::AffineTermStructure::new(&params.qp, &w, &mats, 120).unwrap();
        (ts.loadings, params.qp.sigma_p_chol)
    }

    fn small_panel() -> (DMatrix<f64>, Vec<f64>) {
        let p = DMatrix::from_row_slice(5, 3, &[0.01, 0.002, -0.001, 0.012, 0.001, 0.0, 0.011, 0.003, 0.001, 0.009, 0.002, -0.002, 0.01, 0.0, 0.001]);
        (p, vec![0.4, -1.2, 0.3, 2.0, 0.7])
    }

    #[test]
    fn zero_macro_loadings_match_the_plain_var() {
        let (loadings, chol) = reference_loadings();
        let (p, m) = small_panel();
        let got = linear_p_loglik(&p, &m, &loadings, &chol, &DVector::zeros(4), &[true; 3]).unwrap();
        let pd = PDynParams {
            mu: loadings.mu_p_q.clone(),
            phi: loadings.phi_p_q.clone(),
            lambda0: DVector::zeros(N),
            lambda1: DMatrix::zeros(N, N),
            sigma_p_chol: chol.clone(),
        };
        let s = gpou::residuals(&p, &pd).unwrap();
        let k = crate::gpkernel::build_block_k(&m[..4], &crate::gpkernel::KernelHypers::inactive()).unwrap();
        let want = gpou::p_loglik(&s, &k, &chol).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn noiseless_panel_has_zero_residuals() {
        let (loadings, chol) = reference_loadings();
        let lg = DVector::from_vec(vec![0.03, 2e-4, -1e-4, 5e-4]);
        let (pd, phi_pm) = linear_dynamics(&loadings, &chol, &lg, &[true; 3]).unwrap();
        let m = [0.5, -0.3, 1.1, 0.2];
        let mut p = DMatrix::zeros(5, N);
        p.row_mut(0).copy_from(&DVector::from_vec(vec![0.01, 0.001, 0.0]).transpose());
        for t in 1..5 {
            let next = &pd.mu + &pd.phi * p.row(t - 1).transpose() + &phi_pm * m[t - 1];
            p.row_mut(t).copy_from(&next.transpose());
        }
        let r = linear_residuals(&p, &m, &pd, &phi_pm).unwrap();
        assert!(r.by_time.amax() < 1e-15);
        let omega = &chol * chol.transpose();
        let one = crate::linalg::mvn_log_density(&DVector::zeros(N), &DVector::zeros(N), &omega).unwrap();
        let got = linear_p_loglik(&p, &m, &loadings, &chol, &lg, &[true; 3]).unwrap();
        assert!((got - 4.0 * one).abs() < 1e-8 * one.abs());
    }

    #[test]
    fn four_date_regression_density() {
        let (loadings, chol) = reference_loadings();
        let (p, m) = small_panel();
        let lg = DVector::from_vec(vec![-0.02, 3e-4, -2e-4]);
        let got = linear_p_loglik(&p, &m, &loadings, &chol, &lg, &[true, false, true]).unwrap();
        // B written out by hand: λ_{1,2} on (0, 1), macro column from the free rows
        let mut phi = loadings.phi_p_q.clone();
        phi[(0, 1)] += lg[0];
        let pm = [lg[1], 0.0, lg[2]];
        let omega = &chol * chol.transpose();
        let inv = omega.clone().try_inverse().unwrap();
        let log_det = omega.determinant().ln();
        let mut want = 0.0;
        for t in 1..5 {
            let e = DVector::from_fn(N, |j, _| {
                p[(t, j)] - loadings.mu_p_q[j] - (0..N).map(|k| phi[(j, k)] * p[(t - 1, k)]).sum::<f64>() - pm[j] * m[t - 1]
            });
            want += -0.5 * (N as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + (e.transpose() * &inv * &e)[0]);
        }
        assert!((got - want).abs() < 1e-8 * want.abs(), "{got} vs {want}");
    }
}
