//! Joint log-likelihood of a particle: cross-sectional (Q) part on every date
//! plus the marginal P part of the PC dynamics, with prefix bookkeeping for
//! sequential updates and an analytic gradient.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::data::ModelData;
use crate::error::{Error, Result};
use crate::gpkernel::{build_block_k, GpCov, KernelHypers, N_BLOCKS};
use crate::gpou::{self, PDynParams, StackedResiduals};
use crate::linalg::LN_2PI;
use crate::linearmacro;
use crate::model::{decode_pricing, pricing_slice, MacroForm, ParamLayout, Params, IDX_K_INF, IDX_SIGMA_E, N_PRICING, UNIT_SCALE};
use crate::termstructure::{jsz_ladder, projected_errors, AffineTermStructure, PricingLoadings};

/// Likelihood pieces of one particle on the window `0..=t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEval {
    /// Number of fully included cross-sections (`t`).
    pub n_prev: usize,
    pub ssr_prev: f64,
    pub ssr_new: f64,
    /// `J − N`.
    pub dim: usize,
    pub sigma_e2: f64,
    /// P log-likelihood of `s_1..s_{t−1}`.
    pub p_prev: f64,
    /// P log-likelihood of `s_1..s_t`.
    pub p_new: f64,
}

fn q_term(ssr: f64, count: f64, dim: usize, sigma_e2: f64) -> f64 {
    -0.5 * dim as f64 * count * (LN_2PI + sigma_e2.ln()) - 0.5 * ssr / sigma_e2
}

impl WindowEval {
    pub fn q_prev(&self) -> f64 {
        q_term(self.ssr_prev, self.n_prev as f64, self.dim, self.sigma_e2)
    }

    pub fn q_new(&self) -> f64 {
        q_term(self.ssr_new, 1.0, self.dim, self.sigma_e2)
    }

    /// `log f(Y_t | Y_{0:t−1}, θ)`.
    pub fn incremental(&self) -> f64 {
        self.q_new() + self.p_new - self.p_prev
    }

    /// `log f(Y_{0:t−1}|θ) + φ log f(Y_t|Y_{0:t−1}, θ)`.
    pub fn tempered(&self, phi: f64) -> f64 {
        self.q_prev() + self.p_prev + phi * self.incremental()
    }

    pub fn with_sigma_e2(&self, sigma_e2: f64) -> Self {
        Self { sigma_e2, ..*self }
    }
}

/// Likelihood of one model on one data set, with the GP signal scales fixed.
#[derive(Debug, Clone)]
pub struct Likelihood<'a> {
    pub data: &'a ModelData,
    pub layout: &'a ParamLayout,
    pub sigma_k: [f64; N_BLOCKS],
}

/// Everything the forecasting and decomposition steps need from one particle.
#[derive(Debug, Clone)]
pub struct ParticleModel {
    pub params: Params,
    pub term_structure: AffineTermStructure,
    pub pd: PDynParams,
    pub phi_pm: DVector<f64>,
    pub hypers: KernelHypers,
}

impl<'a> Likelihood<'a> {
    pub fn new(data: &'a ModelData, layout: &'a ParamLayout, sigma_k: [f64; N_BLOCKS]) -> Result<Self> {
        if layout.spec.form == MacroForm::Gp || layout.spec.form == MacroForm::Linear {
            if layout.spec.has_macro() && data.macros.len() != data.n_obs() {
                return Err(Error::Data("model uses a macro but the data carry none".into()));
            }
        }
        if sigma_k.iter().any(|s| !(s >= &0.0)) {
            return Err(Error::Domain("σ_K must be non-negative".into()));
        }
        Ok(Self { data, layout, sigma_k })
    }

    pub fn hypers(&self, params: &Params) -> KernelHypers {
        let mut active = [false; N_BLOCKS];
        for &j in &self.layout.active {
            active[j] = true;
        }
        KernelHypers { ell: params.ell, sigma: self.sigma_k, active }
    }

    /// Pricing loadings, P-dynamics and kernel hyperparameters of `θ`, with
    /// yields priced up to `n_max` months.
    pub fn particle_model(&self, theta: &DVector<f64>, n_max: usize) -> Result<ParticleModel> {
        let params = self.layout.decode(theta)?;
        let n_max = n_max.max(self.data.max_maturity());
        let ts = AffineTermStructure::new(&params.qp, &self.data.panel.w, &self.data.maturities, n_max)?;
        let (pd, phi_pm) = self.p_dynamics(&params, &ts.loadings)?;
        let hypers = self.hypers(&params);
        Ok(ParticleModel { params, term_structure: ts, pd, phi_pm, hypers })
    }

    fn p_dynamics(&self, params: &Params, loadings: &PricingLoadings) -> Result<(PDynParams, DVector<f64>)> {
        match self.layout.spec.form {
            MacroForm::Linear => {
                let lg = self.layout.lambda_gamma(params);
                linearmacro::linear_dynamics(loadings, &params.qp.sigma_p_chol, &lg, &self.layout.spec.mask)
            }
            _ => Ok((
                gpou::build_p_dynamics_general(&params.qp, loadings, &params.lambda0, &params.lambda1),
                DVector::zeros(N_BLOCKS),
            )),
        }
    }

    /// Stacked residuals `s_1..s_t` (linear macro term removed when present).
    pub fn residuals(&self, pm: &ParticleModel, t_end: usize) -> Result<StackedResiduals> {
        let p = self.data.panel.p.rows(0, t_end + 1).into_owned();
        match self.layout.spec.form {
            MacroForm::Linear if !self.layout.pm_rows.is_empty() => {
                linearmacro::linear_residuals(&p, &self.data.macros, &pm.pd, &pm.phi_pm)
            }
            _ => gpou::residuals(&p, &pm.pd),
        }
    }

    /// Prior covariance of the GP values on `M_0..M_{t−1}`.
    pub fn kernel(&self, hypers: &KernelHypers, t_end: usize) -> Result<GpCov> {
        let inputs: Vec<f64> = if self.data.macros.is_empty() {
            vec![0.0; t_end]
        } else {
            self.data.macros[..t_end].to_vec()
        };
        let h = if self.layout.spec.form == MacroForm::Gp { hypers.clone() } else { KernelHypers::inactive() };
        build_block_k(&inputs, &h)
    }

    /// Likelihood pieces for the window `0..=t_end`.
    pub fn eval(&self, theta: &DVector<f64>, t_end: usize) -> Result<WindowEval> {
        if t_end >= self.data.n_obs() {
            return Err(Error::Domain(format!("window end {t_end} beyond {} observations", self.data.n_obs())));
        }
        let params = self.layout.decode(theta)?;
        let ts = AffineTermStructure::new(&params.qp, &self.data.panel.w, &self.data.maturities, self.data.max_maturity())?;
        let l = &ts.loadings;
        let rows = t_end + 1;
        let u = projected_errors(
            &self.data.panel.p.rows(0, rows).into_owned(),
            &self.data.yields.rows(0, rows).into_owned(),
            &l.a_p,
            &l.b_p,
            &self.data.panel.w_perp,
        );
        let ssr: Vec<f64> = u.row_iter().map(|r| r.norm_squared()).collect();
        let ssr_new = ssr[t_end];
        let ssr_prev: f64 = ssr[..t_end].iter().sum();
        let (p_prev, p_new) = if t_end == 0 {
            (0.0, 0.0)
        } else {
            let (pd, phi_pm) = self.p_dynamics(&params, l)?;
            let hypers = self.hypers(&params);
            let pm = ParticleModel { params: params.clone(), term_structure: ts.clone(), pd, phi_pm, hypers };
            let s = self.residuals(&pm, t_end)?;
            let k = self.kernel(&pm.hypers, t_end)?;
            let pre = gpou::p_prefix_logliks(&s, &k, &params.qp.sigma_p_chol)?;
            (pre[t_end - 1], pre[t_end])
        };
        let out = WindowEval {
            n_prev: t_end,
            ssr_prev,
            ssr_new,
            dim: self.data.error_dim(),
            sigma_e2: params.qp.sigma_e2,
            p_prev,
            p_new,
        };
        if !out.tempered(1.0).is_finite() {
            return Err(Error::NumericalConditioning { context: "likelihood evaluation".into(), cond: f64::NAN });
        }
        Ok(out)
    }

    /// Full log-likelihood of the window `0..=t_end`.
    pub fn loglik(&self, theta: &DVector<f64>, t_end: usize) -> Result<f64> {
        Ok(self.eval(theta, t_end)?.tempered(1.0))
    }

    /// Log-likelihood of `0..=t_end` and its gradient in `θ`.
    ///
    /// Tangents of the pricing loadings come from complex-step differentiation
    /// of the generic pricing recursions; the rest is analytic.
    pub fn loglik_grad(&self, theta: &DVector<f64>, t_end: usize) -> Result<(f64, DVector<f64>)> {
        let layout = self.layout;
        let params = layout.decode(theta)?;
        let data = self.data;
        let rows = t_end + 1;
        let mats = &data.maturities;
        let n_max = data.max_maturity();
        let w = &data.panel.w;
        let w_perp = &data.panel.w_perp;
        let pcs = data.panel.p.rows(0, rows).into_owned();
        let ys = data.yields.rows(0, rows).into_owned();

        let ts = AffineTermStructure::new(&params.qp, w, mats, n_max)?;
        let l = &ts.loadings;
        let s2 = params.qp.sigma_e2;
        let dim = data.error_dim() as f64;
        let u = projected_errors(&pcs, &ys, &l.a_p, &l.b_p, w_perp);
        let ssr: f64 = u.iter().map(|x| x * x).sum();
        let q = -0.5 * dim * rows as f64 * (LN_2PI + s2.ln()) - 0.5 * ssr / s2;

        let mut grad = DVector::zeros(layout.dim());
        grad[IDX_SIGMA_E] = -0.5 * dim * rows as f64 + 0.5 * ssr / s2;

        // P part
        let (pd, phi_pm) = self.p_dynamics(&params, l)?;
        let hypers = self.hypers(&params);
        let (p_ll, alpha, d_chol_p) = if t_end == 0 {
            (0.0, DMatrix::zeros(0, N_BLOCKS), DMatrix::zeros(N_BLOCKS, N_BLOCKS))
        } else {
            let pm = ParticleModel { params: params.clone(), term_structure: ts.clone(), pd: pd.clone(), phi_pm, hypers };
            let s = self.residuals(&pm, t_end)?;
            let k = self.kernel(&pm.hypers, t_end)?;
            let pg = gpou::p_loglik_grad(&s, &k, &params.qp.sigma_p_chol)?;
            for (i, &j) in layout.active.iter().enumerate() {
                grad[layout.ell_range().start + i] = pg.d_log_ell[j];
            }
            let dc = pg.d_chol(&params.qp.sigma_p_chol);
            (pg.loglik, pg.alpha, dc)
        };
        let mut g_mu = DVector::zeros(N_BLOCKS);
        let mut g_phi = DMatrix::zeros(N_BLOCKS, N_BLOCKS);
        let mut g_pm = DVector::zeros(N_BLOCKS);
        for t in 0..alpha.nrows() {
            let a = alpha.row(t).transpose();
            g_mu += &a;
            g_phi += &a * pcs.row(t);
            if !data.macros.is_empty() {
                g_pm += &a * data.macros[t];
            }
        }
        for (i, idx) in layout.lambda0_range().enumerate() {
            grad[idx] = g_mu[i] / UNIT_SCALE;
        }
        for (&(i, j), idx) in layout.lambda1_entries.iter().zip(layout.lambda1_range()) {
            grad[idx] = g_phi[(i, j)];
        }
        for (&r, idx) in layout.pm_rows.iter().zip(layout.pm_range()) {
            grad[idx] = g_pm[r] / UNIT_SCALE;
        }

        // pricing coordinates through complex-step tangents
        let raw = pricing_slice(theta);
        let h = 1e-20;
        let wu = u * w_perp; // rows u_t' W_⊥
        for c in 0..N_PRICING {
            let mut craw = raw.map(|x| Complex64::new(x, 0.0));
            craw[c].im = h;
            let (k, g, chol) = decode_pricing(&craw);
            let lad = jsz_ladder(k, &g, &chol, w, mats, n_max)?;
            let d_a = DVector::from_iterator(mats.len(), mats.iter().map(|&m| lad.a_p[m - 1].im / h));
            let mut d_b = DMatrix::zeros(mats.len(), N_BLOCKS);
            for (row, &m) in mats.iter().enumerate() {
                for k in 0..N_BLOCKS {
                    d_b[(row, k)] = lad.b_p[m - 1][k].im / h;
                }
            }
            let d_mu = lad.mu_p_q.map(|z| z.im / h);
            let d_phi = lad.phi_p_q.map(|z| z.im / h);
            let d_chol = chol.map(|z| z.im / h);
            // ∂Q = Σ_t u_t' W_⊥ (∂A + ∂B P_t) / σ²
            let fitted = &pcs * d_b.transpose();
            let mut dq = 0.0;
            for t in 0..rows {
                let row = fitted.row(t).transpose() + &d_a;
                dq += wu.row(t).dot(&row.transpose());
            }
            let mut dp = g_mu.dot(&d_mu) + g_phi.component_mul(&d_phi).sum();
            dp += d_chol_p.component_mul(&d_chol).sum();
            grad[IDX_K_INF + c] = dq / s2 + dp;
        }
        Ok((q + p_ll, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn small_data(with_macro: bool) -> ModelData {
        let mats = vec![3, 12, 24, 60, 120];
        let t = 12;
        let yields = DMatrix::from_fn(t, mats.len(), |r, c| {
            let x = mats[c] as f64 / 120.0;
            let level = 0.004 + 0.0004 * (r as f64 * 0.7).sin();
            let slope = 0.001 * (1.0 + 0.3 * (r as f64 * 0.4).cos());
            level + slope * x - 0.0003 * x * x + 1e-6 * ((r * 7 + c * 3) as f64).sin()
        });
        let panel = crate::termstructure::extract_pcs(&yields, 3).unwrap();
        let macros = if with_macro { (0..t).map(|r| (r as f64 * 0.5).sin()).collect() } else { vec![] };
        ModelData::new(yields, mats, &panel.w, macros).unwrap()
    }

    fn theta_for(layout: &ParamLayout) -> DVector<f64> {
        let mut th = DVector::zeros(layout.dim());
        th[0] = (2e-9f64).ln();
        th[1] = 0.5;
        th[2] = 0.995;
        th[3] = (0.04f64).ln();
        th[4] = (0.15f64).ln();
        th[5] = (0.4f64).ln();
        th[6] = 0.05;
        th[7] = (0.25f64).ln();
        th[8] = -0.02;
        th[9] = 0.03;
        th[10] = (0.12f64).ln();
        for i in layout.ell_range() {
            th[i] = 0.2;
        }
        for i in layout.lambda1_range() {
            th[i] = 0.01;
        }
        th
    }

    #[test]
    fn prefix_bookkeeping_is_consistent() {
        let data = small_data(true);
        let layout = ModelSpec::parse("GP_111").unwrap().layout();
        let lik = Likelihood::new(&data, &layout, [0.0003, 0.0002, 0.0001]).unwrap();
        let th = theta_for(&layout);
        let e5 = lik.eval(&th, 5).unwrap();
        let e6 = lik.eval(&th, 6).unwrap();
        assert!((e5.tempered(1.0) - e6.tempered(0.0)).abs() < 1e-8 * e5.tempered(1.0).abs());
        assert!((e6.tempered(1.0) - lik.loglik_grad(&th, 6).unwrap().0).abs() < 1e-8 * e6.tempered(1.0).abs());
    }

    #[test]
    fn first_date_has_no_p_part() {
        let data = small_data(false);
        let layout = ModelSpec::parse("M1").unwrap().layout();
        let lik = Likelihood::new(&data, &layout, [0.0; 3]).unwrap();
        let e = lik.eval(&theta_for(&layout), 0).unwrap();
        assert_eq!(e.p_new, 0.0);
        assert_eq!(e.incremental(), e.q_new());
    }
}
