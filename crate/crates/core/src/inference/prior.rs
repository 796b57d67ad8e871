//! Independent normal priors on the transformed coordinates and a conjugate
//! inverse-gamma prior on `σ_e²`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::LN_2PI;
use crate::model::{ParamLayout, IDX_CHOL, IDX_G, IDX_K_INF, IDX_SIGMA_E};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    /// Standard deviation of every normal block.
    pub sd: f64,
    pub mean_k_inf: f64,
    pub mean_g: [f64; 3],
    pub mean_chol: [f64; 6],
    pub mean_log_ell: f64,
    pub mean_lambda: f64,
    pub mean_phi_pm: f64,
    /// `σ_e² ~ InvGamma(α_0/2, β_0/2)`.
    pub alpha0: f64,
    pub beta0: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            sd: 10.0,
            mean_k_inf: 0.0,
            mean_g: [0.0; 3],
            mean_chol: [0.0; 6],
            mean_log_ell: 0.0,
            mean_lambda: 0.0,
            mean_phi_pm: 0.0,
            alpha0: 2.0,
            beta0: 2e-8,
        }
    }
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd > 0.0) || !(self.alpha0 > 0.0) || !(self.beta0 > 0.0) {
            return Err(Error::Spec("prior sd, alpha0 and beta0 must be positive".into()));
        }
        Ok(())
    }

    /// Means of the normal coordinates (entry 0 unused).
    pub fn means(&self, layout: &ParamLayout) -> DVector<f64> {
        let mut m = DVector::zeros(layout.dim());
        m[IDX_K_INF] = self.mean_k_inf;
        for i in 0..3 {
            m[IDX_G + i] = self.mean_g[i];
        }
        for i in 0..6 {
            m[IDX_CHOL + i] = self.mean_chol[i];
        }
        for i in layout.ell_range() {
            m[i] = self.mean_log_ell;
        }
        for i in layout.lambda0_range().chain(layout.lambda1_range()) {
            m[i] = self.mean_lambda;
        }
        for i in layout.pm_range() {
            m[i] = self.mean_phi_pm;
        }
        m
    }

    fn ig_shape_rate(&self) -> (f64, f64) {
        (0.5 * self.alpha0, 0.5 * self.beta0)
    }

    /// Log-density of `x = log σ_e²` (includes the Jacobian `σ_e²`).
    fn log_sigma_density(&self, x: f64) -> f64 {
        let (a, b) = self.ig_shape_rate();
        a * b.ln() - ln_gamma(a) - a * x - b * (-x).exp()
    }

    pub fn log_prior(&self, layout: &ParamLayout, theta: &DVector<f64>) -> f64 {
        let m = self.means(layout);
        let v = self.sd * self.sd;
        let mut lp = self.log_sigma_density(theta[IDX_SIGMA_E]);
        for i in 1..layout.dim() {
            let d = theta[i] - m[i];
            lp += -0.5 * (LN_2PI + v.ln() + d * d / v);
        }
        lp
    }

    pub fn grad_log_prior(&self, layout: &ParamLayout, theta: &DVector<f64>) -> DVector<f64> {
        let m = self.means(layout);
        let v = self.sd * self.sd;
        let (a, b) = self.ig_shape_rate();
        let mut g = DVector::zeros(layout.dim());
        g[IDX_SIGMA_E] = -a + b * (-theta[IDX_SIGMA_E]).exp();
        for i in 1..layout.dim() {
            g[i] = -(theta[i] - m[i]) / v;
        }
        g
    }

    pub fn sample<R: Rng + ?Sized>(&self, layout: &ParamLayout, rng: &mut R) -> DVector<f64> {
        let m = self.means(layout);
        let mut theta = DVector::zeros(layout.dim());
        let (a, b) = self.ig_shape_rate();
        let gamma = Gamma::new(a, 1.0).expect("positive inverse-gamma shape");
        let draw: f64 = gamma.sample(rng);
        theta[IDX_SIGMA_E] = (b / draw).ln();
        for i in 1..layout.dim() {
            let z: f64 = StandardNormal.sample(rng);
            theta[i] = m[i] + self.sd * z;
        }
        theta
    }
}
