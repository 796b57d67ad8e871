//! One-step-ahead predictive draws of the PCs and of bond excess returns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpkernel::{build_cross_k, N_BLOCKS};
use crate::gpou::{posterior_v, predictive_pc};
use crate::inference::{Likelihood, ParticleSystem};
use crate::linalg::sorted_symmetric_eigen;
use crate::model::MacroForm;
use crate::rng::stream;
use crate::termstructure::AffineTermStructure;

fn lookup(yields: &[f64], maturities: &[usize], m: usize, which: &str) -> Result<f64> {
    maturities
        .iter()
        .position(|&x| x == m)
        .map(|i| yields[i])
        .ok_or_else(|| Error::Data(format!("maturity {m} months is missing from the {which} yields")))
}

/// `rx_{t,t+h}^n = n y_t^n − h y_t^h − (n−h) y_{t+h}^{n−h}`, computed as
/// `(n−h)(y_t^n − y_{t+h}^{n−h}) + h (y_t^n − y_t^h)` so that flat curves and
/// `n = h` give exactly zero.
pub fn observed_excess_return(yields_t: &[f64], yields_th: &[f64], maturities: &[usize], n: usize, h: usize) -> Result<f64> {
    observed_excess_return_filled(yields_t, yields_th, maturities, n, h, None)
}

/// As [`observed_excess_return`], with `fill(m)` supplying `y_{t+h}^m` when
/// that maturity is not observed.
pub fn observed_excess_return_filled(
    yields_t: &[f64],
    yields_th: &[f64],
    maturities: &[usize],
    n: usize,
    h: usize,
    fill: Option<&dyn Fn(usize) -> f64>,
) -> Result<f64> {
    if h == 0 || n < h {
        return Err(Error::Domain(format!("excess return needs 1 ≤ h ≤ n, got n={n}, h={h}")));
    }
    if yields_t.len() != maturities.len() || yields_th.len() != maturities.len() {
        return Err(Error::Data("yield rows and maturity list differ in length".into()));
    }
    let y_n = lookup(yields_t, maturities, n, "origin")?;
    let y_h = lookup(yields_t, maturities, h, "origin")?;
    let carry = if n == h {
        0.0
    } else {
        let y_next = match (lookup(yields_th, maturities, n - h, "next-date"), fill) {
            (Ok(y), _) => y,
            (Err(_), Some(f)) => f(n - h),
            (Err(e), None) => return Err(e),
        };
        (n - h) as f64 * (y_n - y_next)
    };
    Ok(carry + h as f64 * (y_n - y_h))
}

/// Log-price loadings `(A_n, B_n)` with `log P_t^n = A_n + B_n' P_t`
/// (zero at `n = 0`).
pub fn price_loadings(ts: &AffineTermStructure, n: usize) -> Result<(f64, DVector<f64>)> {
    if n == 0 {
        return Ok((0.0, DVector::zeros(N_BLOCKS)));
    }
    let (a, b) = ts.loadings_at(n)?;
    let s = -(n as f64);
    Ok((s * a, b * s))
}

/// `rx̃ = A_{n−1} − A_n + A_1 + B_{n−1}' P̃_{t+1} − (B_n − B_1)' P_t`.
pub fn model_excess_return(ts: &AffineTermStructure, n: usize, p_next: &DVector<f64>, p_t: &DVector<f64>) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("maturity must be at least one month".into()));
    }
    let (a_m, b_m) = price_loadings(ts, n - 1)?;
    let (a_n, b_n) = price_loadings(ts, n)?;
    let (a_1, b_1) = price_loadings(ts, 1)?;
    Ok(a_m - a_n + a_1 + b_m.dot(p_next) - (b_n - b_1).dot(p_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDraws {
    /// Forecast origin.
    pub t: usize,
    pub weights: Vec<f64>,
    /// `N_θ × 3`.
    pub pc_draws: DMatrix<f64>,
    pub maturities: Vec<usize>,
    /// One vector of `N_θ` draws per maturity.
    pub rx_draws: Vec<DVector<f64>>,
    pub point_rx: Vec<f64>,
}

impl PredictiveDraws {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn rx(&self, n: usize) -> Option<&DVector<f64>> {
        self.maturities.iter().position(|&m| m == n).map(|i| &self.rx_draws[i])
    }
}

fn gaussian_draw<R: Rng>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let (vals, vecs) = sorted_symmetric_eigen(cov);
    let z = DVector::from_fn(mean.len(), |i, _| vals[i].max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal));
    mean + vecs * z
}

/// Predictive mean and covariance of `P_{t+1}` for one parameter vector.
pub fn pc_predictive(lik: &Likelihood<'_>, theta: &DVector<f64>, t: usize, n_max: usize) -> Result<(AffineTermStructure, DVector<f64>, DMatrix<f64>)> {
    let pm = lik.particle_model(theta, n_max)?;
    let p_t = lik.data.panel.pcs_at(t);
    let spec = &lik.layout.spec;
    let omega = pm.pd.omega();
    let base = &pm.pd.mu + &pm.pd.phi * &p_t;
    let (mean, cov) = if spec.form == MacroForm::Gp && pm.hypers.any_active() {
        let inputs = &lik.data.macros[..t];
        let (k0, k_next) = build_cross_k(inputs, lik.data.macros[t], &pm.hypers)?;
        if t == 0 {
            (base, k0 + omega)
        } else {
            let s = lik.residuals(&pm, t)?;
            let k = lik.kernel(&pm.hypers, t)?;
            let pred = predictive_pc(&p_t, &s, &k, &k0, &k_next, &pm.pd)?;
            (pred.mean, pred.cov)
        }
    } else if spec.form == MacroForm::Linear {
        (base + &pm.phi_pm * lik.data.macros[t], omega)
    } else {
        (base, omega)
    };
    Ok((pm.term_structure, mean, cov))
}

/// Particle approximation of the one-step predictive of `P_{t+1}` and of the
/// excess returns on the listed maturities. Particle `i` draws from stream
/// `(seed, epoch, i)`.
pub fn predict_excess_returns(
    ps: &ParticleSystem,
    lik: &Likelihood<'_>,
    t: usize,
    maturities: &[usize],
    seed: u64,
    epoch: u64,
) -> Result<PredictiveDraws> {
    if t >= lik.data.n_obs() {
        return Err(Error::Domain(format!("forecast origin {t} beyond the data")));
    }
    if maturities.iter().any(|&n| n == 0) {
        return Err(Error::Domain("maturities must be positive".into()));
    }
    let n_max = maturities.iter().copied().max().unwrap_or(1);
    let p_t = lik.data.panel.pcs_at(t);
    let per: Vec<(DVector<f64>, Vec<f64>)> = ps
        .thetas
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            let (ts, mean, cov) = pc_predictive(lik, theta, t, n_max)?;
            let mut rng = stream(seed, epoch, i as u32);
            let draw = gaussian_draw(&mean, &cov, &mut rng);
            let rx = maturities.iter().map(|&n| model_excess_return(&ts, n, &draw, &p_t)).collect::<Result<Vec<_>>>()?;
            Ok((draw, rx))
        })
        .collect::<Result<_>>()?;
    let weights = ps.weights();
    let np = per.len();
    let pc_draws = DMatrix::from_fn(np, N_BLOCKS, |i, j| per[i].0[j]);
    let rx_draws: Vec<DVector<f64>> = (0..maturities.len()).map(|k| DVector::from_fn(np, |i, _| per[i].1[k])).collect();
    let point_rx = rx_draws.iter().map(|d| d.iter().zip(&weights).map(|(x, w)| x * w).sum()).collect();
    Ok(PredictiveDraws { t, weights, pc_draws, maturities: maturities.to_vec(), rx_draws, point_rx })
}

/// Particle-averaged posterior of the GP values on `0..t_end`: mean and the
/// bounds of a moment-matched 95% band, each `T × 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VPosterior {
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

pub fn v_posterior(ps: &ParticleSystem, lik: &Likelihood<'_>, t_end: usize) -> Result<VPosterior> {
    let w = ps.weights();
    let t = t_end;
    let per: Vec<(DVector<f64>, DVector<f64>)> = ps
        .thetas
        .par_iter()
        .map(|theta| {
            let pm = lik.particle_model(theta, lik.data.max_maturity())?;
            let s = lik.residuals(&pm, t_end)?;
            let k = lik.kernel(&pm.hypers, t_end)?;
            let (m, c) = posterior_v(&s, &k, &pm.params.qp.sigma_p_chol)?;
            Ok((m, c.diagonal()))
        })
        .collect::<Result<_>>()?;
    let len = N_BLOCKS * t;
    let mut mean = DVector::zeros(len);
    let mut second = DVector::zeros(len);
    for ((m, v), wi) in per.iter().zip(&w) {
        mean += m * *wi;
        second += (v + m.component_mul(m)) * *wi;
    }
    let sd = (second - mean.component_mul(&mean)).map(|x| x.max(0.0).sqrt());
    let shape = |v: &DVector<f64>| DMatrix::from_fn(t, N_BLOCKS, |r, j| v[j * t + r]);
    let z = 1.959_963_984_540_054;
    Ok(VPosterior { lower: shape(&(&mean - &sd * z)), upper: shape(&(&mean + &sd * z)), mean: shape(&mean) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_month_excess_return_is_zero() {
        let mats = [1, 12, 24];
        let rx = observed_excess_return(&[0.0031, 0.004, 0.0042], &[0.007, 0.001, 0.0], &mats, 1, 1).unwrap();
        assert_eq!(rx, 0.0);
    }

    #[test]
    fn flat_curve_excess_return_is_zero() {
        let mats = [1, 23, 24];
        for c in [0.05 / 12.0, 0.0123, 1e-7, 0.3] {
            let y = [c, c, c];
            assert_eq!(observed_excess_return(&y, &y, &mats, 24, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_year_hand_arithmetic() {
        let mats = [1, 23, 24];
        let y_t = [0.02 / 12.0, 0.048 / 12.0, 0.05 / 12.0];
        let y_t1 = [0.021 / 12.0, 0.049 / 12.0, 0.051 / 12.0];
        let want = 24.0 * 0.05 / 12.0 - 0.02 / 12.0 - 23.0 * 0.049 / 12.0;
        let got = observed_excess_return(&y_t, &y_t1, &mats, 24, 1).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn missing_maturity_names_the_gap() {
        let mats = [1, 24];
        let err = observed_excess_return(&[0.1, 0.2], &[0.1, 0.2], &mats, 24, 1).unwrap_err();
        assert!(err.to_string().contains("23"));
        let filled = observed_excess_return_filled(&[0.1, 0.2], &[0.1, 0.2], &mats, 24, 1, Some(&|_| 0.2)).unwrap();
        assert!((filled - 0.1).abs() < 1e-15);
    }
}
