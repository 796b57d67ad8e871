//! Plug-in choice of the GP signal scales `σ_K`.
//!
//! The yields-only model is fitted by maximum likelihood, its P-residuals
//! `ŝ` are standardized by their sample standard deviations, and a common
//! multiplier `c` plus the active length-scales are chosen by maximizing the
//! GP marginal likelihood of `ŝ`. Then `σ_{K,j} = c · sd(ŝ_j)`.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::data::ModelData;
use super::likelihood::Likelihood;
use super::optimize::{fit_model, MinimizeOptions, ModeFit};
use crate::error::{Error, Result};
use crate::gpkernel::{build_block_k, KernelHypers, N_BLOCKS};
use crate::gpou::{p_loglik, posterior_v, StackedResiduals};
use crate::model::{MacroForm, ModelSpec};

pub const LOG_C_BOUNDS: (f64, f64) = (-10.0, 3.0);
pub const LOG_ELL_BOUNDS: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaTuning {
    pub c_hat: f64,
    pub sigma_k: [f64; N_BLOCKS],
    pub ell: [f64; N_BLOCKS],
    pub residual_sd: [f64; N_BLOCKS],
    pub active: [bool; N_BLOCKS],
    /// GP marginal log-likelihood of `ŝ` at the chosen hyperparameters.
    pub loglik: f64,
    pub fit: ModeFit,
    pub residuals: StackedResiduals,
}

impl SigmaTuning {
    pub fn hypers(&self) -> KernelHypers {
        KernelHypers { ell: self.ell, sigma: self.sigma_k, active: self.active }
    }
}

/// Sample standard deviation of each residual equation.
pub fn residual_sd(s: &StackedResiduals) -> [f64; N_BLOCKS] {
    let t = s.t_len();
    let mut out = [0.0; N_BLOCKS];
    for (j, o) in out.iter_mut().enumerate() {
        let col = s.by_time.column(j);
        let m = col.mean();
        *o = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (t.max(2) - 1) as f64).sqrt();
    }
    out
}

struct GpEvidence<'a> {
    s: &'a StackedResiduals,
    inputs: &'a [f64],
    active: Vec<usize>,
    sd: [f64; N_BLOCKS],
    chol: &'a DMatrix<f64>,
}

impl GpEvidence<'_> {
    fn hypers(&self, x: &[f64]) -> KernelHypers {
        let c = x[0].exp();
        let mut h = KernelHypers::inactive();
        for (i, &j) in self.active.iter().enumerate() {
            h.active[j] = true;
            h.ell[j] = x[i + 1].exp();
            h.sigma[j] = c * self.sd[j];
        }
        h
    }

    fn loglik(&self, x: &[f64]) -> Result<f64> {
        let k = build_block_k(self.inputs, &self.hypers(x))?;
        p_loglik(self.s, &k, self.chol)
    }

    fn in_bounds(x: &[f64]) -> bool {
        (LOG_C_BOUNDS.0..=LOG_C_BOUNDS.1).contains(&x[0])
            && x[1..].iter().all(|l| (LOG_ELL_BOUNDS.0..=LOG_ELL_BOUNDS.1).contains(l))
    }
}

impl CostFunction for &GpEvidence<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        if !GpEvidence::in_bounds(x) {
            return Ok(1e300);
        }
        Ok(match self.loglik(x) {
            Ok(v) if v.is_finite() => -v,
            _ => 1e300,
        })
    }
}

/// Tunes `σ_K` for a GP model from the yields-only fit over `0..=t_end`.
pub fn tune_sigma_k(data: &ModelData, spec: &ModelSpec, t_end: usize, opts: &MinimizeOptions) -> Result<SigmaTuning> {
    let m1 = ModelSpec::yields_only();
    let layout = m1.layout();
    let lik = Likelihood::new(data, &layout, [0.0; N_BLOCKS])?;
    let fit = fit_model(&lik, None, t_end, opts)?;
    let pm = lik.particle_model(&fit.theta, data.max_maturity())?;
    let s = lik.residuals(&pm, t_end)?;
    let sd = residual_sd(&s);

    let active: Vec<usize> = if spec.form == MacroForm::Gp { (0..N_BLOCKS).filter(|&j| spec.mask[j]).collect() } else { vec![] };
    let mut act = [false; N_BLOCKS];
    for &j in &active {
        act[j] = true;
    }
    if active.is_empty() {
        let loglik = p_loglik(&s, &build_block_k(&vec![0.0; t_end], &KernelHypers::inactive())?, &pm.params.qp.sigma_p_chol)?;
        return Ok(SigmaTuning {
            c_hat: 0.0,
            sigma_k: [0.0; N_BLOCKS],
            ell: [1.0; N_BLOCKS],
            residual_sd: sd,
            active: act,
            loglik,
            fit,
            residuals: s,
        });
    }
    if data.macros.len() < t_end {
        return Err(Error::Data("GP tuning needs the macro series".into()));
    }
    let ev = GpEvidence { s: &s, inputs: &data.macros[..t_end], active: active.clone(), sd, chol: &pm.params.qp.sigma_p_chol };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for &(c0, l0) in &[(-1.0, 0.0), (0.0, 0.0), (-3.0, 1.0), (0.5, -1.0)] {
        let x0: Vec<f64> = std::iter::once(c0).chain(active.iter().map(|_| l0)).collect();
        let mut simplex = vec![x0.clone()];
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p[i] += 0.5;
            simplex.push(p);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-10)
            .map_err(|e| Error::Optimization { message: e.to_string(), trace: String::new() })?;
        let Ok(res) = Executor::new(&ev, solver).configure(|st| st.max_iters(2000)).run() else {
            continue;
        };
        let st = res.state();
        if let Some(x) = st.get_best_param() {
            let v = st.get_best_cost();
            if v < 1e299 && best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, x.clone()));
            }
        }
    }
    let (neg, x) = best.ok_or_else(|| Error::Optimization {
        message: "GP marginal likelihood is not finite at any start".into(),
        trace: String::new(),
    })?;
    let h = ev.hypers(&x);
    Ok(SigmaTuning {
        c_hat: x[0].exp(),
        sigma_k: h.sigma,
        ell: h.ell,
        residual_sd: sd,
        active: act,
        loglik: -neg,
        fit,
        residuals: s,
    })
}

/// Posterior mean of the GP values at the tuned plug-in parameters (`T × 3`,
/// row `t` paired with `s_{t+1}`).
pub fn plug_in_v(data: &ModelData, tuning: &SigmaTuning) -> Result<DMatrix<f64>> {
    let t_end = tuning.residuals.t_len();
    let params = ModelSpec::yields_only().layout().decode(&tuning.fit.theta)?;
    let k = build_block_k(&data.macros[..t_end], &tuning.hypers())?;
    let (mean, _) = posterior_v(&tuning.residuals, &k, &params.qp.sigma_p_chol)?;
    Ok(DMatrix::from_fn(t_end, N_BLOCKS, |t, j| mean[j * t_end + t]))
}
