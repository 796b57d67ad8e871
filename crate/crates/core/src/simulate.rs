//! Synthetic panels drawn from the model itself, with the latent truth kept
//! for recovery checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpkernel::{build_block_k, KernelHypers, N_BLOCKS};
use crate::linalg::cholesky_kernel;
use crate::model::{MacroForm, ModelSpec, Params, N_FACTORS};
use crate::rng::stream;
use crate::termstructure::{compute_latent_loadings, fix_sign, null_space_basis, AffineTermStructure};
use crate::gpou::build_p_dynamics_general;
use crate::linearmacro::linear_dynamics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub spec: ModelSpec,
    pub params: Params,
    pub sigma_k: [f64; N_BLOCKS],
    /// Number of dates `T + 1`.
    pub n_dates: usize,
    pub maturities: Vec<usize>,
    /// AR(1) coefficient of the unit-variance macro series.
    pub macro_rho: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulated {
    /// `(T+1) × J`, monthly decimal yields.
    pub yields: DMatrix<f64>,
    pub macros: Vec<f64>,
    /// PCs with the simulation loadings `w` (exactly `W y_t`).
    pub pcs: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// `T × 3`; row `t − 1` is `v_t`, driven by `M_{t−1}`.
    pub v: DMatrix<f64>,
    /// `T × 3` VAR residuals `s_t = v_t + Σ_P ε_t`.
    pub s: DMatrix<f64>,
}

/// Parameters used as ground truth in tests and the `simulate` command.
pub fn reference_params() -> Params {
    let chol = DMatrix::from_row_slice(3, 3, &[6e-4, 0.0, 0.0, -5e-5, 2.5e-4, 0.0, 2e-5, -3e-5, 1.2e-4]);
    let mut lambda1 = DMatrix::zeros(N_FACTORS, N_FACTORS);
    lambda1[(0, 1)] = 0.05;
    Params {
        qp: crate::termstructure::QParams {
            k_inf_q: 2e-5,
            g_q: DVector::from_vec(vec![0.995, 0.95, 0.85]),
            sigma_p_chol: chol,
            sigma_e2: 5e-5_f64.powi(2),
        },
        ell: [1.0; N_FACTORS],
        lambda0: DVector::zeros(N_FACTORS),
        lambda1,
        phi_pm: DVector::zeros(N_FACTORS),
    }
}

/// Rows of `W`: leading left singular vectors of the latent loadings.
pub fn loadings_basis(params: &Params, maturities: &[usize]) -> Result<DMatrix<f64>> {
    let (_, b_x) = compute_latent_loadings(
        params.qp.k_inf_q,
        &params.qp.g_q,
        &DMatrix::identity(N_FACTORS, N_FACTORS),
        maturities,
    )?;
    let svd = b_x.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::DegeneratePanel("SVD of loadings failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut w = DMatrix::zeros(N_FACTORS, maturities.len());
    for (r, &c) in order.iter().take(N_FACTORS).enumerate() {
        let mut row = u.column(c).transpose();
        fix_sign(&mut row);
        w.set_row(r, &row);
    }
    Ok(w)
}

pub fn simulate(cfg: &SimConfig) -> Result<Simulated> {
    if cfg.n_dates < 2 {
        return Err(Error::Spec("simulation needs at least two dates".into()));
    }
    if !(cfg.macro_rho.abs() < 1.0) {
        return Err(Error::Spec("macro AR coefficient must lie in (−1, 1)".into()));
    }
    let mut rng = stream(cfg.seed, 0, 0);
    let n = cfg.n_dates;
    let t = n - 1;
    let w = loadings_basis(&cfg.params, &cfg.maturities)?;
    let w_perp = null_space_basis(&w)?;
    let n_max = *cfg.maturities.last().unwrap();
    let ts = AffineTermStructure::new(&cfg.params.qp, &w, &cfg.maturities, n_max)?;
    let l = &ts.loadings;
    let layout = cfg.spec.layout();
    let (pd, phi_pm) = match cfg.spec.form {
        MacroForm::Linear => {
            linear_dynamics(l, &cfg.params.qp.sigma_p_chol, &layout.lambda_gamma(&cfg.params), &cfg.spec.mask)?
        }
        _ => (
            build_p_dynamics_general(&cfg.params.qp, l, &cfg.params.lambda0, &cfg.params.lambda1),
            DVector::zeros(N_FACTORS),
        ),
    };

    let sd = (1.0 - cfg.macro_rho * cfg.macro_rho).sqrt();
    let mut macros = Vec::with_capacity(n);
    let mut m: f64 = rng.sample(StandardNormal);
    macros.push(m);
    for _ in 1..n {
        let e: f64 = rng.sample(StandardNormal);
        m = cfg.macro_rho * m + sd * e;
        macros.push(m);
    }

    let mut v = DMatrix::zeros(t, N_BLOCKS);
    if cfg.spec.form == MacroForm::Gp {
        let mut active = [false; N_BLOCKS];
        for j in 0..N_BLOCKS {
            active[j] = cfg.spec.mask[j];
        }
        let h = KernelHypers { ell: cfg.params.ell, sigma: cfg.sigma_k, active };
        let k = build_block_k(&macros[..t], &h)?;
        for j in 0..N_BLOCKS {
            if h.is_on(j) {
                let c = cholesky_kernel(&k.blocks[j], "simulated GP covariance")?;
                let z = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
                v.set_column(j, &(c.l() * z));
            }
        }
    }

    let ident = DMatrix::<f64>::identity(N_FACTORS, N_FACTORS);
    let mut p_prev = (&ident - &pd.phi).try_inverse().map(|inv| inv * &pd.mu).unwrap_or_else(|| DVector::zeros(N_FACTORS));
    let mut pcs = DMatrix::zeros(n, N_FACTORS);
    pcs.set_row(0, &p_prev.transpose());
    let mut s = DMatrix::zeros(t, N_BLOCKS);
    for i in 1..n {
        let eps = DVector::from_fn(N_FACTORS, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s_i = v.row(i - 1).transpose() + &pd.sigma_p_chol * eps;
        let p_i = &pd.mu + &pd.phi * &p_prev + &phi_pm * macros[i - 1] + &s_i;
        s.set_row(i - 1, &s_i.transpose());
        pcs.set_row(i, &p_i.transpose());
        p_prev = p_i;
    }

    let j = cfg.maturities.len();
    let se = cfg.params.qp.sigma_e2.sqrt();
    let mut yields = DMatrix::zeros(n, j);
    for i in 0..n {
        let e = DVector::from_fn(j - N_FACTORS, |_, _| se * rng.sample::<f64, _>(StandardNormal));
        let y = &l.a_p + &l.b_p * pcs.row(i).transpose() + w_perp.transpose() * e;
        yields.set_row(i, &y.transpose());
    }
    Ok(Simulated { yields, macros, pcs, w, v, s })
}
