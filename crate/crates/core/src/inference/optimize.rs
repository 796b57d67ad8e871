//! Posterior-mode and maximum-likelihood search, curvature at the optimum, and
//! starting values built from the PC panel.

use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::neldermead::NelderMead;
use argmin::solver::quasinewton::BFGS;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::data::ModelData;
use super::likelihood::Likelihood;
use super::mcmc::{ProposalMoments, EIGEN_FLOOR};
use super::prior::Prior;
use crate::error::{Error, Result};
use crate::linalg::{floor_eigenvalues, least_squares, sorted_symmetric_eigen, symmetrize};
use crate::model::{Lambda1Spec, ParamLayout, Params, N_FACTORS};
use crate::termstructure::{AffineTermStructure, QParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub max_iters: u64,
    pub grad_tol: f64,
    /// Nelder–Mead restart when the quasi-Newton run fails or stalls.
    pub simplex_fallback: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { max_iters: 500, grad_tol: 1e-6, simplex_fallback: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub trace: Vec<String>,
}

type Objective<'f> = dyn Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Sync + 'f;

struct Problem<'f> {
    f: &'f Objective<'f>,
    cache: Mutex<Option<(Vec<f64>, f64, Vec<f64>)>>,
    best: Mutex<(f64, Vec<f64>)>,
}

impl<'f> Problem<'f> {
    fn new(f: &'f Objective<'f>, x0: &[f64], f0: f64) -> Self {
        Self { f, cache: Mutex::new(None), best: Mutex::new((f0, x0.to_vec())) }
    }

    fn eval(&self, x: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        if let Some((cx, v, g)) = self.cache.lock().unwrap().as_ref() {
            if cx.as_slice() == x {
                return Ok((*v, g.clone()));
            }
        }
        let xv = DVector::from_column_slice(x);
        let (v, g) = (self.f)(&xv).map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(argmin::core::Error::msg("objective is not finite"));
        }
        let g: Vec<f64> = g.iter().copied().collect();
        *self.cache.lock().unwrap() = Some((x.to_vec(), v, g.clone()));
        let mut best = self.best.lock().unwrap();
        if v < best.0 {
            *best = (v, x.to_vec());
        }
        Ok((v, g))
    }

    fn best(&self) -> (f64, Vec<f64>) {
        self.best.lock().unwrap().clone()
    }
}

impl CostFunction for &Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        self.eval(p).map(|(v, _)| v)
    }
}

impl Gradient for &Problem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        self.eval(p).map(|(_, g)| g)
    }
}

/// Simplex problem: non-finite values become a large penalty.
struct Penalized<'f>(&'f Objective<'f>);

impl CostFunction for Penalized<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(match (self.0)(&DVector::from_column_slice(p)) {
            Ok((v, _)) if v.is_finite() => v,
            _ => 1e300,
        })
    }
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Diagonal curvature from central differences of the gradient.
fn diagonal_curvature(f: &Objective<'_>, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let h = fd_step(x[i]);
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        match (f(&xp), f(&xm)) {
            (Ok((_, gp)), Ok((_, gm))) => (gp[i] - gm[i]) / (2.0 * h),
            _ => f64::NAN,
        }
    })
}

fn bfgs_run(f: &Objective<'_>, x0: &DVector<f64>, f0: f64, opts: &MinimizeOptions, trace: &mut Vec<String>) -> (f64, DVector<f64>, bool) {
    let curv = diagonal_curvature(f, x0);
    let n = x0.len();
    let mut h0 = vec![vec![0.0; n]; n];
    for i in 0..n {
        let c = curv[i].abs();
        h0[i][i] = if c.is_finite() && c > 1e-12 { 1.0 / c } else { 1.0 };
    }
    let problem = Problem::new(f, x0.as_slice(), f0);
    let ls = MoreThuenteLineSearch::new();
    let solver = match BFGS::new(ls).with_tolerance_grad(opts.grad_tol).and_then(|s| s.with_tolerance_cost(1e-14)) {
        Ok(s) => s,
        Err(e) => {
            trace.push(format!("bfgs setup: {e}"));
            return (f0, x0.clone(), false);
        }
    };
    let res = Executor::new(&problem, solver)
        .configure(|s| s.param(x0.as_slice().to_vec()).inv_hessian(h0).max_iters(opts.max_iters))
        .run();
    let converged = match &res {
        Ok(r) => {
            let st = r.state();
            trace.push(format!("bfgs: {} iterations, {:?}", st.get_iter(), st.get_termination_reason()));
            matches!(st.get_termination_reason(), Some(TerminationReason::SolverConverged))
        }
        Err(e) => {
            trace.push(format!("bfgs aborted: {e}"));
            false
        }
    };
    let (v, x) = problem.best();
    (v, DVector::from_vec(x), converged)
}

fn simplex_run(f: &Objective<'_>, x0: &DVector<f64>, opts: &MinimizeOptions, trace: &mut Vec<String>) -> Option<(f64, DVector<f64>)> {
    let curv = diagonal_curvature(f, x0);
    let n = x0.len();
    let mut pts = vec![x0.as_slice().to_vec()];
    for i in 0..n {
        let c = curv[i].abs();
        let step = if c.is_finite() && c > 0.0 { (1.0 / c).sqrt().clamp(1e-4, 1.0) } else { 0.1 };
        let mut p = x0.as_slice().to_vec();
        p[i] += step;
        pts.push(p);
    }
    let solver = NelderMead::new(pts).with_sd_tolerance(1e-12).ok()?;
    match Executor::new(Penalized(f), solver).configure(|s| s.max_iters(opts.max_iters * 20)).run() {
        Ok(r) => {
            let st = r.state();
            trace.push(format!("simplex: {} iterations, {:?}", st.get_iter(), st.get_termination_reason()));
            let x = st.get_best_param()?.clone();
            Some((st.get_best_cost(), DVector::from_vec(x)))
        }
        Err(e) => {
            trace.push(format!("simplex aborted: {e}"));
            None
        }
    }
}

/// Minimizes a smooth objective given as `x ↦ (value, gradient)`.
///
/// BFGS with a Moré–Thuente line search, started from a diagonal inverse
/// Hessian; if it does not converge a Nelder–Mead pass restarts from the best
/// point so far, followed by another BFGS pass.
pub fn minimize(f: &Objective<'_>, x0: &DVector<f64>, opts: &MinimizeOptions) -> Result<Minimum> {
    let mut trace = vec![];
    let f0 = match f(x0) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => v,
        Ok(_) => {
            return Err(Error::Optimization { message: "objective is not finite at the start".into(), trace: trace.join("\n") })
        }
        Err(e) => return Err(Error::Optimization { message: format!("objective fails at the start: {e}"), trace: trace.join("\n") }),
    };
    let (mut v, mut x, mut converged) = bfgs_run(f, x0, f0, opts, &mut trace);
    if !converged && opts.simplex_fallback {
        if let Some((vs, xs)) = simplex_run(f, &x, opts, &mut trace) {
            if vs < v {
                v = vs;
                x = xs;
            }
        }
        let (v2, x2, c2) = bfgs_run(f, &x, v, opts, &mut trace);
        if v2 <= v {
            v = v2;
            x = x2;
        }
        converged = c2;
    }
    let grad_norm = f(&x).map(|(_, g)| g.norm()).unwrap_or(f64::NAN);
    if !converged && grad_norm.is_finite() && grad_norm <= opts.grad_tol * 10.0 {
        converged = true;
    }
    Ok(Minimum { x, value: v, grad_norm, converged, trace })
}

/// Symmetrized central-difference Jacobian of a gradient.
pub fn fd_hessian(grad: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let s = fd_step(x[j]);
        let mut xp = x.clone();
        xp[j] += s;
        let mut xm = x.clone();
        xm[j] -= s;
        let d = (grad(&xp)? - grad(&xm)?) / (2.0 * s);
        h.set_column(j, &d);
    }
    Ok(symmetrize(&h))
}

/// Covariance `H⁻¹` of a cost Hessian, eigenvalue-floored; falls back to the
/// reciprocal diagonal curvatures when the inverse is unusable.
pub fn covariance_from_hessian(h: &DMatrix<f64>) -> DMatrix<f64> {
    let h = symmetrize(h);
    let diag = || {
        DMatrix::from_diagonal(&h.diagonal().map(|c| if c.is_finite() && c > 0.0 { 1.0 / c } else { 1.0 }))
    };
    if h.iter().any(|x| !x.is_finite()) {
        return diag();
    }
    let (vals, vecs) = sorted_symmetric_eigen(&h);
    if vals.iter().all(|&l| l > 0.0) {
        let inv = &vecs * DMatrix::from_diagonal(&vals.map(|l| 1.0 / l)) * vecs.transpose();
        let cov = floor_eigenvalues(&symmetrize(&inv), EIGEN_FLOOR);
        if cov.iter().all(|x| x.is_finite()) && cov.clone().cholesky().is_some() {
            return cov;
        }
    }
    match h.clone().try_inverse() {
        Some(inv) if inv.iter().all(|x| x.is_finite()) => {
            let cov = floor_eigenvalues(&symmetrize(&inv), EIGEN_FLOOR);
            if cov.clone().cholesky().is_some() {
                return cov;
            }
            diag()
        }
        _ => diag(),
    }
}

/// Optimum of the log-likelihood (optionally plus log-prior) of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub theta: DVector<f64>,
    /// Log-likelihood at `theta`.
    pub loglik: f64,
    /// Objective value (log-likelihood plus log-prior if a prior was used).
    pub objective: f64,
    pub cov: DMatrix<f64>,
    pub converged: bool,
    pub trace: Vec<String>,
}

impl ModeFit {
    pub fn proposal(&self) -> ProposalMoments {
        ProposalMoments::new(self.theta.clone(), self.cov.clone())
    }
}

fn objective_fn<'a>(
    lik: &'a Likelihood<'a>,
    prior: Option<&'a Prior>,
    t_end: usize,
) -> impl Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Sync + 'a {
    move |theta: &DVector<f64>| {
        let (mut v, mut g) = lik.loglik_grad(theta, t_end)?;
        if let Some(p) = prior {
            v += p.log_prior(lik.layout, theta);
            g += p.grad_log_prior(lik.layout, theta);
        }
        Ok((-v, -g))
    }
}

/// Mode search over several starts; the best optimum gets a Hessian-based
/// covariance.
pub fn fit_mode(
    lik: &Likelihood<'_>,
    prior: Option<&Prior>,
    t_end: usize,
    starts: &[DVector<f64>],
    opts: &MinimizeOptions,
) -> Result<ModeFit> {
    let f = objective_fn(lik, prior, t_end);
    let mut best: Option<Minimum> = None;
    let mut trace = vec![];
    for (i, s) in starts.iter().enumerate() {
        match minimize(&f, s, opts) {
            Ok(m) => {
                trace.push(format!("start {i}: value {:.6} ({})", -m.value, if m.converged { "converged" } else { "not converged" }));
                trace.extend(m.trace.iter().map(|l| format!("  {l}")));
                if best.as_ref().is_none_or(|b| m.value < b.value) {
                    best = Some(m);
                }
            }
            Err(e) => trace.push(format!("start {i}: {e}")),
        }
    }
    let best = best.ok_or_else(|| Error::Optimization { message: "no start produced a finite objective".into(), trace: trace.join("\n") })?;
    let grad = |x: &DVector<f64>| f(x).map(|(_, g)| g);
    let h = fd_hessian(&grad, &best.x)?;
    let cov = covariance_from_hessian(&h);
    let loglik = lik.loglik(&best.x, t_end)?;
    Ok(ModeFit { theta: best.x, loglik, objective: -best.value, cov, converged: best.converged, trace })
}

/// OLS VAR(1) of the PCs over `0..=t_end`: intercept, slope and residual
/// covariance.
pub fn ols_var(p: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let t = p.nrows();
    let n = p.ncols();
    if t < n + 2 {
        return Err(Error::Data(format!("{t} dates are too few for a VAR in {n} factors")));
    }
    let x = DMatrix::from_fn(t - 1, n + 1, |r, c| if c == 0 { 1.0 } else { p[(r, c - 1)] });
    let mut mu = DVector::zeros(n);
    let mut phi = DMatrix::zeros(n, n);
    let mut resid = DMatrix::zeros(t - 1, n);
    for i in 0..n {
        let y = p.view((1, i), (t - 1, 1)).into_owned().column(0).into_owned();
        let (b, _) = least_squares(&x, &y);
        mu[i] = b[0];
        for j in 0..n {
            phi[(i, j)] = b[j + 1];
        }
        resid.set_column(i, &(&y - &x * &b));
    }
    let omega = resid.transpose() * &resid / (t - 1) as f64;
    Ok((mu, phi, omega))
}

const G_CANDIDATES: [[f64; 3]; 3] = [[0.997, 0.95, 0.85], [0.99, 0.9, 0.7], [0.999, 0.97, 0.9]];

fn spread_roots(mut g: Vec<f64>) -> Option<[f64; 3]> {
    g.sort_by(|a, b| b.total_cmp(a));
    let mut out = [0.0; 3];
    out[0] = g[0].clamp(0.5, 0.9995);
    for i in 1..3 {
        out[i] = g[i].min(out[i - 1] - 1e-2);
    }
    out.iter().all(|x| x.is_finite()).then_some(out)
}

/// Starting points for a mode search: for each candidate `g^Q`, OLS `Σ_P`,
/// the least-squares `k_∞^Q` and `σ_e²`, risk prices from the OLS VAR, unit
/// length-scales and zero macro loadings.
pub fn starting_points(data: &ModelData, layout: &ParamLayout, t_end: usize) -> Result<Vec<DVector<f64>>> {
    let rows = t_end + 1;
    let p = data.panel.p.rows(0, rows).into_owned();
    let y = data.yields.rows(0, rows).into_owned();
    let (mu_ols, phi_ols, omega) = ols_var(&p)?;
    let omega = floor_eigenvalues(&symmetrize(&omega), 1e-14);
    let chol = omega
        .cholesky()
        .ok_or_else(|| Error::NumericalConditioning { context: "OLS residual covariance".into(), cond: f64::INFINITY })?
        .l();

    let mut gs: Vec<[f64; 3]> = vec![];
    let eig = phi_ols.complex_eigenvalues();
    if let Some(g) = spread_roots(eig.iter().map(|c| c.re).collect()) {
        gs.push(g);
    }
    gs.extend(G_CANDIDATES);

    let mut starts = vec![];
    for g in gs {
        let g_q = DVector::from_column_slice(&g);
        let base = QParams { k_inf_q: 0.0, g_q: g_q.clone(), sigma_p_chol: chol.clone(), sigma_e2: 1e-8 };
        let kappa = 1e-3;
        let (Ok(ts0), Ok(ts1)) = (
            AffineTermStructure::new(&base, &data.panel.w, &data.maturities, data.max_maturity()),
            AffineTermStructure::new(&QParams { k_inf_q: kappa, ..base.clone() }, &data.panel.w, &data.maturities, data.max_maturity()),
        ) else {
            continue;
        };
        let l0 = &ts0.loadings;
        let wp = &data.panel.w_perp;
        let d = wp * (&ts1.loadings.a_p - &l0.a_p) / kappa;
        let mut num = 0.0;
        let mut resid = vec![];
        for t in 0..rows {
            let r = wp * (y.row(t).transpose() - &l0.a_p - &l0.b_p * p.row(t).transpose());
            num += d.dot(&r);
            resid.push(r);
        }
        let dd = d.norm_squared() * rows as f64;
        let k = if dd > 0.0 { num / dd } else { 0.0 };
        let ssr: f64 = resid.iter().map(|r| (r - &d * k).norm_squared()).sum();
        let s2 = (ssr / (rows * data.error_dim()) as f64).max(1e-14);
        let qp = QParams { k_inf_q: k, g_q, sigma_p_chol: chol.clone(), sigma_e2: s2 };
        let Ok(ts) = AffineTermStructure::new(&qp, &data.panel.w, &data.maturities, data.max_maturity()) else {
            continue;
        };
        let l = &ts.loadings;
        let mut lambda1 = DMatrix::zeros(N_FACTORS, N_FACTORS);
        let mut lambda0 = DVector::zeros(N_FACTORS);
        match layout.spec.risk.lambda1 {
            Lambda1Spec::Only12 => lambda1[(0, 1)] = phi_ols[(0, 1)] - l.phi_p_q[(0, 1)],
            Lambda1Spec::All => lambda1 = &phi_ols - &l.phi_p_q,
        }
        if layout.spec.risk.lambda0_free {
            lambda0 = &mu_ols - &l.mu_p_q;
        }
        let params = Params { qp, ell: [1.0; N_FACTORS], lambda0, lambda1, phi_pm: DVector::zeros(N_FACTORS) };
        if let Ok(theta) = layout.encode(&params) {
            starts.push(theta);
        }
    }
    if starts.is_empty() {
        return Err(Error::Optimization { message: "no admissible starting point".into(), trace: String::new() });
    }
    Ok(starts)
}

/// Multi-start mode search from [`starting_points`].
pub fn fit_model(lik: &Likelihood<'_>, prior: Option<&Prior>, t_end: usize, opts: &MinimizeOptions) -> Result<ModeFit> {
    let starts = starting_points(lik.data, lik.layout, t_end)?;
    fit_mode(lik, prior, t_end, &starts, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_mode_and_covariance() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let m = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = |x: &DVector<f64>| {
            let d = x - &m;
            Ok((0.5 * d.dot(&(&a * &d)), &a * &d))
        };
        let out = minimize(&f, &DVector::zeros(3), &MinimizeOptions::default()).unwrap();
        assert!(out.converged);
        assert!((&out.x - &m).amax() < 1e-6);
        let grad = |x: &DVector<f64>| f(x).map(|(_, g)| g);
        let cov = covariance_from_hessian(&fd_hessian(&grad, &out.x).unwrap());
        let inv = a.clone().try_inverse().unwrap();
        assert!((&cov - &inv).amax() < 1e-6);
    }

    #[test]
    fn fd_hessian_is_symmetric() {
        let grad = |x: &DVector<f64>| Ok(DVector::from_vec(vec![x[1].cos() * 2.0 * x[0], -x[0] * x[0] * x[1].sin()]));
        let h = fd_hessian(&grad, &DVector::from_vec(vec![0.7, 0.3])).unwrap();
        assert_eq!(h[(0, 1)], h[(1, 0)]);
    }

    #[test]
    fn indefinite_hessian_gives_a_usable_covariance() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let cov = covariance_from_hessian(&h);
        assert!(cov.cholesky().is_some());
    }

    #[test]
    fn non_finite_start_is_an_optimization_error() {
        let f = |_: &DVector<f64>| Ok((f64::NAN, DVector::zeros(1)));
        assert!(matches!(minimize(&f, &DVector::zeros(1), &MinimizeOptions::default()), Err(Error::Optimization { .. })));
    }
}
