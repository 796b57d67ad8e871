//! Metropolis-within-Gibbs kernel: a Gibbs draw of `σ_e²` followed by
//! independence samplers with multivariate-t proposals for the other blocks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::likelihood::{Likelihood, WindowEval};
use super::prior::Prior;
use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::model::IDX_SIGMA_E;

pub const PROPOSAL_DF: f64 = 5.0;
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Lower bound on the inverse-gamma scale in the `σ_e²` Gibbs step.
pub const BETA_FLOOR: f64 = 1e-12;

/// Mean and covariance of `θ` used to build independence proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub df: f64,
}

impl ProposalMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let cov = linalg::floor_eigenvalues(&cov, EIGEN_FLOOR);
        Self { mean, cov, df: PROPOSAL_DF }
    }

    /// Weighted particle mean and covariance.
    pub fn from_particles(thetas: &[DVector<f64>], weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if thetas.is_empty() || !(total > 0.0) {
            return Err(Error::Degeneracy("cannot form proposal moments from zero total weight".into()));
        }
        let d = thetas[0].len();
        let mut mean = DVector::zeros(d);
        for (t, &w) in thetas.iter().zip(weights) {
            mean += t * (w / total);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (t, &w) in thetas.iter().zip(weights) {
            let c = t - &mean;
            cov += &c * c.transpose() * (w / total);
        }
        Ok(Self::new(mean, cov))
    }

    /// Proposal for the coordinates `idx` conditional on all the others.
    pub fn block(&self, idx: &[usize]) -> Result<BlockProposal> {
        let d = self.mean.len();
        let other: Vec<usize> = (0..d).filter(|i| !idx.contains(i)).collect();
        let sel = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |r, c| self.cov[(rows[r], cols[c])]);
        let c_bb = sel(idx, idx);
        let (reg, cond_cov) = if other.is_empty() {
            (DMatrix::zeros(idx.len(), 0), c_bb)
        } else {
            let c_bo = sel(idx, &other);
            let c_oo = sel(&other, &other);
            let chol = linalg::cholesky_jittered(&c_oo, "proposal covariance")?;
            let reg = chol.solve(&c_bo.transpose()).transpose();
            let cond = &c_bb - &reg * c_bo.transpose();
            (reg, cond)
        };
        let cond_cov = linalg::floor_eigenvalues(&cond_cov, EIGEN_FLOOR);
        let chol = linalg::cholesky_jittered(&cond_cov, "conditional proposal covariance")?;
        let log_det = linalg::chol_log_det(&chol);
        Ok(BlockProposal {
            idx: idx.to_vec(),
            mean_b: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i])),
            mean_o: DVector::from_iterator(other.len(), other.iter().map(|&i| self.mean[i])),
            other,
            reg,
            chol_l: chol.l(),
            log_det,
            df: self.df,
        })
    }
}

/// Multivariate-t proposal for one block given the rest of `θ`.
#[derive(Debug, Clone)]
pub struct BlockProposal {
    pub idx: Vec<usize>,
    pub other: Vec<usize>,
    mean_b: DVector<f64>,
    mean_o: DVector<f64>,
    reg: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_det: f64,
    df: f64,
}

impl BlockProposal {
    pub fn location(&self, theta: &DVector<f64>) -> DVector<f64> {
        if self.other.is_empty() {
            return self.mean_b.clone();
        }
        let xo = DVector::from_iterator(self.other.len(), self.other.iter().map(|&i| theta[i]));
        &self.mean_b + &self.reg * (xo - &self.mean_o)
    }

    pub fn sample<R: Rng + ?Sized>(&self, theta: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let loc = self.location(theta);
        let z = DVector::from_fn(self.idx.len(), |_, _| StandardNormal.sample(rng));
        let chi: f64 = ChiSquared::new(self.df).expect("positive df").sample(rng);
        loc + &self.chol_l * z * (self.df / chi).sqrt()
    }

    pub fn log_density(&self, xb: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let d = self.idx.len() as f64;
        let nu = self.df;
        let diff = xb - self.location(theta);
        let z = match self.chol_l.solve_lower_triangular(&diff) {
            Some(z) => z,
            None => return f64::NEG_INFINITY,
        };
        ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu) - 0.5 * d * (nu.ln() + std::f64::consts::PI.ln())
            - 0.5 * self.log_det
            - 0.5 * (nu + d) * (z.norm_squared() / nu).ln_1p()
    }

    fn read(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.idx.len(), self.idx.iter().map(|&i| theta[i]))
    }

    fn write(&self, theta: &mut DVector<f64>, xb: &DVector<f64>) {
        for (k, &i) in self.idx.iter().enumerate() {
            theta[i] = xb[k];
        }
    }
}

/// Independence Metropolis–Hastings update of one block. Returns whether the
/// proposal was accepted and whether the current point had zero proposal density.
pub fn independence_mh<R, F>(
    theta: &mut DVector<f64>,
    log_target: &mut f64,
    proposal: &BlockProposal,
    rng: &mut R,
    mut target: F,
) -> (bool, bool)
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>) -> Option<f64>,
{
    let current = proposal.read(theta);
    let q_cur = proposal.log_density(&current, theta);
    let xb = proposal.sample(theta, rng);
    let u: f64 = rng.random();
    if !q_cur.is_finite() {
        return (false, true);
    }
    let q_new = proposal.log_density(&xb, theta);
    let mut cand = theta.clone();
    proposal.write(&mut cand, &xb);
    let Some(lt) = target(&cand).filter(|v| v.is_finite()) else {
        return (false, false);
    };
    let log_ratio = lt - *log_target + q_cur - q_new;
    if u.ln() < log_ratio {
        *theta = cand;
        *log_target = lt;
        (true, false)
    } else {
        (false, false)
    }
}

/// Draw from `InvGamma(shape, scale)`.
pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    scale / g
}

/// Counting dimension in the `σ_e²` full conditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaCount {
    /// `J − N`, the measurement-error dimension.
    ErrorDim,
    /// `J − R` with `R = 1`, kept for compatibility.
    JMinusR,
}

/// Acceptance statistics per block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: Vec<u64>,
    pub accepted: Vec<u64>,
    pub zero_density: u64,
}

impl MoveStats {
    pub fn merge(&mut self, other: &MoveStats) {
        if self.proposed.len() < other.proposed.len() {
            self.proposed.resize(other.proposed.len(), 0);
            self.accepted.resize(other.accepted.len(), 0);
        }
        for i in 0..other.proposed.len() {
            self.proposed[i] += other.proposed[i];
            self.accepted[i] += other.accepted[i];
        }
        self.zero_density += other.zero_density;
    }

    pub fn acceptance(&self) -> Vec<f64> {
        self.proposed.iter().zip(&self.accepted).map(|(&p, &a)| if p == 0 { 0.0 } else { a as f64 / p as f64 }).collect()
    }
}

/// One chain position with its cached likelihood pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: DVector<f64>,
    pub eval: WindowEval,
    pub log_target: f64,
}

/// Tempered posterior kernel at window end `t` and exponent `φ`.
pub struct Kernel<'a> {
    pub lik: &'a Likelihood<'a>,
    pub prior: &'a Prior,
    pub blocks: Vec<BlockProposal>,
    pub t_end: usize,
    pub phi: f64,
    pub sigma_count: SigmaCount,
}

impl<'a> Kernel<'a> {
    pub fn new(
        lik: &'a Likelihood<'a>,
        prior: &'a Prior,
        moments: &ProposalMoments,
        t_end: usize,
        phi: f64,
        sigma_count: SigmaCount,
    ) -> Result<Self> {
        if !(phi > 0.0 && phi <= 1.0) {
            return Err(Error::Domain(format!("tempering exponent {phi} outside (0, 1]")));
        }
        let blocks = lik.layout.mh_blocks().iter().map(|b| moments.block(b)).collect::<Result<Vec<_>>>()?;
        Ok(Self { lik, prior, blocks, t_end, phi, sigma_count })
    }

    pub fn log_target(&self, theta: &DVector<f64>) -> Option<(f64, WindowEval)> {
        let eval = self.lik.eval(theta, self.t_end).ok()?;
        let lt = self.prior.log_prior(self.lik.layout, theta) + eval.tempered(self.phi);
        lt.is_finite().then_some((lt, eval))
    }

    pub fn state(&self, theta: DVector<f64>) -> Option<ChainState> {
        let (log_target, eval) = self.log_target(&theta)?;
        Some(ChainState { theta, eval, log_target })
    }

    /// Full conditional of `σ_e²` under the tempered target.
    pub fn gibbs_sigma<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R) {
        let e = &state.eval;
        let dim = match self.sigma_count {
            SigmaCount::ErrorDim => e.dim as f64,
            SigmaCount::JMinusR => (e.dim + self.lik.data.panel.n_factors() - 1) as f64,
        };
        let alpha = self.prior.alpha0 + dim * (e.n_prev as f64 + self.phi);
        let beta = (self.prior.beta0 + e.ssr_prev + self.phi * e.ssr_new).max(BETA_FLOOR);
        let s2 = inv_gamma(0.5 * alpha, 0.5 * beta, rng);
        state.theta[IDX_SIGMA_E] = s2.ln();
        state.eval = e.with_sigma_e2(s2);
        state.log_target = self.prior.log_prior(self.lik.layout, &state.theta) + state.eval.tempered(self.phi);
    }

    /// One sweep: Gibbs for `σ_e²`, then each Metropolis block.
    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R, stats: &mut MoveStats) {
        if stats.proposed.len() < self.blocks.len() {
            stats.proposed.resize(self.blocks.len(), 0);
            stats.accepted.resize(self.blocks.len(), 0);
        }
        self.gibbs_sigma(state, rng);
        for (b, prop) in self.blocks.iter().enumerate() {
            let mut new_eval = None;
            let (acc, zero) = independence_mh(&mut state.theta, &mut state.log_target, prop, rng, |cand| {
                let (lt, ev) = self.log_target(cand)?;
                new_eval = Some(ev);
                Some(lt)
            });
            stats.proposed[b] += 1;
            if acc {
                stats.accepted[b] += 1;
                state.eval = new_eval.expect("accepted proposal has an evaluation");
            }
            if zero {
                stats.zero_density += 1;
            }
        }
    }
}

/// Draws kept by [`run_chain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub draws: Vec<DVector<f64>>,
    pub stats: MoveStats,
}

impl ChainOutput {
    /// Mean and standard deviation of every coordinate.
    pub fn moments(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.draws.len() as f64;
        let d = self.draws[0].len();
        let mean = self.draws.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n;
        let var = self.draws.iter().fold(DVector::zeros(d), |acc, x| acc + (x - &mean).map(|v| v * v)) / (n - 1.0);
        (mean, var.map(f64::sqrt))
    }

    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|x| x[i]).collect()
    }
}

/// Runs `burn_in + n_draws` sweeps from `start` and keeps the last `n_draws`.
pub fn run_chain<R: Rng + ?Sized>(kernel: &Kernel<'_>, start: DVector<f64>, n_draws: usize, burn_in: usize, rng: &mut R) -> Result<ChainOutput> {
    let mut state = kernel
        .state(start)
        .ok_or_else(|| Error::Domain("chain start has zero target density".into()))?;
    let mut stats = MoveStats::default();
    let mut draws = Vec::with_capacity(n_draws);
    for i in 0..burn_in + n_draws {
        kernel.sweep(&mut state, rng, &mut stats);
        if i >= burn_in {
            draws.push(state.theta.clone());
        }
    }
    Ok(ChainOutput { draws, stats })
}

/// Monte Carlo standard error of a sample mean by non-overlapping batch means.
pub fn batch_means_se(x: &[f64], n_batches: usize) -> f64 {
    let b = n_batches.max(2).min(x.len());
    let size = x.len() / b;
    let means: Vec<f64> = (0..b).map(|k| x[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Log-density of a Gaussian at `x` (used by tests and diagnostics).
pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean).powi(2) / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn t_density_integrates_to_one_in_one_dimension() {
        let m = ProposalMoments::new(DVector::from_vec(vec![0.3]), DMatrix::from_element(1, 1, 0.25));
        let b = m.block(&[0]).unwrap();
        let theta = DVector::from_vec(vec![0.0]);
        let n = 40_000;
        let (lo, hi) = (-60.0, 60.0);
        let dx = (hi - lo) / n as f64;
        let total: f64 = (0..n).map(|i| b.log_density(&DVector::from_vec(vec![lo + (i as f64 + 0.5) * dx]), &theta).exp() * dx).sum();
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn identical_forward_and_backward_draws_accept_on_posterior_ratio() {
        // With q(x) = q(x'), the log acceptance ratio is the target difference.
        let m = ProposalMoments::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 1.0));
        let b = m.block(&[0]).unwrap();
        let theta = DVector::from_vec(vec![0.7]);
        let mirrored = DVector::from_vec(vec![-0.7]);
        assert!((b.log_density(&theta, &theta) - b.log_density(&mirrored, &theta)).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_gibbs_is_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s2 = inv_gamma(0.5 * 10.0, 0.5 * BETA_FLOOR, &mut rng);
        assert!(s2 > 0.0 && s2 < 1e-10);
    }

    #[test]
    fn conjugate_normal_posterior_is_invariant() {
        // x ~ N(0, 4) prior, y = 1.3 observed with unit noise variance.
        let post_var = 1.0 / (1.0 / 4.0 + 1.0);
        let post_mean = post_var * 1.3;
        let target = |th: &DVector<f64>| Some(normal_log_density(th[0], 0.0, 4.0) + normal_log_density(1.3, th[0], 1.0));
        let m = ProposalMoments::new(DVector::from_vec(vec![0.5]), DMatrix::from_element(1, 1, 1.5));
        let b = m.block(&[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut theta = DVector::from_vec(vec![post_mean]);
        let mut lt = target(&theta).unwrap();
        let mut draws = Vec::new();
        for i in 0..60_000 {
            independence_mh(&mut theta, &mut lt, &b, &mut rng, target);
            if i % 6 == 0 {
                draws.push(theta[0]);
            }
        }
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let dist = Normal::new(post_mean, post_var.sqrt()).unwrap();
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = dist.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // KS critical value at p = 0.01
        assert!(d < 1.63 / n.sqrt(), "KS distance {d}");
    }
}
