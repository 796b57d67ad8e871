//! Iterated batch importance sampling with hybrid adaptive tempering.
//!
//! Each new observation reweights the particles by its predictive density. If
//! the effective sample size would fall below `α·N_θ`, the update is split into
//! tempered pieces: bisection picks the exponent that brings the ESS to the
//! trigger, the particles are resampled and jittered by MCMC at that exponent,
//! and the loop continues until the exponent reaches one.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::likelihood::{Likelihood, WindowEval};
use super::mcmc::{ChainState, Kernel, MoveStats, ProposalMoments, SigmaCount};
use super::prior::Prior;
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::model::ParamLayout;
use crate::rng::{StreamClock, SERIAL_SLOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resampling {
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbisConfig {
    pub n_particles: usize,
    /// Resample-move trigger as a fraction of `N_θ`.
    pub alpha: f64,
    pub jitter_steps: usize,
    pub resampling: Resampling,
    /// Bisection stops once `|ESS − trigger| ≤ tol·N_θ`.
    pub bisection_tol: f64,
    pub max_bisection: usize,
    /// Step taken when bisection cannot bracket the trigger.
    pub fallback_step: f64,
    pub sigma_count: SigmaCount,
    pub seed: u64,
}

impl Default for IbisConfig {
    fn default() -> Self {
        Self {
            n_particles: 2000,
            alpha: 0.7,
            jitter_steps: 5,
            resampling: Resampling::Multinomial,
            bisection_tol: 0.01,
            max_bisection: 50,
            fallback_step: 1e-3,
            sigma_count: SigmaCount::ErrorDim,
            seed: 1,
        }
    }
}

/// Tempering exponents used while assimilating date `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperingRecord {
    pub t: usize,
    pub phis: Vec<f64>,
    pub fallbacks: usize,
    pub log_m: f64,
    pub ess: f64,
}

/// Weighted particle approximation of the posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSystem {
    pub thetas: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    pub log_evidence: f64,
    /// Last assimilated date.
    pub t_current: Option<usize>,
    pub history: Vec<TemperingRecord>,
    pub clock: StreamClock,
    pub stats: MoveStats,
}

/// `(Σω)² / Σω²`.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Domain("weights must be non-negative".into()));
    }
    if !(s > 0.0) {
        return Err(Error::Degeneracy("all particle weights are zero".into()));
    }
    Ok(s * s / s2)
}

/// ESS of unnormalized log-weights; zero when every weight vanishes.
pub fn ess_log(log_w: &[f64]) -> f64 {
    let a = log_sum_exp(log_w);
    if !a.is_finite() {
        return 0.0;
    }
    let b = log_sum_exp(&log_w.iter().map(|l| 2.0 * l).collect::<Vec<_>>());
    (2.0 * a - b).exp()
}

/// `log m_t = log(Σ ω_i u_i / Σ ω_i)` with the weights before the update.
pub fn evidence_increment(log_w: &[f64], log_u: &[f64]) -> f64 {
    let num: Vec<f64> = log_w.iter().zip(log_u).map(|(w, u)| shifted(*w, *u, 1.0)).collect();
    log_sum_exp(&num) - log_sum_exp(log_w)
}

/// `w + d·u`, treating `0·(−∞)` as zero.
fn shifted(w: f64, u: f64, d: f64) -> f64 {
    if d == 0.0 {
        w
    } else {
        w + d * u
    }
}

fn reweighted(log_w: &[f64], log_u: &[f64], d: f64) -> Vec<f64> {
    log_w.iter().zip(log_u).map(|(w, u)| shifted(*w, *u, d)).collect()
}

/// Exponent `φ ∈ (φ', 1]` whose tempered weights have ESS close to `trigger`.
/// The flag is set when bisection found no bracket and a fixed step was taken.
pub fn find_phi(log_w: &[f64], log_u: &[f64], phi_prev: f64, trigger: f64, cfg: &IbisConfig) -> (f64, bool) {
    let tol = cfg.bisection_tol * log_w.len() as f64;
    let f = |phi: f64| ess_log(&reweighted(log_w, log_u, phi - phi_prev));
    if f(1.0) >= trigger {
        return (1.0, false);
    }
    let (mut lo, mut hi) = (phi_prev, 1.0);
    for _ in 0..cfg.max_bisection {
        let mid = 0.5 * (lo + hi);
        let e = f(mid);
        if (e - trigger).abs() <= tol {
            return (mid, false);
        }
        if e >= trigger {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > phi_prev {
        return (lo, false);
    }
    // No bracket on the linear grid: the increments are so spread out that
    // even φ' + 2^-50 undershoots. Search the step size on a log scale.
    let floor = f64::MIN_POSITIVE.max(phi_prev * 1e-15);
    let (mut lo_l, mut hi_l) = (floor.ln(), (hi - phi_prev).ln());
    if f(phi_prev + lo_l.exp()) >= trigger {
        for _ in 0..cfg.max_bisection {
            let mid = 0.5 * (lo_l + hi_l);
            let e = f(phi_prev + mid.exp());
            if (e - trigger).abs() <= tol {
                return (phi_prev + mid.exp(), false);
            }
            if e >= trigger {
                lo_l = mid;
            } else {
                hi_l = mid;
            }
        }
        (phi_prev + lo_l.exp(), false)
    } else {
        log::warn!("tempering bisection failed to bracket the ESS trigger; stepping φ by {}", cfg.fallback_step);
        ((phi_prev + cfg.fallback_step).min(1.0), true)
    }
}

/// Indices drawn with probabilities proportional to `exp(log_w)`.
pub fn resample<R: Rng + ?Sized>(log_w: &[f64], scheme: Resampling, rng: &mut R) -> Result<Vec<usize>> {
    let n = log_w.len();
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(Error::Degeneracy("cannot resample: all weights are zero".into()));
    }
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for l in log_w {
        acc += (l - lse).exp();
        cdf.push(acc);
    }
    let total = acc;
    let pick = |u: f64, cdf: &[f64]| cdf.partition_point(|&c| c <= u * total).min(n - 1);
    Ok(match scheme {
        Resampling::Multinomial => (0..n).map(|_| pick(rng.random::<f64>(), &cdf)).collect(),
        Resampling::Systematic => {
            let u0: f64 = rng.random();
            (0..n).map(|i| pick((i as f64 + u0) / n as f64, &cdf)).collect()
        }
    })
}

impl ParticleSystem {
    /// Independent prior draws with equal weights.
    pub fn from_prior(layout: &ParamLayout, prior: &Prior, n: usize, seed: u64) -> Self {
        let clock = StreamClock::new(seed);
        let thetas = (0..n)
            .into_par_iter()
            .map(|i| prior.sample(layout, &mut clock.stream(0, i as u32)))
            .collect();
        Self::from_thetas(thetas, clock)
    }

    /// Prior draws restricted to the set where the date-0 likelihood is
    /// finite, by rejection on each particle's own stream. The posterior is
    /// unchanged; the log evidence starts at the log acceptance rate so that it
    /// still refers to the unrestricted prior.
    pub fn from_prior_on_support(lik: &Likelihood<'_>, prior: &Prior, n: usize, seed: u64, max_tries: usize) -> Result<Self> {
        let clock = StreamClock::new(seed);
        let drawn: Vec<Option<(DVector<f64>, usize)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = clock.stream(0, i as u32);
                (1..=max_tries).find_map(|k| {
                    let th = prior.sample(lik.layout, &mut rng);
                    let ok = lik.eval(&th, 0).is_ok_and(|e| e.incremental().is_finite());
                    ok.then_some((th, k))
                })
            })
            .collect();
        if drawn.iter().any(Option::is_none) {
            return Err(Error::Degeneracy(format!("no prior draw with a finite likelihood in {max_tries} tries")));
        }
        let (thetas, tries): (Vec<_>, Vec<_>) = drawn.into_iter().map(Option::unwrap).unzip();
        let total: usize = tries.iter().sum();
        let mut ps = Self::from_thetas(thetas, clock);
        ps.log_evidence = (n as f64 / total as f64).ln();
        Ok(ps)
    }

    pub fn from_thetas(thetas: Vec<DVector<f64>>, clock: StreamClock) -> Self {
        let n = thetas.len();
        Self {
            thetas,
            log_weights: vec![0.0; n],
            log_evidence: 0.0,
            t_current: None,
            history: vec![],
            clock,
            stats: MoveStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    /// Normalized weights.
    pub fn weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.log_weights);
        self.log_weights.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn ess(&self) -> f64 {
        ess_log(&self.log_weights)
    }

    /// Weighted mean and standard deviation of every coordinate.
    pub fn moments(&self) -> (DVector<f64>, DVector<f64>) {
        let w = self.weights();
        let d = self.thetas[0].len();
        let mut mean = DVector::zeros(d);
        for (t, wi) in self.thetas.iter().zip(&w) {
            mean += t * *wi;
        }
        let mut var = DVector::zeros(d);
        for (t, wi) in self.thetas.iter().zip(&w) {
            var += (t - &mean).map(|x| x * x) * *wi;
        }
        (mean, var.map(f64::sqrt))
    }

    /// Assimilates date `t` (which must follow `t_current`).
    pub fn step(&mut self, lik: &Likelihood<'_>, prior: &Prior, cfg: &IbisConfig, t: usize) -> Result<()> {
        let expected = self.t_current.map_or(0, |c| c + 1);
        if t != expected {
            return Err(Error::Domain(format!("IBIS expected date {expected}, got {t}")));
        }
        let n = self.len();
        let mut evals: Vec<Option<WindowEval>> = self.thetas.par_iter().map(|th| lik.eval(th, t).ok()).collect();
        let mut log_u: Vec<f64> = evals.iter().map(|e| incremental(e.as_ref())).collect();
        if !evidence_increment(&self.log_weights, &log_u).is_finite() {
            return Err(Error::Degeneracy(format!("every particle has zero likelihood at date {t}")));
        }

        let trigger = cfg.alpha * n as f64;
        let mut phi_prev = 0.0;
        // log m_t accumulates the normalizing-constant ratio of every stage
        let mut record = TemperingRecord { t, phis: vec![], fallbacks: 0, log_m: 0.0, ess: 0.0 };
        loop {
            let full = reweighted(&self.log_weights, &log_u, 1.0 - phi_prev);
            if ess_log(&full) >= trigger {
                record.log_m += log_sum_exp(&full) - log_sum_exp(&self.log_weights);
                self.log_weights = full;
                break;
            }
            let (phi, fallback) = find_phi(&self.log_weights, &log_u, phi_prev, trigger, cfg);
            record.fallbacks += fallback as usize;
            let next = reweighted(&self.log_weights, &log_u, phi - phi_prev);
            record.log_m += log_sum_exp(&next) - log_sum_exp(&self.log_weights);
            self.log_weights = next;
            let epoch = self.clock.tick();
            let idx = resample(&self.log_weights, cfg.resampling, &mut self.clock.stream(epoch, SERIAL_SLOT))?;
            self.thetas = idx.iter().map(|&i| self.thetas[i].clone()).collect();
            evals = idx.iter().map(|&i| evals[i]).collect();
            self.log_weights = vec![0.0; n];
            let moments = ProposalMoments::from_particles(&self.thetas, &vec![1.0; n])?;
            let kernel = Kernel::new(lik, prior, &moments, t, phi, cfg.sigma_count)?;
            let clock = self.clock;
            let moved: Vec<(ChainState, MoveStats)> = self
                .thetas
                .par_iter()
                .zip(evals.par_iter())
                .enumerate()
                .map(|(i, (th, ev))| {
                    let ev = ev.expect("resampled particles have positive weight");
                    let lt = prior.log_prior(lik.layout, th) + ev.tempered(phi);
                    let mut state = ChainState { theta: th.clone(), eval: ev, log_target: lt };
                    let mut rng = clock.stream(epoch, i as u32);
                    let mut stats = MoveStats::default();
                    for _ in 0..cfg.jitter_steps {
                        kernel.sweep(&mut state, &mut rng, &mut stats);
                    }
                    (state, stats)
                })
                .collect();
            for (i, (state, stats)) in moved.into_iter().enumerate() {
                self.thetas[i] = state.theta;
                evals[i] = Some(state.eval);
                log_u[i] = state.eval.incremental();
                self.stats.merge(&stats);
            }
            record.phis.push(phi);
            phi_prev = phi;
            if phi >= 1.0 {
                break;
            }
        }
        if !record.log_m.is_finite() {
            return Err(Error::Degeneracy(format!("evidence increment at date {t} is not finite")));
        }
        self.log_evidence += record.log_m;
        record.ess = self.ess();
        self.history.push(record);
        self.t_current = Some(t);
        Ok(())
    }

    /// Runs [`step`](Self::step) for dates `from..=to`.
    pub fn run(&mut self, lik: &Likelihood<'_>, prior: &Prior, cfg: &IbisConfig, from: usize, to: usize) -> Result<()> {
        for t in from..=to {
            self.step(lik, prior, cfg, t)?;
        }
        Ok(())
    }
}

fn incremental(e: Option<&WindowEval>) -> f64 {
    match e.map(|e| e.incremental()) {
        Some(u) if u.is_finite() => u,
        _ => f64::NEG_INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ess_cases() {
        assert_eq!(ess(&[0.25; 4]).unwrap(), 4.0);
        assert_eq!(ess(&[0.0, 3.0, 0.0]).unwrap(), 1.0);
        assert!((ess(&[1.0, 1.0, 2.0]).unwrap() - 16.0 / 6.0).abs() < 1e-15);
        assert!(matches!(ess(&[0.0, 0.0]), Err(Error::Degeneracy(_))));
        assert!((ess_log(&[0.0, 0.0, 2f64.ln()]) - 16.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn evidence_increment_cases() {
        let lu = [3f64.ln(); 3];
        assert!((evidence_increment(&[0.0, 1.0, -2.0], &lu) - 3f64.ln()).abs() < 1e-14);
        let w = [0.0, 3f64.ln()];
        let u = [2f64.ln(), 4f64.ln()];
        assert!((evidence_increment(&w, &u) - 3.5f64.ln()).abs() < 1e-14);
        let w2 = [2f64.ln(), 6f64.ln()];
        assert!((evidence_increment(&w2, &u) - 3.5f64.ln()).abs() < 1e-14);
        assert_eq!(evidence_increment(&w, &[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
    }

    #[test]
    fn two_particle_boundary_case() {
        // weights (1,1), incremental (4,1): ESS = 25/17 ≈ 1.47 ≥ 0.7·2
        let lw = [0.0, 0.0];
        let lu = [4f64.ln(), 0.0];
        let e = ess_log(&reweighted(&lw, &lu, 1.0));
        assert!((e - 25.0 / 17.0).abs() < 1e-12);
        assert!(e >= 0.7 * 2.0);
    }

    #[test]
    fn bisection_meets_trigger() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 500;
        let lw = vec![0.0; n];
        let lu: Vec<f64> = (0..n).map(|_| -50.0 * rng.random::<f64>()).collect();
        let cfg = IbisConfig::default();
        let trigger = 0.7 * n as f64;
        let (phi, fb) = find_phi(&lw, &lu, 0.0, trigger, &cfg);
        assert!(!fb && phi > 0.0 && phi < 1.0);
        let e = ess_log(&reweighted(&lw, &lu, phi));
        assert!((e - trigger).abs() <= 0.01 * n as f64);
    }

    #[test]
    fn bisection_brackets_extreme_spreads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let lw = vec![0.0; n];
        let lu: Vec<f64> = (0..n).map(|_| -1e20 * rng.random::<f64>()).collect();
        let cfg = IbisConfig::default();
        let trigger = 0.7 * n as f64;
        let (phi, fb) = find_phi(&lw, &lu, 0.0, trigger, &cfg);
        assert!(!fb && phi > 0.0 && phi < 1e-15, "{phi}");
        let e = ess_log(&reweighted(&lw, &lu, phi));
        assert!(e >= trigger - 0.01 * n as f64, "{e}");
    }

    #[test]
    fn resampling_counts_follow_weights() {
        // chi-square over 1e4 replications of a three-particle system
        let lw = [0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        for scheme in [Resampling::Multinomial, Resampling::Systematic] {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mut counts = [0.0; 3];
            let reps = 10_000;
            for _ in 0..reps {
                for i in resample(&lw, scheme, &mut rng).unwrap() {
                    counts[i] += 1.0;
                }
            }
            let total = 3.0 * reps as f64;
            let chi2: f64 = counts.iter().zip([0.2, 0.3, 0.5]).map(|(c, p)| (c - total * p).powi(2) / (total * p)).sum();
            // 99.9% quantile of χ²(2)
            assert!(chi2 < 13.8, "{scheme:?}: χ² = {chi2}");
        }
    }
}
