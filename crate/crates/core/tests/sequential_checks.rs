use gpdtsm::inference::ibis::{IbisConfig, ParticleSystem};
use gpdtsm::inference::mcmc::{run_chain, Kernel, MoveStats, SigmaCount};
use gpdtsm::inference::optimize::{fit_model, MinimizeOptions};
use gpdtsm::inference::tuning::tune_sigma_k;
use gpdtsm::inference::{Likelihood, ModelData, Prior};
use gpdtsm::model::ModelSpec;
use gpdtsm::rng::{stream, StreamClock};
use gpdtsm::simulate::{reference_params, simulate, SimConfig};

const MATS: [usize; 5] = [3, 12, 36, 60, 120];

fn data(spec: &str, sigma_k: [f64; 3], n_dates: usize, seed: u64) -> ModelData {
    let sim = simulate(&SimConfig {
        spec: ModelSpec::parse(spec).unwrap(),
        params: reference_params(),
        sigma_k,
        n_dates,
        maturities: MATS.to_vec(),
        macro_rho: 0.9,
        seed,
    })
    .unwrap();
    ModelData::new(sim.yields, MATS.to_vec(), &sim.w, sim.macros).unwrap()
}

#[test]
fn same_seed_gives_identical_particle_systems() {
    let d = data("M1", [0.0; 3], 16, 2);
    let layout = ModelSpec::yields_only().layout();
    let lik = Likelihood::new(&d, &layout, [0.0; 3]).unwrap();
    let prior = Prior::default();
    let cfg = IbisConfig { n_particles: 150, ..IbisConfig::default() };
    let run = || {
        let mut ps = ParticleSystem::from_prior(&layout, &prior, 150, 11);
        ps.run(&lik, &prior, &cfg, 0, 15).unwrap();
        ps
    };
    let (a, b) = (run(), run());
    assert!(a.history.iter().any(|h| !h.phis.is_empty()), "the run should exercise resample-move");
    assert_eq!(a, b);
}

#[test]
fn identical_particles_never_temper() {
    let d = data("M1", [0.0; 3], 6, 4);
    let layout = ModelSpec::yields_only().layout();
    let lik = Likelihood::new(&d, &layout, [0.0; 3]).unwrap();
    let prior = Prior::default();
    let theta = layout.encode(&reference_params()).unwrap();
    let mut ps = ParticleSystem::from_thetas(vec![theta; 40], StreamClock::new(1));
    let cfg = IbisConfig { n_particles: 40, ..IbisConfig::default() };
    ps.run(&lik, &prior, &cfg, 0, 5).unwrap();
    assert!(ps.history.iter().all(|h| h.phis.is_empty()));
    assert!((ps.ess() - 40.0).abs() < 1e-9);
    assert!(ps.log_weights.iter().all(|&w| w == ps.log_weights[0]));
}

#[test]
fn jittering_keeps_the_posterior_mean() {
    let d = data("M1", [0.0; 3], 21, 6);
    let layout = ModelSpec::yields_only().layout();
    let lik = Likelihood::new(&d, &layout, [0.0; 3]).unwrap();
    let prior = Prior::default();
    let fit = fit_model(&lik, Some(&prior), 20, &MinimizeOptions::default()).unwrap();
    let kernel = Kernel::new(&lik, &prior, &fit.proposal(), 20, 1.0, SigmaCount::ErrorDim).unwrap();
    let chain = run_chain(&kernel, fit.theta.clone(), 30_000, 3_000, &mut stream(3, 0, 0)).unwrap();
    // thinned stationary draws stand in for an equally weighted particle set
    let start: Vec<_> = chain.draws.iter().step_by(30).cloned().collect();
    let mut rng = stream(3, 1, 0);
    let moved: Vec<_> = start
        .iter()
        .map(|th| {
            let mut st = kernel.state(th.clone()).unwrap();
            kernel.sweep(&mut st, &mut rng, &mut MoveStats::default());
            st.theta
        })
        .collect();
    let n = start.len() as f64;
    for i in 0..layout.dim() {
        let diff: Vec<f64> = start.iter().zip(&moved).map(|(a, b)| b[i] - a[i]).collect();
        let mean = diff.iter().sum::<f64>() / n;
        let sd = (diff.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 4.0 * sd / n.sqrt() + 1e-300, "{}: shift {mean} with se {}", layout.names()[i], sd / n.sqrt());
    }
}

#[test]
fn white_noise_residuals_give_a_small_signal_scale() {
    let d = data("GP_110", [0.0; 3], 201, 8);
    let tuned = tune_sigma_k(&d, &ModelSpec::parse("GP_110").unwrap(), 200, &MinimizeOptions::default()).unwrap();
    assert!(tuned.c_hat < 0.5, "ĉ = {}", tuned.c_hat);
}

#[test]
fn support_restricted_start_has_only_live_particles() {
    let d = data("M1", [0.0; 3], 4, 9);
    let layout = ModelSpec::yields_only().layout();
    let lik = Likelihood::new(&d, &layout, [0.0; 3]).unwrap();
    let prior = Prior::default();
    let ps = ParticleSystem::from_prior_on_support(&lik, &prior, 30, 2, 1_000_000).unwrap();
    assert!(ps.thetas.iter().all(|th| lik.eval(th, 0).unwrap().incremental().is_finite()));
    // most diffuse prior draws price explosively, so the acceptance rate is well below one
    assert!(ps.log_evidence < 0.0);
    assert_eq!(ps, ParticleSystem::from_prior_on_support(&lik, &prior, 30, 2, 1_000_000).unwrap());
}
