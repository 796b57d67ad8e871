use gpdtsm::evaluation::{ols_with_intercept, rp_decompose};
use gpdtsm::forecast::{model_excess_return, pc_predictive, predict_excess_returns, price_loadings};
use gpdtsm::gpkernel::{build_block_k, build_cross_k, KernelHypers};
use gpdtsm::gpou::predictive_pc;
use gpdtsm::inference::ibis::ParticleSystem;
use gpdtsm::inference::{Likelihood, ModelData};
use gpdtsm::model::ModelSpec;
use gpdtsm::rng::{stream, StreamClock};
use gpdtsm::simulate::{reference_params, simulate, SimConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

const MATS: [usize; 7] = [1, 3, 12, 24, 36, 60, 120];
const SIGMA_K: [f64; 3] = [1e-3, 5e-4, 0.0];

fn sim(spec: &str, n_dates: usize, seed: u64) -> ModelData {
    let s = simulate(&SimConfig {
        spec: ModelSpec::parse(spec).unwrap(),
        params: reference_params(),
        sigma_k: SIGMA_K,
        n_dates,
        maturities: MATS.to_vec(),
        macro_rho: 0.9,
        seed,
    })
    .unwrap();
    ModelData::new(s.yields, MATS.to_vec(), &s.w, s.macros).unwrap()
}

#[test]
fn single_particle_matches_hand_composition() {
    let d = sim("GP_110", 25, 1);
    let layout = ModelSpec::parse("GP_110").unwrap().layout();
    let lik = Likelihood::new(&d, &layout, SIGMA_K).unwrap();
    let theta = layout.encode(&reference_params()).unwrap();
    let ps = ParticleSystem::from_thetas(vec![theta.clone()], StreamClock::new(0));
    let t = 20;
    let pred = predict_excess_returns(&ps, &lik, t, &[12, 60], 5, 0).unwrap();

    // step (a): loadings and dynamics from θ; step (b): GP-corrected predictive
    let pm = lik.particle_model(&theta, 120).unwrap();
    let p_t = d.panel.pcs_at(t);
    let hypers = KernelHypers { ell: [1.0; 3], sigma: SIGMA_K, active: [true, true, false] };
    let k = build_block_k(&d.macros[..t], &hypers).unwrap();
    let (k0, kn) = build_cross_k(&d.macros[..t], d.macros[t], &hypers).unwrap();
    let s = lik.residuals(&pm, t).unwrap();
    let hand = predictive_pc(&p_t, &s, &k, &k0, &kn, &pm.pd).unwrap();
    let (_, mean, cov) = pc_predictive(&lik, &theta, t, 120).unwrap();
    assert!((&hand.mean - &mean).amax() < 1e-15 && (&hand.cov - &cov).amax() < 1e-20);

    // step (c): excess return from model yields at both dates
    let draw = pred.pc_draws.row(0).transpose();
    let ts = &pm.term_structure;
    for (i, &n) in [12usize, 60].iter().enumerate() {
        let y = |m: usize, p: &DVector<f64>| ts.yield_at(m, p).unwrap();
        let want = n as f64 * y(n, &p_t) - y(1, &p_t) - (n - 1) as f64 * y(n - 1, &draw);
        assert!((pred.rx_draws[i][0] - want).abs() < 1e-12, "n = {n}: {} vs {want}", pred.rx_draws[i][0]);
        assert_eq!(pred.point_rx[i], pred.rx_draws[i][0]);
    }
}

#[test]
fn excess_return_draws_are_affine_in_the_pc_draw() {
    let d = sim("M1", 30, 2);
    let layout = ModelSpec::yields_only().layout();
    let lik = Likelihood::new(&d, &layout, [0.0; 3]).unwrap();
    let theta = layout.encode(&reference_params()).unwrap();
    let ps = ParticleSystem::from_thetas(vec![theta.clone(); 400], StreamClock::new(0));
    let t = 25;
    let pred = predict_excess_returns(&ps, &lik, t, &[24, 120], 9, 3).unwrap();
    let ts = lik.particle_model(&theta, 120).unwrap().term_structure;
    for (i, &n) in [24usize, 120].iter().enumerate() {
        let fit = ols_with_intercept(&pred.rx_draws[i], &pred.pc_draws);
        let (_, b) = price_loadings(&ts, n - 1).unwrap();
        for j in 0..3 {
            assert!((fit.coef[j + 1] - b[j]).abs() <= 1e-8 * b[j].abs().max(1.0), "n = {n}, factor {j}");
        }
    }
    // the draws scatter around the predictive mean
    let (_, mean, cov) = pc_predictive(&lik, &theta, t, 120).unwrap();
    let n = pred.len() as f64;
    for j in 0..3 {
        let m = pred.pc_draws.column(j).sum() / n;
        assert!((m - mean[j]).abs() < 4.0 * (cov[(j, j)] / n).sqrt());
    }
}

#[test]
fn vanishing_noise_collapses_the_predictive() {
    let d = sim("M1", 30, 3);
    let layout = ModelSpec::yields_only().layout();
    let lik = Likelihood::new(&d, &layout, [0.0; 3]).unwrap();
    let mut p = reference_params();
    p.qp.sigma_p_chol = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-13, 1e-13, 1e-13]));
    let theta = layout.encode(&p).unwrap();
    let ps = ParticleSystem::from_thetas(vec![theta.clone(); 20], StreamClock::new(0));
    let t = 10;
    let pred = predict_excess_returns(&ps, &lik, t, &[60], 1, 0).unwrap();
    let pm = lik.particle_model(&theta, 60).unwrap();
    let p_t = d.panel.pcs_at(t);
    let var_mean = &pm.pd.mu + &pm.pd.phi * &p_t;
    let want = model_excess_return(&pm.term_structure, 60, &var_mean, &p_t).unwrap();
    let draws = &pred.rx_draws[0];
    assert!(draws.iter().all(|x| (x - want).abs() < 1e-10), "{draws} vs {want}");
    assert!(draws.max() - draws.min() < 1e-10);
}

#[test]
fn point_forecast_is_the_weighted_mean() {
    let d = sim("M1", 30, 4);
    let layout = ModelSpec::yields_only().layout();
    let lik = Likelihood::new(&d, &layout, [0.0; 3]).unwrap();
    let mut rng = stream(4, 0, 0);
    let base = layout.encode(&reference_params()).unwrap();
    let thetas: Vec<_> = (0..50).map(|_| base.map(|x| x + 0.01 * rng.sample::<f64, _>(StandardNormal))).collect();
    let mut ps = ParticleSystem::from_thetas(thetas, StreamClock::new(0));
    ps.log_weights = (0..50).map(|i| -0.1 * i as f64).collect();
    let pred = predict_excess_returns(&ps, &lik, 20, &[12, 36, 120], 2, 0).unwrap();
    let w = ps.weights();
    assert_eq!(pred.weights, w);
    assert_eq!(pred.len(), ps.len());
    for (k, draws) in pred.rx_draws.iter().enumerate() {
        let want: f64 = draws.iter().zip(&w).map(|(x, wi)| x * wi).sum();
        assert!((pred.point_rx[k] - want).abs() <= 1e-12 * want.abs().max(1e-3));
    }
}

#[test]
fn decomposition_recovers_a_known_split() {
    let mut rng = stream(50, 0, 0);
    let t = 50;
    let pcs = DMatrix::from_fn(t, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let macros: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
    // hidden part: noise with its projection on [1, P] removed
    let z = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
    let hidden = ols_with_intercept(&z, &pcs).residuals;
    let (a, b) = (0.3, DVector::from_vec(vec![0.5, -1.0, 2.0]));
    let v = &pcs * &b + &hidden + DVector::from_element(t, a);
    let v_hat = DMatrix::from_fn(t, 3, |r, _| v[r]);
    let dec = rp_decompose(&v_hat, &pcs, &macros, &[0, 1]).unwrap();
    for c in &dec.components {
        assert!((c.a - a).abs() < 1e-6);
        assert!((&c.b - &b).amax() < 1e-6);
        assert!((&c.hidden - &hidden).amax() < 1e-6);
    }
}

#[test]
fn simulated_residual_covariance_matches_the_marginal() {
    // E[s s'] = E_M[K(M)] + Ω ⊗ I_T, checked at T = 2 over 1e4 panels
    let params = reference_params();
    let omega = &params.qp.sigma_p_chol * params.qp.sigma_p_chol.transpose();
    let sigma_k = [1e-3, 5e-4, 3e-4];
    let h = KernelHypers { ell: params.ell, sigma: sigma_k, active: [true; 3] };
    let reps = 10_000;
    let t = 2;
    let mut sum = DMatrix::<f64>::zeros(6, 6);
    let mut sum_sq = DMatrix::<f64>::zeros(6, 6);
    for seed in 0..reps {
        let s = simulate(&SimConfig {
            spec: ModelSpec::parse("GP_111").unwrap(),
            params: params.clone(),
            sigma_k,
            n_dates: t + 1,
            maturities: vec![3, 12, 36, 60, 120],
            macro_rho: 0.9,
            seed,
        })
        .unwrap();
        let x = DVector::from_fn(6, |i, _| s.s[(i % t, i / t)]);
        let k = build_block_k(&s.macros[..t], &h).unwrap().dense();
        let c = DMatrix::from_fn(6, 6, |a, b| k[(a, b)] + if a % t == b % t { omega[(a / t, b / t)] } else { 0.0 });
        let dev = &x * x.transpose() - c;
        sum_sq += dev.component_mul(&dev);
        sum += dev;
    }
    let n = reps as f64;
    let mean = &sum / n;
    let var = (&sum_sq / n - mean.component_mul(&mean)) / n;
    let err = mean.norm();
    let se = var.sum().sqrt();
    assert!(err < 3.0 * se, "Frobenius error {err:e}, MC se {se:e}");
}
