use gpdtsm::gpkernel::{build_block_k, KernelHypers};
use gpdtsm::gpou::{p_loglik_grad, StackedResiduals};
use gpdtsm::inference::optimize::{covariance_from_hessian, fd_hessian, minimize, ols_var, MinimizeOptions};
use gpdtsm::inference::{Likelihood, ModelData};
use gpdtsm::model::ModelSpec;
use gpdtsm::simulate::{reference_params, simulate, SimConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MATS: [usize; 8] = [3, 6, 12, 24, 36, 60, 84, 120];

fn sim_data(spec: &str, n_dates: usize, seed: u64) -> (ModelData, gpdtsm::simulate::Simulated) {
    let spec = ModelSpec::parse(spec).unwrap();
    let mut params = reference_params();
    params.phi_pm = DVector::from_vec(vec![2e-4, 0.0, 1e-4]);
    let sim = simulate(&SimConfig {
        spec,
        params,
        sigma_k: [1.2e-3, 5e-4, 2.4e-4],
        n_dates,
        maturities: MATS.to_vec(),
        macro_rho: 0.9,
        seed,
    })
    .unwrap();
    let data = ModelData::new(sim.yields.clone(), MATS.to_vec(), &sim.w, sim.macros.clone()).unwrap();
    (data, sim)
}

fn perturbed_truth(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let layout = spec.layout();
    let mut p = reference_params();
    p.phi_pm = DVector::from_vec(vec![2e-4, -1e-4, 1e-4]);
    p.ell = [0.8, 1.3, 2.0];
    p.lambda0 = DVector::from_vec(vec![1e-5, -2e-5, 0.0]);
    let mut theta = layout.encode(&p).unwrap();
    for i in 0..theta.len() {
        theta[i] += 0.05 * (rng.random::<f64>() - 0.5);
    }
    theta
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (case, id) in ["M1", "M0", "GP_110", "GP_111", "LM_101", "LM_111"].iter().enumerate() {
        let spec = ModelSpec::parse(id).unwrap();
        let layout = spec.layout();
        let (data, _) = sim_data(id, 11, 100 + case as u64);
        let sigma_k = [1.2e-3, 5e-4, 2.4e-4];
        let lik = Likelihood::new(&data, &layout, sigma_k).unwrap();
        for _ in 0..3 {
            let theta = perturbed_truth(&spec, &mut rng);
            let (_, g) = lik.loglik_grad(&theta, 10).unwrap();
            for i in 0..theta.len() {
                let h = 1e-6 * theta[i].abs().max(1e-2);
                let mut tp = theta.clone();
                tp[i] += h;
                let mut tm = theta.clone();
                tm[i] -= h;
                let fd = (lik.loglik(&tp, 10).unwrap() - lik.loglik(&tm, 10).unwrap()) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs()).max(1.0);
                assert!(
                    (g[i] - fd).abs() <= 1e-4 * scale,
                    "{id} coordinate {} ({}): analytic {} vs fd {}",
                    i,
                    layout.names()[i],
                    g[i],
                    fd
                );
            }
        }
    }
}

#[test]
fn gaussian_var_mle_matches_ols() {
    // VAR(1) in three variables, coordinates (μ, vec Φ row-major, chol with log diagonal).
    let (_, sim) = sim_data("M1", 400, 7);
    let p = sim.pcs.map(|x| x * 1000.0);
    let (mu_ols, phi_ols, omega_ols) = ols_var(&p).unwrap();
    let t = p.nrows() - 1;
    let inputs = vec![0.0; t];
    let k0 = build_block_k(&inputs, &KernelHypers::inactive()).unwrap();
    let decode = |x: &DVector<f64>| {
        let mu = DVector::from_fn(3, |i, _| x[i]);
        let phi = DMatrix::from_fn(3, 3, |i, j| x[3 + 3 * i + j]);
        let mut l = DMatrix::zeros(3, 3);
        let pos = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];
        for (c, &(i, j)) in pos.iter().enumerate() {
            l[(i, j)] = if i == j { x[12 + c].exp() } else { x[12 + c] };
        }
        (mu, phi, l)
    };
    let f = |x: &DVector<f64>| {
        let (mu, phi, l) = decode(x);
        let by_time = DMatrix::from_fn(t, 3, |r, c| {
            p[(r + 1, c)] - mu[c] - (0..3).map(|k| phi[(c, k)] * p[(r, k)]).sum::<f64>()
        });
        let g = p_loglik_grad(&StackedResiduals::from_by_time(by_time), &k0, &l)?;
        let d_mu = g.alpha.row_sum().transpose();
        let mut grad = DVector::zeros(18);
        for i in 0..3 {
            grad[i] = d_mu[i];
            for j in 0..3 {
                grad[3 + 3 * i + j] = (0..t).map(|r| g.alpha[(r, i)] * p[(r, j)]).sum::<f64>();
            }
        }
        let dl = g.d_chol(&l);
        let pos = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];
        for (c, &(i, j)) in pos.iter().enumerate() {
            grad[12 + c] = if i == j { dl[(i, j)] * l[(i, j)] } else { dl[(i, j)] };
        }
        Ok((-g.loglik, -grad))
    };
    let x0 = DVector::zeros(18);
    let out = minimize(&f, &x0, &MinimizeOptions { max_iters: 2000, grad_tol: 1e-9, simplex_fallback: true }).unwrap();
    let (mu, phi, l) = decode(&out.x);
    let omega = &l * l.transpose();
    assert!((mu - mu_ols).amax() < 1e-5);
    assert!((phi - phi_ols).amax() < 1e-5);
    assert!((omega - omega_ols).amax() < 1e-5);
    let grad = |x: &DVector<f64>| f(x).map(|(_, g)| g);
    let cov = covariance_from_hessian(&fd_hessian(&grad, &out.x).unwrap());
    assert!(cov.clone().cholesky().is_some());
}
