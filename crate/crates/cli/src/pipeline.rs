//! Stage orchestration: prepare → tune → train → out-of-sample loop →
//! evaluate → decompose.

use std::path::{Path, PathBuf};

use chrono::{Months, NaiveDate};
use gpdtsm::evaluation::{
    cer_relative, cw_differential, default_nw_lags, dm_cw_test, expanding_mean, gaussian_quantile_draws, optimal_weight,
    portfolio_gross_return, r2_os, rp_decompose, BacktestLedger, LedgerRow, RpDecomposition,
};
use gpdtsm::forecast::{observed_excess_return_filled, predict_excess_returns, v_posterior, VPosterior};
use gpdtsm::inference::checkpoint;
use gpdtsm::inference::optimize::MinimizeOptions;
use gpdtsm::inference::tuning::tune_sigma_k;
use gpdtsm::inference::{Likelihood, ModelData, ParticleSystem};
use gpdtsm::model::MacroForm;
use gpdtsm::simulate::{reference_params, simulate, SimConfig, Simulated};
use gpdtsm::termstructure::extract_pcs;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{date_index, load_panel, standardize, DataView, StandardizationMeta};
use crate::output::{self, EvalRow};
use crate::CliError;

/// Offset separating forecast streams from the IBIS streams of the same seed.
const FORECAST_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Loaded data with the training-window rotation and standardization.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: RunConfig,
    pub dates: Vec<NaiveDate>,
    pub data: ModelData,
    pub raw_macros: Vec<f64>,
    pub meta: StandardizationMeta,
    pub train_idx: usize,
    pub test_idx: usize,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let spec = &cfg.model;
    let macros = spec.has_macro().then_some((cfg.macros_csv.as_path(), cfg.macro_name.as_str()));
    let panel = load_panel(&cfg.yields_csv, macros, &cfg.maturities)?;
    let train_idx = date_index(&panel.dates, cfg.train_end, "train_end")?;
    let test_idx = match cfg.test_end {
        Some(d) => date_index(&panel.dates, d, "test_end")?,
        None => panel.dates.len() - 1,
    };
    if test_idx <= train_idx {
        return Err(CliError::Validation("the test window is empty".into()));
    }
    let train = panel.yields.rows(0, train_idx + 1).into_owned();
    let w = extract_pcs(&train, 3)?.w;
    let (std_macros, meta) = standardize(&panel.macros, train_idx, spec.form == MacroForm::Gp)?;
    let data = ModelData::new(panel.yields, panel.maturities, &w, std_macros)?;
    Ok(Prepared { cfg: cfg.clone(), dates: panel.dates, data, raw_macros: panel.macros, meta, train_idx, test_idx })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub c_hat: f64,
    pub sigma_k: [f64; 3],
    pub ell: [f64; 3],
    pub residual_sd: [f64; 3],
    pub loglik: f64,
}

/// σ_K from the training window; zeros when the model has no GP block.
pub fn tune(p: &Prepared) -> Result<TuneResult, CliError> {
    let spec = &p.cfg.model;
    if spec.form != MacroForm::Gp || !spec.has_macro() {
        return Ok(TuneResult { c_hat: 0.0, sigma_k: [0.0; 3], ell: [1.0; 3], residual_sd: [0.0; 3], loglik: f64::NAN });
    }
    let train = p.data.truncated(p.train_idx);
    let t = tune_sigma_k(&train, spec, p.train_idx, &MinimizeOptions::default())?;
    info!("tuned c = {:.4}, sigma_K = {:?}", t.c_hat, t.sigma_k);
    Ok(TuneResult { c_hat: t.c_hat, sigma_k: t.sigma_k, ell: t.ell, residual_sd: t.residual_sd, loglik: t.loglik })
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Rendered config without paths; a resumed run must match it.
    pub fingerprint: String,
    pub tuning: TuneResult,
    pub ps: ParticleSystem,
    /// Origin of the next forecast.
    pub next_origin: usize,
    pub ledger: BacktestLedger,
    /// Observed excess returns `rx_{s,s+1}` for `s < next_origin`, per rx maturity.
    pub rx_history: Vec<Vec<f64>>,
}

pub fn fingerprint(cfg: &RunConfig) -> String {
    cfg.render()
        .lines()
        .filter(|l| !["out_dir", "yields_csv", "macros_csv", "compare_ledger"].iter().any(|k| l.starts_with(k)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let ck: Checkpoint = checkpoint::read(path)?;
    if ck.fingerprint != fingerprint(cfg) {
        return Err(CliError::Validation(format!("checkpoint {} was written under a different config", path.display())));
    }
    Ok(ck)
}

/// IBIS over the training window, starting from the prior.
/// Cap on prior draws per particle when searching the likelihood's support.
const PRIOR_TRIES: usize = 1_000_000;

pub fn train(p: &Prepared, tuning: &TuneResult) -> Result<Checkpoint, CliError> {
    let cfg = &p.cfg;
    let layout = cfg.model.layout();
    let visible = p.data.truncated(p.train_idx);
    let lik = Likelihood::new(&visible, &layout, tuning.sigma_k)?;
    let mut ps = ParticleSystem::from_prior_on_support(&lik, &cfg.prior, cfg.ibis.n_particles, cfg.ibis.seed, PRIOR_TRIES)?;
    for t in 0..=p.train_idx {
        ps.step(&lik, &cfg.prior, &cfg.ibis, t)?;
        if t % 12 == 0 || t == p.train_idx {
            info!("train {} / {}: ESS {:.1}, log evidence {:.3}", t, p.train_idx, ps.ess(), ps.log_evidence);
        }
    }
    let mut ck = Checkpoint {
        fingerprint: fingerprint(cfg),
        tuning: tuning.clone(),
        ps,
        next_origin: p.train_idx,
        ledger: BacktestLedger::default(),
        rx_history: vec![],
    };
    let mut view = DataView::new(&p.data, p.train_idx);
    ck.rx_history = cfg
        .rx_maturities
        .iter()
        .map(|&n| (0..p.train_idx).map(|s| observed_rx(p, &ck, &mut view, s, n)).collect())
        .collect::<Result<_, _>>()?;
    audit(&view)?;
    Ok(ck)
}

fn audit(view: &DataView<'_>) -> Result<(), CliError> {
    match view.violations() {
        [] => Ok(()),
        v => Err(CliError::Validation(format!("look-ahead detected: {}", v.join("; ")))),
    }
}

/// `rx_{s,s+1}^n`, filling a missing `n − 1` yield from the particle-mean
/// model when enabled.
fn observed_rx(p: &Prepared, ck: &Checkpoint, view: &mut DataView<'_>, s: usize, n: usize) -> Result<f64, CliError> {
    let mats = &p.data.maturities;
    let y_s = view.yields_row(s);
    let y_next = view.yields_row(s + 1);
    if !p.cfg.fill_missing_maturity || mats.contains(&(n - 1)) {
        return Ok(observed_excess_return_filled(&y_s, &y_next, mats, n, 1, None)?);
    }
    let layout = p.cfg.model.layout();
    let visible = view.visible();
    let lik = Likelihood::new(&visible, &layout, ck.tuning.sigma_k)?;
    let (mean, _) = ck.ps.moments();
    let pm = lik.particle_model(&mean, n)?;
    let pcs = view.pcs(s + 1);
    let fill = |m: usize| pm.term_structure.yield_at(m, &pcs).unwrap_or(f64::NAN);
    let rx = observed_excess_return_filled(&y_s, &y_next, mats, n, 1, Some(&fill))?;
    if !rx.is_finite() {
        return Err(CliError::Numerical(format!("model-implied fill for maturity {} failed at date {}", n - 1, s + 1)));
    }
    Ok(rx)
}

/// Sequential forecast → reveal → assimilate loop up to the test end.
/// `after_step` runs after every assimilated date (used for checkpoints).
pub fn out_of_sample(
    p: &Prepared,
    ck: &mut Checkpoint,
    mut after_step: impl FnMut(&Checkpoint) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let cfg = &p.cfg;
    let layout = cfg.model.layout();
    let rf_col = p.data.maturities.iter().position(|&m| m == 1).expect("validated: one-month yield present");
    let mut view = DataView::new(&p.data, ck.next_origin);
    while view.origin() < p.test_idx {
        let t = view.origin();
        let visible = view.visible();
        let lik = Likelihood::new(&visible, &layout, ck.tuning.sigma_k)?;
        let draws = predict_excess_returns(&ck.ps, &lik, t, &cfg.rx_maturities, cfg.ibis.seed ^ FORECAST_STREAM, t as u64)?;
        let rf = view.yields_row(t)[rf_col];
        let mut pending = vec![];
        for (k, &n) in cfg.rx_maturities.iter().enumerate() {
            let rx = draws.rx(n).expect("requested maturity");
            let weight = optimal_weight(rx.as_slice(), &draws.weights, cfg.gamma, rf)?;
            let hist = &ck.rx_history[k];
            let bench = expanding_mean(hist);
            let sd = if hist.len() > 1 {
                (hist.iter().map(|x| (x - bench).powi(2)).sum::<f64>() / (hist.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            let bd = gaussian_quantile_draws(bench, sd, cfg.bench_draws)?;
            let bench_weight = optimal_weight(&bd, &vec![1.0 / bd.len() as f64; bd.len()], cfg.gamma, rf)?;
            pending.push((n, draws.point_rx[k], bench, weight, bench_weight));
        }
        view.advance();
        for (k, (n, forecast, benchmark, weight, bench_weight)) in pending.into_iter().enumerate() {
            let observed = observed_rx(p, ck, &mut view, t, n)?;
            ck.rx_history[k].push(observed);
            ck.ledger.push(LedgerRow {
                t,
                maturity: n,
                observed,
                forecast,
                benchmark,
                weight,
                bench_weight,
                gross_return: portfolio_gross_return(weight, observed, rf),
                bench_gross_return: portfolio_gross_return(bench_weight, observed, rf),
            })?;
        }
        let visible = view.visible();
        let lik = Likelihood::new(&visible, &layout, ck.tuning.sigma_k)?;
        ck.ps.step(&lik, &cfg.prior, &cfg.ibis, t + 1)?;
        ck.next_origin = t + 1;
        info!("origin {} ({}) done: ESS {:.1}", t, p.dates[t], ck.ps.ess());
        after_step(ck)?;
    }
    audit(&view)
}

/// R²_os, CER and the Clark–West test per maturity against the historical
/// mean, and against a competing ledger when one is given.
pub fn evaluate(ledger: &BacktestLedger, gamma: f64, nw_lags: Option<usize>, compare: Option<&BacktestLedger>) -> Result<Vec<EvalRow>, CliError> {
    let mut out = vec![];
    for n in ledger.maturities() {
        let rows = ledger.maturity(n);
        let obs: Vec<f64> = rows.iter().map(|r| r.observed).collect();
        let fm: Vec<f64> = rows.iter().map(|r| r.forecast).collect();
        let gm: Vec<f64> = rows.iter().map(|r| r.gross_return).collect();
        let mut push = |name: &str, fb: Vec<f64>, gb: Vec<f64>| -> Result<(), CliError> {
            let em: Vec<f64> = obs.iter().zip(&fm).map(|(y, f)| y - f).collect();
            let eb: Vec<f64> = obs.iter().zip(&fb).map(|(y, f)| y - f).collect();
            let lags = nw_lags.unwrap_or_else(|| default_nw_lags(obs.len()));
            let test = dm_cw_test(&cw_differential(&obs, &fm, &fb)?, lags).ok();
            out.push(EvalRow {
                benchmark: name.into(),
                maturity: n,
                n_forecasts: obs.len(),
                r2_os: r2_os(&em, &eb).ok(),
                cer: cer_relative(&gm, &gb, gamma).ok(),
                test_stat: test.map(|t| t.stat).filter(|s| s.is_finite()),
                p_value: test.map(|t| t.p_value).filter(|s| s.is_finite()),
                degenerate: test.is_some_and(|t| t.degenerate),
            });
            Ok(())
        };
        push("historical_mean", rows.iter().map(|r| r.benchmark).collect(), rows.iter().map(|r| r.bench_gross_return).collect())?;
        if let Some(c) = compare {
            let other = c.maturity(n);
            let matched: Option<Vec<_>> = rows.iter().map(|r| other.iter().find(|o| o.t == r.t)).collect();
            let matched = matched.ok_or_else(|| CliError::Validation(format!("compare ledger lacks some origins for maturity {n}")))?;
            push("compare", matched.iter().map(|r| r.forecast).collect(), matched.iter().map(|r| r.gross_return).collect())?;
        }
    }
    Ok(out)
}

/// Posterior of `v` over `0..T` from the current particles and its split
/// into PC-spanned and hidden parts.
pub fn decompose(p: &Prepared, ck: &Checkpoint) -> Result<Option<(VPosterior, RpDecomposition, Vec<usize>)>, CliError> {
    let spec = &p.cfg.model;
    let eqs: Vec<usize> = (0..3).filter(|&j| spec.mask[j]).collect();
    if spec.form != MacroForm::Gp || eqs.is_empty() {
        return Ok(None);
    }
    let t_end = ck.ps.t_current.unwrap_or(0);
    if t_end < 2 {
        return Err(CliError::Validation("decomposition needs at least two assimilated dates".into()));
    }
    let visible = p.data.truncated(t_end);
    let layout = spec.layout();
    let lik = Likelihood::new(&visible, &layout, ck.tuning.sigma_k)?;
    let vp = v_posterior(&ck.ps, &lik, t_end)?;
    let pcs = visible.panel.p.rows(1, t_end).into_owned();
    let dec = rp_decompose(&vp.mean, &pcs, &visible.macros[..t_end], &eqs)?;
    Ok(Some((vp, dec, eqs)))
}

/// Synthetic panel from the reference parameters. Returns the dates too.
pub fn simulate_synthetic(cfg: &RunConfig) -> Result<(Vec<NaiveDate>, Simulated), CliError> {
    let sim = simulate(&SimConfig {
        spec: cfg.model.clone(),
        params: reference_params(),
        sigma_k: cfg.sim.sigma_k,
        n_dates: cfg.sim.n_dates,
        maturities: cfg.maturities.clone(),
        macro_rho: cfg.sim.macro_rho,
        seed: cfg.ibis.seed,
    })?;
    let dates = (0..cfg.sim.n_dates)
        .map(|i| {
            cfg.sim
                .start
                .checked_add_months(Months::new(i as u32))
                .ok_or_else(|| CliError::Validation("simulated dates overflow the calendar".into()))
        })
        .collect::<Result<_, _>>()?;
    Ok((dates, sim))
}

pub fn write_simulation(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let (dates, sim) = simulate_synthetic(cfg)?;
    output::write_yields(&dir.join("yields.csv"), &dates, &cfg.maturities, &sim.yields)?;
    output::write_macros(&dir.join("macros.csv"), &cfg.macro_name, &dates, &sim.macros)?;
    output::write_matrix(&dir.join("truth_v.csv"), &dates[1..], &["v1", "v2", "v3"], &sim.v)?;
    checkpoint::write(&dir.join("truth.json"), &sim)?;
    Ok(())
}

/// Output locations inside the run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }
    pub fn tuning(&self) -> PathBuf {
        self.dir.join("tuning.json")
    }
    pub fn train_ckpt(&self) -> PathBuf {
        self.dir.join("train.ckpt")
    }
    pub fn oos_ckpt(&self) -> PathBuf {
        self.dir.join("oos.ckpt")
    }
    pub fn ledger(&self) -> PathBuf {
        self.dir.join("ledger.csv")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.dir.join("evaluation.csv")
    }
}

pub fn write_tempering(path: &Path, dates: &[NaiveDate], ps: &ParticleSystem) -> Result<(), CliError> {
    let m = nalgebra::DMatrix::from_fn(ps.history.len(), 4, |r, c| {
        let h = &ps.history[r];
        match c {
            0 => h.phis.len() as f64,
            1 => h.fallbacks as f64,
            2 => h.log_m,
            _ => h.ess,
        }
    });
    let ds: Vec<NaiveDate> = ps.history.iter().map(|h| dates[h.t]).collect();
    output::write_matrix(path, &ds, &["moves", "fallbacks", "log_m", "ess"], &m)
}

/// Stages after training: the loop (checkpointed after every date), the
/// ledger, evaluation tables and decomposition files.
pub fn finish(p: &Prepared, paths: &RunPaths, mut ck: Checkpoint) -> Result<Checkpoint, CliError> {
    let ckpt = paths.oos_ckpt();
    out_of_sample(p, &mut ck, |c| Ok(checkpoint::write(&ckpt, c)?))
        .map_err(|e| e.in_stage("forecast", Some(ckpt.clone())))?;
    checkpoint::write(&ckpt, &ck)?;
    output::write_ledger(&paths.ledger(), &p.dates, &ck.ledger)?;
    write_tempering(&paths.dir.join("tempering.csv"), &p.dates, &ck.ps)?;
    run_evaluate(p, paths, &ck.ledger).map_err(|e| e.in_stage("evaluate", Some(ckpt.clone())))?;
    run_decompose(p, paths, &ck).map_err(|e| e.in_stage("decompose", Some(ckpt.clone())))?;
    Ok(ck)
}

pub fn run_evaluate(p: &Prepared, paths: &RunPaths, ledger: &BacktestLedger) -> Result<(), CliError> {
    let compare = p.cfg.compare_ledger.as_deref().map(output::read_ledger).transpose()?;
    let rows = evaluate(ledger, p.cfg.gamma, p.cfg.nw_lags, compare.as_ref())?;
    output::write_evaluation(&paths.evaluation(), &rows)
}

pub fn run_decompose(p: &Prepared, paths: &RunPaths, ck: &Checkpoint) -> Result<(), CliError> {
    match decompose(p, ck)? {
        None => info!("model {} has no GP equation; decomposition skipped", p.cfg.model),
        Some((vp, dec, eqs)) => {
            output::write_decomposition(&paths.dir, &p.dates, &dec)?;
            output::write_scatter(&paths.dir, &p.dates, &p.raw_macros, &p.data.macros, &vp, &eqs)?;
        }
    }
    Ok(())
}

/// Tune and train, checkpointing the result.
pub fn tune_and_train(p: &Prepared, paths: &RunPaths) -> Result<Checkpoint, CliError> {
    let tuning = tune(p).map_err(|e| e.in_stage("tune", None))?;
    checkpoint::write(&paths.tuning(), &tuning)?;
    let ck = train(p, &tuning).map_err(|e| e.in_stage("train", None))?;
    checkpoint::write(&paths.train_ckpt(), &ck)?;
    std::fs::write(paths.dir.join("standardization.json"), serde_json::to_string(&p.meta).expect("plain struct"))?;
    Ok(ck)
}

/// The full pipeline, optionally continuing from a checkpoint.
pub fn run_pipeline(cfg: &RunConfig, resume: Option<&Path>) -> Result<Checkpoint, CliError> {
    let p = prepare(cfg).map_err(|e| e.in_stage("load", None))?;
    let paths = RunPaths::new(&cfg.out_dir)?;
    std::fs::write(paths.dir.join("config.txt"), cfg.render())?;
    let ck = match resume {
        Some(path) => load_checkpoint(path, cfg)?,
        None => tune_and_train(&p, &paths)?,
    };
    finish(&p, &paths, ck)
}
