//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use gpdtsm::inference::mcmc::{SigmaCount, EIGEN_FLOOR, PROPOSAL_DF};
use gpdtsm::inference::{IbisConfig, Prior, Resampling};
use gpdtsm::linalg::KERNEL_JITTER;
use gpdtsm::termstructure::MAX_ROTATION_CONDITION;
use gpdtsm::evaluation::WEIGHT_BOUND;
use gpdtsm::ModelSpec;

use crate::CliError;

/// Everything a pipeline run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub macro_name: String,
    pub yields_csv: PathBuf,
    pub macros_csv: PathBuf,
    pub out_dir: PathBuf,
    /// Panel columns in months.
    pub maturities: Vec<usize>,
    /// Maturities whose one-month excess returns are forecast.
    pub rx_maturities: Vec<usize>,
    /// Fill a missing `n − 1` maturity with the model-implied yield.
    pub fill_missing_maturity: bool,
    pub train_end: NaiveDate,
    /// Last date used out of sample; the end of the panel if absent.
    pub test_end: Option<NaiveDate>,
    pub ibis: IbisConfig,
    pub prior: Prior,
    pub gamma: f64,
    /// Newey–West lags; the automatic rule if absent.
    pub nw_lags: Option<usize>,
    /// Quantile draws representing the benchmark predictive.
    pub bench_draws: usize,
    /// A ledger of a competing model used as a second benchmark.
    pub compare_ledger: Option<PathBuf>,
    pub sim: SimSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub n_dates: usize,
    pub sigma_k: [f64; 3],
    pub macro_rho: f64,
    pub start: NaiveDate,
}

/// Constants that are fixed in the library. They may appear in a config file
/// but only with these values.
pub const FIXED: [(&str, f64); 5] = [
    ("kernel_jitter", KERNEL_JITTER),
    ("psd_clip", EIGEN_FLOOR),
    ("proposal_df", PROPOSAL_DF),
    ("weight_bound", WEIGHT_BOUND),
    ("max_rotation_condition", MAX_ROTATION_CONDITION),
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::parse("GP_110").expect("valid id"),
            macro_name: "macro".into(),
            yields_csv: "yields.csv".into(),
            macros_csv: "macros.csv".into(),
            out_dir: "out".into(),
            maturities: vec![1, 3, 6, 12, 24, 36, 48, 60, 84, 120],
            rx_maturities: vec![24, 36, 48, 60, 84, 120],
            fill_missing_maturity: false,
            train_end: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            test_end: None,
            ibis: IbisConfig::default(),
            prior: Prior::default(),
            gamma: 3.0,
            nw_lags: None,
            bench_draws: 200,
            compare_ledger: None,
            sim: SimSettings {
                n_dates: 201,
                sigma_k: [1.2e-3, 5e-4, 0.0],
                macro_rho: 0.9,
                start: NaiveDate::from_ymd_opt(1990, 1, 31).expect("valid date"),
            },
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Validation(format!("config key '{key}': cannot read '{value}' as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(key, v, what))
}

fn list<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(|s| num(key, s.trim(), what)).collect()
}

fn array<const K: usize>(key: &str, v: &str) -> Result<[f64; K], CliError> {
    let xs: Vec<f64> = list(key, v, "a list of numbers")?;
    xs.try_into().map_err(|_| bad(key, v, &format!("{K} comma-separated numbers")))
}

pub fn parse_date(key: &str, v: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(v, "%Y-%m-%d").map_err(|_| bad(key, v, "an ISO date (YYYY-MM-DD)"))
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "a boolean")),
    }
}

/// Splits the text into ordered `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected key = value, got '{line}'", i + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
            return Err(CliError::Validation(format!("config line {}: key '{k}' set twice", i + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("reading config {}: {e}", path.display())))?;
        let mut cfg = Self::from_text(&text)?;
        // relative paths are taken from the config's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.yields_csv, &mut cfg.macros_csv, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.compare_ledger.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (key, (line, v)) in parse_pairs(text)? {
            let k = key.as_str();
            if let Some((_, fixed)) = FIXED.iter().find(|(name, _)| *name == k) {
                let x: f64 = num(k, &v, "a number")?;
                if x != *fixed {
                    return Err(CliError::Validation(format!("config line {line}: '{k}' is fixed at {fixed:e}, got {v}")));
                }
                continue;
            }
            match k {
                "model" => cfg.model = ModelSpec::parse(&v).map_err(|e| CliError::Validation(e.to_string()))?,
                "macro_name" => cfg.macro_name = v,
                "yields_csv" => cfg.yields_csv = v.into(),
                "macros_csv" => cfg.macros_csv = v.into(),
                "out_dir" => cfg.out_dir = v.into(),
                "maturities" => cfg.maturities = list(k, &v, "a list of months")?,
                "rx_maturities" => cfg.rx_maturities = list(k, &v, "a list of months")?,
                "fill_missing_maturity" => cfg.fill_missing_maturity = flag(k, &v)?,
                "train_end" => cfg.train_end = parse_date(k, &v)?,
                "test_end" => cfg.test_end = Some(parse_date(k, &v)?),
                "n_particles" => cfg.ibis.n_particles = num(k, &v, "a count")?,
                "alpha" => cfg.ibis.alpha = num(k, &v, "a number")?,
                "jitter_steps" => cfg.ibis.jitter_steps = num(k, &v, "a count")?,
                "resampling" => {
                    cfg.ibis.resampling = match v.as_str() {
                        "multinomial" => Resampling::Multinomial,
                        "systematic" => Resampling::Systematic,
                        _ => return Err(bad(k, &v, "multinomial or systematic")),
                    }
                }
                "bisection_tol" => cfg.ibis.bisection_tol = num(k, &v, "a number")?,
                "max_bisection" => cfg.ibis.max_bisection = num(k, &v, "a count")?,
                "fallback_step" => cfg.ibis.fallback_step = num(k, &v, "a number")?,
                "sigma_count" => {
                    cfg.ibis.sigma_count = match v.as_str() {
                        "error_dim" => SigmaCount::ErrorDim,
                        "j_minus_r" => SigmaCount::JMinusR,
                        _ => return Err(bad(k, &v, "error_dim or j_minus_r")),
                    }
                }
                "seed" => cfg.ibis.seed = num(k, &v, "an unsigned integer")?,
                "prior_sd" => cfg.prior.sd = num(k, &v, "a number")?,
                "prior_alpha0" => cfg.prior.alpha0 = num(k, &v, "a number")?,
                "prior_beta0" => cfg.prior.beta0 = num(k, &v, "a number")?,
                "prior_mean_k_inf" => cfg.prior.mean_k_inf = num(k, &v, "a number")?,
                "prior_mean_g" => cfg.prior.mean_g = array(k, &v)?,
                "prior_mean_chol" => cfg.prior.mean_chol = array(k, &v)?,
                "prior_mean_log_ell" => cfg.prior.mean_log_ell = num(k, &v, "a number")?,
                "prior_mean_lambda" => cfg.prior.mean_lambda = num(k, &v, "a number")?,
                "prior_mean_phi_pm" => cfg.prior.mean_phi_pm = num(k, &v, "a number")?,
                "gamma" => cfg.gamma = num(k, &v, "a number")?,
                "nw_lags" => cfg.nw_lags = Some(num(k, &v, "a count")?),
                "bench_draws" => cfg.bench_draws = num(k, &v, "a count")?,
                "compare_ledger" => cfg.compare_ledger = Some(v.into()),
                "sim_n_dates" => cfg.sim.n_dates = num(k, &v, "a count")?,
                "sim_sigma_k" => cfg.sim.sigma_k = array(k, &v)?,
                "sim_macro_rho" => cfg.sim.macro_rho = num(k, &v, "a number")?,
                "sim_start" => cfg.sim.start = parse_date(k, &v)?,
                _ => return Err(CliError::Validation(format!("config line {line}: unknown key '{k}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |m: String| Err(CliError::Validation(m));
        if self.maturities.is_empty() || self.maturities[0] == 0 || self.maturities.windows(2).any(|w| w[0] >= w[1]) {
            return v(format!("maturities must be positive and ascending, got {:?}", self.maturities));
        }
        if self.maturities.len() < 4 {
            return v("at least four maturities are needed for three PCs plus measurement error".into());
        }
        if !self.maturities.contains(&1) {
            return v("the panel must contain the one-month yield (the riskless rate)".into());
        }
        for &n in &self.rx_maturities {
            if n < 2 || !self.maturities.contains(&n) {
                return v(format!("rx maturity {n} must be an observed maturity above one month"));
            }
        }
        if !(self.ibis.alpha > 0.0 && self.ibis.alpha <= 1.0) {
            return v(format!("alpha must lie in (0, 1], got {}", self.ibis.alpha));
        }
        if self.ibis.n_particles < 2 {
            return v("n_particles must be at least 2".into());
        }
        if !(self.gamma > 1.0) {
            return v(format!("gamma must exceed 1, got {}", self.gamma));
        }
        if self.bench_draws == 0 {
            return v("bench_draws must be positive".into());
        }
        if self.sim.n_dates < 10 || !(self.sim.macro_rho.abs() < 1.0) {
            return v("sim_n_dates must be at least 10 and |sim_macro_rho| < 1".into());
        }
        if self.sim.sigma_k.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return v("sim_sigma_k must be finite and non-negative".into());
        }
        if let Some(te) = self.test_end {
            if te <= self.train_end {
                return v(format!("test_end {te} must follow train_end {}", self.train_end));
            }
        }
        self.prior.validate().map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Every key with its value, in the same format the parser reads.
    pub fn render(&self) -> String {
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let joinf = |xs: &[f64]| xs.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("model", self.model.to_string());
        put("macro_name", self.macro_name.clone());
        put("yields_csv", self.yields_csv.display().to_string());
        put("macros_csv", self.macros_csv.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("maturities", join(&self.maturities));
        put("rx_maturities", join(&self.rx_maturities));
        put("fill_missing_maturity", self.fill_missing_maturity.to_string());
        put("train_end", self.train_end.to_string());
        if let Some(d) = self.test_end {
            put("test_end", d.to_string());
        }
        put("n_particles", self.ibis.n_particles.to_string());
        put("alpha", self.ibis.alpha.to_string());
        put("jitter_steps", self.ibis.jitter_steps.to_string());
        put(
            "resampling",
            match self.ibis.resampling {
                Resampling::Multinomial => "multinomial",
                Resampling::Systematic => "systematic",
            }
            .into(),
        );
        put("bisection_tol", self.ibis.bisection_tol.to_string());
        put("max_bisection", self.ibis.max_bisection.to_string());
        put("fallback_step", format!("{:e}", self.ibis.fallback_step));
        put(
            "sigma_count",
            match self.ibis.sigma_count {
                SigmaCount::ErrorDim => "error_dim",
                SigmaCount::JMinusR => "j_minus_r",
            }
            .into(),
        );
        put("seed", self.ibis.seed.to_string());
        put("prior_sd", self.prior.sd.to_string());
        put("prior_alpha0", self.prior.alpha0.to_string());
        put("prior_beta0", format!("{:e}", self.prior.beta0));
        put("prior_mean_k_inf", format!("{:e}", self.prior.mean_k_inf));
        put("prior_mean_g", joinf(&self.prior.mean_g));
        put("prior_mean_chol", joinf(&self.prior.mean_chol));
        put("prior_mean_log_ell", format!("{:e}", self.prior.mean_log_ell));
        put("prior_mean_lambda", format!("{:e}", self.prior.mean_lambda));
        put("prior_mean_phi_pm", format!("{:e}", self.prior.mean_phi_pm));
        put("gamma", self.gamma.to_string());
        if let Some(l) = self.nw_lags {
            put("nw_lags", l.to_string());
        }
        put("bench_draws", self.bench_draws.to_string());
        if let Some(p) = &self.compare_ledger {
            put("compare_ledger", p.display().to_string());
        }
        put("sim_n_dates", self.sim.n_dates.to_string());
        put("sim_sigma_k", joinf(&self.sim.sigma_k));
        put("sim_macro_rho", self.sim.macro_rho.to_string());
        put("sim_start", self.sim.start.to_string());
        for (k, v) in FIXED {
            put(k, format!("{v:e}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = RunConfig::from_text("# header\n\nmodel = LM_011  # trailing\ngamma=5\n").unwrap();
        assert_eq!(cfg.model.to_string(), "LM_011");
        assert_eq!(cfg.gamma, 5.0);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.test_end = NaiveDate::from_ymd_opt(2010, 6, 30);
        cfg.nw_lags = Some(4);
        cfg.prior.mean_g = [1.5, -2.0, 0.25];
        let back = RunConfig::from_text(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_models_are_rejected() {
        assert!(RunConfig::from_text("modle = M1").is_err());
        assert!(RunConfig::from_text("model = GP_12").is_err());
        assert!(RunConfig::from_text("kernel_jitter = 1e-6").is_err());
        assert!(RunConfig::from_text("kernel_jitter = 1e-10").is_ok());
    }

    #[test]
    fn duplicate_key_names_its_line() {
        let err = RunConfig::from_text("gamma = 3\ngamma = 4").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    proptest::proptest! {
        #[test]
        fn rendered_numbers_parse_back_exactly(
            gamma in 1.01f64..20.0,
            alpha in 0.01f64..1.0,
            n in 1usize..5000,
            seed in proptest::num::u64::ANY,
            mask in 0usize..8,
            g in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let mut cfg = RunConfig::default();
            cfg.gamma = gamma;
            cfg.ibis.alpha = alpha;
            cfg.ibis.n_particles = n;
            cfg.ibis.seed = seed;
            cfg.prior.mean_g = g;
            cfg.model = ModelSpec::parse(&format!("GP_{:03b}", mask.max(1))).unwrap();
            proptest::prop_assert_eq!(RunConfig::from_text(&cfg.render()).unwrap(), cfg);
        }
    }
}

