//! Forecast evaluation: out-of-sample R², Diebold–Mariano tests with the
//! Clark–West adjustment, power-utility allocation and certainty-equivalent
//! returns, adjusted-R² batteries and the risk-premium decomposition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{least_squares, log_sum_exp};

/// `1 − Σ e²_model / Σ e²_bench`.
pub fn r2_os(model_errors: &[f64], bench_errors: &[f64]) -> Result<f64> {
    if model_errors.is_empty() || model_errors.len() != bench_errors.len() {
        return Err(Error::Data("R²_os needs aligned, non-empty error series".into()));
    }
    let sse_m: f64 = model_errors.iter().map(|e| e * e).sum();
    let sse_b: f64 = bench_errors.iter().map(|e| e * e).sum();
    if sse_b == 0.0 {
        return Err(Error::Undefined("benchmark has zero squared error".into()));
    }
    Ok(1.0 - sse_m / sse_b)
}

/// `floor(4 (T/100)^{2/9})`.
pub fn default_nw_lags(t: usize) -> usize {
    (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Newey–West (Bartlett) variance of the sample mean of `d`.
pub fn newey_west_mean_var(d: &[f64], lags: usize) -> f64 {
    let t = d.len() as f64;
    let m = d.iter().sum::<f64>() / t;
    let c: Vec<f64> = d.iter().map(|x| x - m).collect();
    let gamma = |l: usize| c[l..].iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / t;
    let mut s = gamma(0);
    for l in 1..=lags.min(d.len() - 1) {
        s += 2.0 * (1.0 - l as f64 / (lags as f64 + 1.0)) * gamma(l);
    }
    s / t
}

/// Clark–West adjusted loss differential
/// `e²_bench − e²_model + (f_bench − f_model)²`.
pub fn cw_differential(observed: &[f64], f_model: &[f64], f_bench: &[f64]) -> Result<Vec<f64>> {
    if observed.len() != f_model.len() || observed.len() != f_bench.len() {
        return Err(Error::Data("forecast series are not aligned".into()));
    }
    Ok(observed
        .iter()
        .zip(f_model.iter().zip(f_bench))
        .map(|(y, (m, b))| (y - b).powi(2) - (y - m).powi(2) + (b - m).powi(2))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmTest {
    pub stat: f64,
    /// One-sided upper-tail normal p-value.
    pub p_value: f64,
    /// Set when the differential has zero long-run variance but non-zero mean.
    pub degenerate: bool,
}

/// `mean(d) / NW-se(mean(d))` with an upper-tail normal p-value.
pub fn dm_cw_test(d: &[f64], lags: usize) -> Result<DmTest> {
    if d.len() < 10 {
        return Err(Error::Data(format!("DM test needs at least 10 observations, got {}", d.len())));
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = newey_west_mean_var(d, lags);
    if !(var > 0.0) {
        if mean == 0.0 {
            return Ok(DmTest { stat: 0.0, p_value: 0.5, degenerate: false });
        }
        return Ok(DmTest { stat: f64::NAN, p_value: f64::NAN, degenerate: true });
    }
    let stat = mean / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(DmTest { stat, p_value: normal.sf(stat), degenerate: false })
}

/// `*`, `**`, `***` at the 10, 5 and 1 percent levels.
pub fn significance_stars(p: f64) -> &'static str {
    match p {
        p if p < 0.01 => "***",
        p if p < 0.05 => "**",
        p if p < 0.10 => "*",
        _ => "",
    }
}

/// Gross one-period return of holding weight `w` in the risky bond.
pub fn portfolio_gross_return(w: f64, rx: f64, rf: f64) -> f64 {
    rf.exp() * (1.0 - w) + w * (rf + rx).exp()
}

pub const WEIGHT_BOUND: f64 = 10.0;

fn power_utility(x: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        x.ln()
    } else {
        x.powf(1.0 - gamma) / (1.0 - gamma)
    }
}

/// Expected utility of weight `w` over weighted draws; `None` if some draw
/// leaves non-positive wealth.
pub fn expected_utility(w: f64, draws: &[f64], weights: &[f64], gamma: f64, rf: f64) -> Option<f64> {
    let mut eu = 0.0;
    for (rx, om) in draws.iter().zip(weights) {
        let wealth = portfolio_gross_return(w, *rx, rf);
        if !(wealth > 0.0) {
            return None;
        }
        eu += om * power_utility(wealth, gamma);
    }
    Some(eu)
}

/// Utility-maximizing weight of the risky bond.
///
/// Golden-section search over `[−10, 10]` intersected with the weights that
/// keep wealth positive for every draw, then one parabolic step through the
/// final bracket. Returns 0 when every draw is zero.
pub fn optimal_weight(draws: &[f64], weights: &[f64], gamma: f64, rf: f64) -> Result<f64> {
    if draws.is_empty() || draws.len() != weights.len() {
        return Err(Error::Data("draws and weights must be aligned and non-empty".into()));
    }
    if draws.iter().chain(weights).any(|x| !x.is_finite()) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Domain("draws must be finite and weights non-negative".into()));
    }
    if !(gamma > 1.0) {
        return Err(Error::Domain(format!("risk aversion must exceed 1, got {gamma}")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("weights sum to zero".into()));
    }
    let om: Vec<f64> = weights.iter().map(|w| w / total).collect();
    if draws.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    // 1 + w (e^{rx} − 1) > 0 for every draw.
    let (mut lo, mut hi) = (-WEIGHT_BOUND, WEIGHT_BOUND);
    for &rx in draws {
        let x = rx.exp_m1();
        if x > 0.0 {
            lo = lo.max(-1.0 / x);
        } else if x < 0.0 {
            hi = hi.min(-1.0 / x);
        }
    }
    let margin = 1e-9 * (hi - lo).abs().max(1e-12);
    let (lo, hi) = (lo + margin, hi - margin);
    if !(lo < hi) {
        return Err(Error::Domain("no weight keeps wealth positive for every draw".into()));
    }
    let f = |w: f64| expected_utility(w, draws, &om, gamma, rf).unwrap_or(f64::NEG_INFINITY);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut best = if fc >= fd { c } else { d };
    let mut fbest = fc.max(fd);
    // Parabolic refinement through (a, m, b).
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let denom = (m - a) * (fm - fb) - (m - b) * (fm - fa);
    if denom != 0.0 && fa.is_finite() && fb.is_finite() && fm.is_finite() {
        let x = m - 0.5 * ((m - a).powi(2) * (fm - fb) - (m - b).powi(2) * (fm - fa)) / denom;
        if x > a && x < b {
            let fx = f(x);
            if fx > fbest {
                best = x;
                fbest = fx;
            }
        }
    }
    for edge in [lo, hi] {
        if f(edge) > fbest {
            best = edge;
            fbest = f(edge);
        }
    }
    Ok(best)
}

/// Certainty-equivalent return of `model` over `bench`, annualized percent.
///
/// The monthly increment `δ` solves `avg U(W_bench e^δ) = avg U(W_model)`
/// for power utility, and `CER = 1200 δ`.
pub fn cer_relative(gross_model: &[f64], gross_bench: &[f64], gamma: f64) -> Result<f64> {
    if gross_model.is_empty() || gross_model.len() != gross_bench.len() {
        return Err(Error::Data("CER needs aligned, non-empty return series".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("risk aversion must be positive, got {gamma}")));
    }
    let bad: Vec<usize> = (0..gross_model.len()).filter(|&i| !(gross_model[i] > 0.0) || !(gross_bench[i] > 0.0)).collect();
    if !bad.is_empty() {
        return Err(Error::Domain(format!("non-positive realized wealth at dates {bad:?}")));
    }
    let delta = if gamma == 1.0 {
        let n = gross_model.len() as f64;
        (gross_model.iter().map(|x| x.ln()).sum::<f64>() - gross_bench.iter().map(|x| x.ln()).sum::<f64>()) / n
    } else {
        let k = 1.0 - gamma;
        let lm: Vec<f64> = gross_model.iter().map(|x| k * x.ln()).collect();
        let lb: Vec<f64> = gross_bench.iter().map(|x| k * x.ln()).collect();
        (log_sum_exp(&lm) - log_sum_exp(&lb)) / k
    };
    Ok(1200.0 * delta)
}

/// `k` equally weighted draws at the normal quantiles `(i + ½)/k`, used as
/// the predictive of the historical-mean benchmark.
pub fn gaussian_quantile_draws(mean: f64, sd: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 || !mean.is_finite() || !(sd >= 0.0) || !sd.is_finite() {
        return Err(Error::Domain(format!("quantile draws need k > 0 and finite moments (mean {mean}, sd {sd})")));
    }
    let z = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((0..k).map(|i| mean + sd * z.inverse_cdf((i as f64 + 0.5) / k as f64)).collect())
}

/// One row per forecast origin and maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub t: usize,
    pub maturity: usize,
    pub observed: f64,
    pub forecast: f64,
    pub benchmark: f64,
    pub weight: f64,
    pub bench_weight: f64,
    pub gross_return: f64,
    pub bench_gross_return: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BacktestLedger {
    pub rows: Vec<LedgerRow>,
}

impl BacktestLedger {
    /// Appends a row; origins must not decrease and each `(t, maturity)` pair
    /// appears once.
    pub fn push(&mut self, row: LedgerRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.t < last.t || (row.t == last.t && row.maturity <= last.maturity) {
                return Err(Error::Data(format!(
                    "ledger rows out of order: ({}, {}) after ({}, {})",
                    row.t, row.maturity, last.t, last.maturity
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn maturity(&self, n: usize) -> Vec<&LedgerRow> {
        self.rows.iter().filter(|r| r.maturity == n).collect()
    }

    pub fn maturities(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.rows.iter().map(|r| r.maturity).collect();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// Expanding-window historical mean of past excess returns.
pub fn expanding_mean(past: &[f64]) -> f64 {
    if past.is_empty() {
        0.0
    } else {
        past.iter().sum::<f64>() / past.len() as f64
    }
}

/// `R̄² = 1 − (1 − R²)(T − 1)/(T − p − 1)` for `y` on an intercept and the
/// `p` columns of `x`.
pub fn adjusted_r2(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<f64> {
    let t = y.len();
    let p = x.ncols();
    if x.nrows() != t {
        return Err(Error::Data("regressor rows differ from the response length".into()));
    }
    if t <= p + 1 {
        return Err(Error::Undefined(format!("{t} observations for {p} regressors")));
    }
    let mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Undefined("response has zero variance".into()));
    }
    let fit = ols_with_intercept(y, x);
    let ssr = fit.residuals.norm_squared();
    let r2 = 1.0 - ssr / sst;
    Ok(1.0 - (1.0 - r2) * (t as f64 - 1.0) / (t as f64 - p as f64 - 1.0))
}

/// `R̄²(base ∪ extra) − R̄²(base)`.
pub fn delta_adjusted_r2(y: &DVector<f64>, base: &DMatrix<f64>, extra: &DMatrix<f64>) -> Result<f64> {
    let full = DMatrix::from_fn(base.nrows(), base.ncols() + extra.ncols(), |r, c| {
        if c < base.ncols() {
            base[(r, c)]
        } else {
            extra[(r, c - base.ncols())]
        }
    });
    Ok(adjusted_r2(y, &full)? - adjusted_r2(y, base)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// Intercept first.
    pub coef: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rank_deficient: bool,
}

pub fn ols_with_intercept(y: &DVector<f64>, x: &DMatrix<f64>) -> OlsFit {
    let design = DMatrix::from_fn(y.len(), x.ncols() + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] });
    let (coef, rank_deficient) = least_squares(&design, y);
    let fitted = &design * &coef;
    let residuals = y - &fitted;
    OlsFit { coef, fitted, residuals, rank_deficient }
}

/// Decomposition of one GP equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpComponent {
    pub equation: usize,
    pub a: f64,
    pub b: DVector<f64>,
    pub v_hat: DVector<f64>,
    pub spanned: DVector<f64>,
    pub hidden: DVector<f64>,
    /// Adjusted R² of `v̂`, spanned and hidden parts on the lagged macro;
    /// `None` when undefined (zero variance).
    pub r2_v: Option<f64>,
    pub r2_spanned: Option<f64>,
    pub r2_hidden: Option<f64>,
    pub collinear_pcs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpDecomposition {
    pub components: Vec<RpComponent>,
}

/// Splits each column of `v_hat` (`T × 3`, row `r` is `v(M_r)`) into its
/// projection on `[1, P_{r+1}]` and the residual, then regresses all three on
/// `M_r`. `pcs` holds `P_1..P_T` and `lagged_macro` holds `M_0..M_{T−1}`.
pub fn rp_decompose(v_hat: &DMatrix<f64>, pcs: &DMatrix<f64>, lagged_macro: &[f64], equations: &[usize]) -> Result<RpDecomposition> {
    let t = v_hat.nrows();
    if pcs.nrows() != t || lagged_macro.len() != t {
        return Err(Error::Data(format!(
            "decomposition inputs misaligned: v̂ {t} rows, PCs {}, macro {}",
            pcs.nrows(),
            lagged_macro.len()
        )));
    }
    let m = DMatrix::from_column_slice(t, 1, lagged_macro);
    let spread = |y: &DVector<f64>| {
        let mean = y.mean();
        y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    };
    let mut components = vec![];
    for &j in equations {
        if j >= v_hat.ncols() {
            return Err(Error::Domain(format!("equation {j} out of range")));
        }
        let v = v_hat.column(j).into_owned();
        // Components with negligible variation relative to v̂ get no R̄².
        let floor = 1e-20 * spread(&v).max(f64::MIN_POSITIVE);
        let r2 = |y: &DVector<f64>| if spread(y) <= floor { None } else { adjusted_r2(y, &m).ok() };
        let fit = ols_with_intercept(&v, pcs);
        if fit.rank_deficient {
            log::warn!("PCs are collinear in the decomposition of equation {}", j + 1);
        }
        let b = fit.coef.rows(1, pcs.ncols()).into_owned();
        components.push(RpComponent {
            equation: j,
            a: fit.coef[0],
            b,
            r2_v: r2(&v),
            r2_spanned: r2(&fit.fitted),
            r2_hidden: r2(&fit.residuals),
            v_hat: v,
            spanned: fit.fitted,
            hidden: fit.residuals,
            collinear_pcs: fit.rank_deficient,
        });
    }
    Ok(RpDecomposition { components })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_draws_are_symmetric() {
        let d = gaussian_quantile_draws(0.01, 0.02, 200).unwrap();
        let m = d.iter().sum::<f64>() / 200.0;
        assert!((m - 0.01).abs() < 1e-12);
        assert!((d[0] - 0.01 + d[199] - 0.01).abs() < 1e-12);
        assert_eq!(gaussian_quantile_draws(0.5, 0.0, 3).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn r2_os_cases() {
        let e = [0.3, -0.1, 0.2];
        assert_eq!(r2_os(&e, &e).unwrap(), 0.0);
        assert_eq!(r2_os(&[0.0; 3], &e).unwrap(), 1.0);
        assert_eq!(r2_os(&[1.0, 1.0], &[2.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(r2_os(&e, &[0.0; 3]), Err(Error::Undefined(_))));
    }

    #[test]
    fn zero_differential_is_neutral() {
        let t = dm_cw_test(&[0.0; 20], 3).unwrap();
        assert_eq!((t.stat, t.p_value), (0.0, 0.5));
    }

    #[test]
    fn lag_zero_is_the_classical_t_stat() {
        let d: Vec<f64> = (0..30).map(|i| ((i * 37 % 11) as f64 - 4.0) / 7.0).collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let s2 = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let t = dm_cw_test(&d, 0).unwrap();
        assert!((t.stat - m / (s2 / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn short_series_rejected() {
        assert!(dm_cw_test(&[1.0; 9], 1).is_err());
    }

    #[test]
    fn nw_default_lags() {
        assert_eq!(default_nw_lags(100), 4);
        assert_eq!(default_nw_lags(120), 4);
        assert_eq!(default_nw_lags(10), 2);
    }

    #[test]
    fn zero_draws_give_zero_weight() {
        assert_eq!(optimal_weight(&[0.0; 5], &[0.2; 5], 3.0, 0.003).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_two_point_draws_give_zero_weight() {
        // Symmetric in gross payoff: simple returns ±x.
        let x: f64 = 0.02;
        let wsym = optimal_weight(&[x.ln_1p(), (-x).ln_1p()], &[0.5, 0.5], 3.0, 0.0).unwrap();
        assert!(wsym.abs() < 1e-6, "{wsym}");
    }

    #[test]
    fn cer_cases() {
        let b = [1.01, 0.99, 1.003, 1.02];
        assert_eq!(cer_relative(&b, &b, 3.0).unwrap(), 0.0);
        let c: f64 = 0.0015;
        let m: Vec<f64> = b.iter().map(|x| x * c.exp()).collect();
        assert!((cer_relative(&m, &b, 3.0).unwrap() - 1200.0 * c).abs() < 1e-10);
        assert!(cer_relative(&[1.0, -0.1], &[1.0, 1.0], 3.0).unwrap_err().to_string().contains("[1]"));
    }

    #[test]
    fn adjusted_r2_perfect_fit() {
        let x = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 5.0, 8.0]);
        let y = DVector::from_fn(5, |i, _| 0.5 + 2.0 * x[(i, 0)]);
        assert!((adjusted_r2(&y, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(adjusted_r2(&y.rows(0, 2).into_owned(), &x.rows(0, 2).into_owned()), Err(Error::Undefined(_))));
    }

    #[test]
    fn duplicate_regressor_only_pays_the_penalty() {
        let x = DMatrix::from_column_slice(6, 1, &[1.0, 2.0, 2.5, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 1.5, 3.0, 3.5, 4.0, 6.5]);
        assert!(delta_adjusted_r2(&y, &x, &x).unwrap() <= 0.0);
    }

    #[test]
    fn four_point_hand_regression() {
        // y on one regressor: slope Sxy/Sxx, R² = Sxy²/(Sxx Syy).
        let x = [1.0, 2.0, 4.0, 5.0];
        let y = [2.0, 3.0, 3.0, 6.0];
        let (mx, my) = (3.0, 3.5);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        let want = 1.0 - (1.0 - r2) * 3.0 / 2.0;
        let got = adjusted_r2(&DVector::from_column_slice(&y), &DMatrix::from_column_slice(4, 1, &x)).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn spanned_v_has_no_hidden_part() {
        let pcs = DMatrix::from_fn(12, 3, |r, c| ((r * (c + 2)) % 7) as f64 + 0.1 * (r * r) as f64 * c as f64);
        let v = DMatrix::from_fn(12, 3, |r, _| 0.2 + pcs[(r, 0)] - 0.5 * pcs[(r, 2)]);
        let m: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let d = rp_decompose(&v, &pcs, &m, &[0]).unwrap();
        let c = &d.components[0];
        assert!(c.hidden.amax() < 1e-10);
        assert!(c.r2_hidden.is_none());
    }
}
