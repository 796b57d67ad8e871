//! CSV emission. Numbers use the shortest representation that round-trips,
//! so identical runs give identical bytes.

use std::path::Path;

use chrono::NaiveDate;
use gpdtsm::evaluation::{BacktestLedger, LedgerRow, RpDecomposition};
use gpdtsm::forecast::VPosterior;
use nalgebra::DMatrix;

use crate::CliError;

pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "NA".into()
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), num)
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Validation(format!("creating {}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes yields (annualized) in the `date,m<k>,...` schema.
pub fn write_yields(path: &Path, dates: &[NaiveDate], maturities: &[usize], yields: &DMatrix<f64>) -> Result<(), CliError> {
    let header: Vec<String> = std::iter::once("date".to_string()).chain(maturities.iter().map(|m| format!("m{m}"))).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = dates.iter().enumerate().map(|(t, d)| {
        std::iter::once(d.to_string()).chain(yields.row(t).iter().map(|y| num(y * 12.0))).collect()
    });
    write_rows(path, &header, rows)
}

pub fn write_macros(path: &Path, name: &str, dates: &[NaiveDate], macros: &[f64]) -> Result<(), CliError> {
    write_rows(path, &["date", name], dates.iter().zip(macros).map(|(d, m)| vec![d.to_string(), num(*m)]))
}

const LEDGER_HEADER: [&str; 11] = [
    "date",
    "t",
    "maturity",
    "observed",
    "forecast",
    "benchmark",
    "weight",
    "bench_weight",
    "gross_return",
    "bench_gross_return",
    "error",
];

pub fn write_ledger(path: &Path, dates: &[NaiveDate], ledger: &BacktestLedger) -> Result<(), CliError> {
    let rows = ledger.rows.iter().map(|r| {
        vec![
            dates[r.t].to_string(),
            r.t.to_string(),
            r.maturity.to_string(),
            num(r.observed),
            num(r.forecast),
            num(r.benchmark),
            num(r.weight),
            num(r.bench_weight),
            num(r.gross_return),
            num(r.bench_gross_return),
            num(r.observed - r.forecast),
        ]
    });
    write_rows(path, &LEDGER_HEADER, rows)
}

pub fn read_ledger(path: &Path) -> Result<BacktestLedger, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Validation(format!("opening {}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != LEDGER_HEADER {
        return Err(CliError::Validation(format!("{} is not a forecast ledger", path.display())));
    }
    let mut ledger = BacktestLedger::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |c: usize| CliError::Validation(format!("{} line {}: bad value in column '{}'", path.display(), i + 2, LEDGER_HEADER[c]));
        let u = |c: usize| rec[c].parse::<usize>().map_err(|_| bad(c));
        let f = |c: usize| if &rec[c] == "NA" { Ok(f64::NAN) } else { rec[c].parse::<f64>().map_err(|_| bad(c)) };
        ledger.push(LedgerRow {
            t: u(1)?,
            maturity: u(2)?,
            observed: f(3)?,
            forecast: f(4)?,
            benchmark: f(5)?,
            weight: f(6)?,
            bench_weight: f(7)?,
            gross_return: f(8)?,
            bench_gross_return: f(9)?,
        })?;
    }
    Ok(ledger)
}

/// One line of the evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub benchmark: String,
    pub maturity: usize,
    pub n_forecasts: usize,
    pub r2_os: Option<f64>,
    pub cer: Option<f64>,
    pub test_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub degenerate: bool,
}

pub fn write_evaluation(path: &Path, rows: &[EvalRow]) -> Result<(), CliError> {
    let header = ["benchmark", "maturity", "n_forecasts", "r2_os", "cer_pct", "cw_stat", "p_value", "stars", "degenerate"];
    let out = rows.iter().map(|r| {
        let stars = r.p_value.map_or("", gpdtsm::evaluation::significance_stars);
        vec![
            r.benchmark.clone(),
            r.maturity.to_string(),
            r.n_forecasts.to_string(),
            opt(r.r2_os),
            opt(r.cer),
            opt(r.test_stat),
            opt(r.p_value),
            stars.to_string(),
            r.degenerate.to_string(),
        ]
    });
    write_rows(path, &header, out)
}

/// Coefficients and R̄² per GP equation, plus the component series.
pub fn write_decomposition(dir: &Path, dates: &[NaiveDate], dec: &RpDecomposition) -> Result<(), CliError> {
    let header = ["equation", "a", "b1", "b2", "b3", "r2_v", "r2_spanned", "r2_hidden", "collinear_pcs"];
    let rows = dec.components.iter().map(|c| {
        let mut r = vec![(c.equation + 1).to_string(), num(c.a)];
        r.extend(c.b.iter().map(|b| num(*b)));
        r.extend([opt(c.r2_v), opt(c.r2_spanned), opt(c.r2_hidden), c.collinear_pcs.to_string()]);
        r
    });
    write_rows(&dir.join("decomposition.csv"), &header, rows)?;
    let series = dec.components.iter().flat_map(|c| {
        (0..c.v_hat.len()).map(move |r| {
            vec![dates[r + 1].to_string(), (c.equation + 1).to_string(), num(c.v_hat[r]), num(c.spanned[r]), num(c.hidden[r])]
        })
    });
    write_rows(&dir.join("decomposition_series.csv"), &["date", "equation", "v_hat", "spanned", "hidden"], series)
}

/// Posterior mean and 95% band of `v` against the lagged macro, one file per
/// active equation. Row `r` pairs `v(M_r)` with the residual dated `r + 1`.
pub fn write_scatter(
    dir: &Path,
    dates: &[NaiveDate],
    raw_macro: &[f64],
    std_macro: &[f64],
    vp: &VPosterior,
    equations: &[usize],
) -> Result<(), CliError> {
    for &j in equations {
        let rows = (0..vp.mean.nrows()).map(|r| {
            vec![
                dates[r + 1].to_string(),
                num(raw_macro[r]),
                num(std_macro[r]),
                num(vp.mean[(r, j)]),
                num(vp.lower[(r, j)]),
                num(vp.upper[(r, j)]),
            ]
        });
        let header = ["date", "macro_lag", "macro_lag_std", "v_mean", "v_lower", "v_upper"];
        write_rows(&dir.join(format!("vhat_scatter_eq{}.csv", j + 1)), &header, rows)?;
    }
    Ok(())
}

/// Any `T × k` matrix with a date column.
pub fn write_matrix(path: &Path, dates: &[NaiveDate], names: &[&str], m: &DMatrix<f64>) -> Result<(), CliError> {
    let header: Vec<&str> = std::iter::once("date").chain(names.iter().copied()).collect();
    let rows = (0..m.nrows()).map(|r| std::iter::once(dates[r].to_string()).chain(m.row(r).iter().map(|x| num(*x))).collect());
    write_rows(path, &header, rows)
}
