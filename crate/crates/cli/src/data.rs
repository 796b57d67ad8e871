//! CSV ingestion, macro standardization and the audited data view.

use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use gpdtsm::inference::ModelData;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Yields and (raw) macro values on a common monthly date grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub dates: Vec<NaiveDate>,
    pub maturities: Vec<usize>,
    /// Monthly decimal yields, `(T+1) × J`.
    pub yields: DMatrix<f64>,
    /// Empty when the model uses no macro.
    pub macros: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationMeta {
    pub mean: f64,
    pub sd: f64,
    pub applied: bool,
}

fn invalid(msg: String) -> CliError {
    CliError::Validation(msg)
}

fn month_index(d: NaiveDate) -> i64 {
    d.year() as i64 * 12 + d.month0() as i64
}

/// Checks that dates advance one calendar month per row. `first_line` is the
/// file line of the first data row.
fn check_monthly(dates: &[NaiveDate], first_line: usize, what: &str) -> Result<(), CliError> {
    for (i, w) in dates.windows(2).enumerate() {
        let step = month_index(w[1]) - month_index(w[0]);
        if step != 1 {
            let line = first_line + i + 1;
            let kind = if step <= 0 { "is not after the previous date" } else { "skips a month" };
            return Err(invalid(format!("{what} row at line {line}: date {} {kind} ({})", w[1], w[0])));
        }
    }
    Ok(())
}

fn parse_cell(cell: &str, line: usize, col: &str, what: &str) -> Result<f64, CliError> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(invalid(format!("{what} line {line}, column '{col}': '{cell}' is not a finite number"))),
    }
}

fn parse_date_cell(cell: &str, line: usize, what: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(cell.trim(), "%Y-%m-%d")
        .map_err(|_| invalid(format!("{what} line {line}: '{cell}' is not an ISO date")))
}

/// Reads `date,m<k>,...` with annualized decimal yields, keeping the declared
/// maturities (in the declared order) and converting to monthly units.
pub fn read_yields<R: Read>(src: R, maturities: &[usize]) -> Result<(Vec<NaiveDate>, DMatrix<f64>), CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(src);
    let header = rdr.headers().map_err(|e| invalid(format!("yields header: {e}")))?.clone();
    if header.get(0).map(str::trim) != Some("date") {
        return Err(invalid("yields header must start with 'date'".into()));
    }
    let mut file_mats = vec![];
    for name in header.iter().skip(1) {
        let m = name
            .trim()
            .strip_prefix('m')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&m| m > 0)
            .ok_or_else(|| invalid(format!("yields header column '{name}' is not of the form m<months>")))?;
        file_mats.push(m);
    }
    let cols: Vec<usize> = maturities
        .iter()
        .map(|m| {
            file_mats
                .iter()
                .position(|x| x == m)
                .map(|p| p + 1)
                .ok_or_else(|| invalid(format!("declared maturity m{m} is not a column of the yields file")))
        })
        .collect::<Result<_, _>>()?;
    let mut dates = vec![];
    let mut rows: Vec<f64> = vec![];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| invalid(format!("yields line {line}: {e}")))?;
        dates.push(parse_date_cell(rec.get(0).unwrap_or(""), line, "yields")?);
        for &c in &cols {
            let name = &header[c];
            let cell = rec.get(c).ok_or_else(|| invalid(format!("yields line {line}: missing column '{name}'")))?;
            rows.push(parse_cell(cell, line, name, "yields")? / 12.0);
        }
    }
    if dates.is_empty() {
        return Err(invalid("yields file has no data rows".into()));
    }
    check_monthly(&dates, 2, "yields")?;
    Ok((dates.clone(), DMatrix::from_row_slice(dates.len(), maturities.len(), &rows)))
}

/// Reads `date,<macro_name>`.
pub fn read_macros<R: Read>(src: R, macro_name: &str) -> Result<(Vec<NaiveDate>, Vec<f64>), CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(src);
    let header = rdr.headers().map_err(|e| invalid(format!("macros header: {e}")))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != ["date", macro_name] {
        return Err(invalid(format!("macros header must be 'date,{macro_name}', got '{}'", names.join(","))));
    }
    let mut dates = vec![];
    let mut vals = vec![];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| invalid(format!("macros line {line}: {e}")))?;
        dates.push(parse_date_cell(rec.get(0).unwrap_or(""), line, "macros")?);
        vals.push(parse_cell(rec.get(1).unwrap_or(""), line, macro_name, "macros")?);
    }
    check_monthly(&dates, 2, "macros")?;
    Ok((dates, vals))
}

/// Loads and cross-checks both files. Macros are read only when `macro_name`
/// is given and must cover exactly the yield dates.
pub fn load_panel(yields_csv: &Path, macros_csv: Option<(&Path, &str)>, maturities: &[usize]) -> Result<PanelData, CliError> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| invalid(format!("opening {}: {e}", p.display())));
    let (dates, yields) = read_yields(open(yields_csv)?, maturities)?;
    let macros = match macros_csv {
        None => vec![],
        Some((path, name)) => {
            let (md, mv) = read_macros(open(path)?, name)?;
            align(&dates, &md)?;
            mv
        }
    };
    Ok(PanelData { dates, maturities: maturities.to_vec(), yields, macros })
}

fn align(yd: &[NaiveDate], md: &[NaiveDate]) -> Result<(), CliError> {
    for (i, (a, b)) in yd.iter().zip(md).enumerate() {
        if a != b {
            return Err(invalid(format!("macros line {}: date {b} does not match yields date {a}", i + 2)));
        }
    }
    if yd.len() != md.len() {
        return Err(invalid(format!("yields have {} dates but macros have {}", yd.len(), md.len())));
    }
    Ok(())
}

/// Mean and sample standard deviation over rows `0..=train_end`; applied only
/// when `apply` is set.
pub fn standardize(macros: &[f64], train_end: usize, apply: bool) -> Result<(Vec<f64>, StandardizationMeta), CliError> {
    if !apply || macros.is_empty() {
        return Ok((macros.to_vec(), StandardizationMeta { mean: 0.0, sd: 1.0, applied: false }));
    }
    let train = &macros[..=train_end.min(macros.len() - 1)];
    if train.len() < 2 {
        return Err(invalid("macro standardization needs at least two training dates".into()));
    }
    let n = train.len() as f64;
    let mean = train.iter().sum::<f64>() / n;
    let sd = (train.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(invalid("macro series is constant over the training window".into()));
    }
    Ok((macros.iter().map(|x| (x - mean) / sd).collect(), StandardizationMeta { mean, sd, applied: true }))
}

/// Row index of `date`, which must be on the panel's grid.
pub fn date_index(dates: &[NaiveDate], date: NaiveDate, key: &str) -> Result<usize, CliError> {
    dates.iter().position(|d| *d == date).ok_or_else(|| {
        invalid(format!(
            "{key} {date} is not a panel date (panel runs {} to {})",
            dates[0],
            dates[dates.len() - 1]
        ))
    })
}

/// Read access to the data that records every request for a row dated after
/// the current origin.
#[derive(Debug)]
pub struct DataView<'a> {
    data: &'a ModelData,
    origin: usize,
    violations: Vec<String>,
}

impl<'a> DataView<'a> {
    pub fn new(data: &'a ModelData, origin: usize) -> Self {
        Self { data, origin, violations: vec![] }
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    /// Moves the origin one date forward, revealing that date.
    pub fn advance(&mut self) {
        self.origin += 1;
    }

    fn check(&mut self, t: usize, what: &str) {
        if t > self.origin {
            self.violations.push(format!("{what} at date {t} read with origin {}", self.origin));
        }
    }

    /// Dates `0..=origin`.
    pub fn visible(&self) -> ModelData {
        self.data.truncated(self.origin)
    }

    pub fn yields_row(&mut self, t: usize) -> Vec<f64> {
        self.check(t, "yields");
        self.data.yields.row(t).iter().copied().collect()
    }

    pub fn pcs(&mut self, t: usize) -> nalgebra::DVector<f64> {
        self.check(t, "PCs");
        self.data.panel.pcs_at(t)
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }
}
