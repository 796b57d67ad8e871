use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::termstructure::PcPanel;

/// Yield panel, its PC rotation and the macro series, aligned by row.
///
/// Row `t` of `yields` and `panel.p` is date `t`; `macros[t]` is `M_t`, so the
/// residual `s_t` (from `P_{t−1}` to `P_t`) is paired with `macros[t−1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelData {
    pub yields: DMatrix<f64>,
    pub maturities: Vec<usize>,
    pub panel: PcPanel,
    pub macros: Vec<f64>,
}

impl ModelData {
    /// Builds the PCs with a given (frozen) loading matrix.
    pub fn new(yields: DMatrix<f64>, maturities: Vec<usize>, w: &DMatrix<f64>, macros: Vec<f64>) -> Result<Self> {
        if yields.ncols() != maturities.len() {
            return Err(Error::Data(format!(
                "panel has {} columns but {} maturities were declared",
                yields.ncols(),
                maturities.len()
            )));
        }
        if !macros.is_empty() && macros.len() != yields.nrows() {
            return Err(Error::Data(format!(
                "macro series has {} values for {} dates",
                macros.len(),
                yields.nrows()
            )));
        }
        if maturities.is_empty() || maturities[0] == 0 || maturities.windows(2).any(|m| m[0] >= m[1]) {
            return Err(Error::Data(format!("maturities must be positive and ascending, got {maturities:?}")));
        }
        let panel = PcPanel::with_loadings(&yields, w)?;
        Ok(Self { yields, maturities, panel, macros })
    }

    pub fn n_obs(&self) -> usize {
        self.yields.nrows()
    }

    pub fn max_maturity(&self) -> usize {
        *self.maturities.last().unwrap()
    }

    /// Measurement-error dimension `J − N`.
    pub fn error_dim(&self) -> usize {
        self.maturities.len() - self.panel.n_factors()
    }

    /// Rows `0..=t_end`.
    pub fn truncated(&self, t_end: usize) -> Self {
        let rows = (t_end + 1).min(self.n_obs());
        Self {
            yields: self.yields.rows(0, rows).into_owned(),
            maturities: self.maturities.clone(),
            panel: PcPanel {
                p: self.panel.p.rows(0, rows).into_owned(),
                w: self.panel.w.clone(),
                w_perp: self.panel.w_perp.clone(),
            },
            macros: if self.macros.is_empty() { vec![] } else { self.macros[..rows].to_vec() },
        }
    }
}
