//! Model identifiers and the flat parameter vector shared by the optimizer,
//! the MCMC kernel and the particle system.
//!
//! Coordinates of `θ` (all unconstrained):
//!
//! | index            | meaning                                                   |
//! |------------------|-----------------------------------------------------------|
//! | 0                | `log σ_e²`                                                |
//! | 1                | `1200·k_∞^Q`                                              |
//! | 2..5             | `g_1`, `log(g_1−g_2)`, `log(g_2−g_3)`                     |
//! | 5..11            | `1200·Σ_P` lower triangle, row-major, log on the diagonal |
//! | then             | `log ℓ_j` for active GP blocks                            |
//! | then             | `1200·λ_0P` (if free), `λ_1P` entries (`λ_{1,2}` or all)  |
//! | then             | `1200·Φ_PM` rows left free by the mask (linear model)     |
//!
//! Quantities quoted in monthly decimal units are rescaled by 1200 so the
//! coordinates are of order one in annualized percent.

use std::fmt;
use std::ops::Range;

use nalgebra::{ComplexField, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::termstructure::QParams;

pub const N_FACTORS: usize = 3;
/// Monthly decimal to annualized percent.
pub const UNIT_SCALE: f64 = 1200.0;

pub const IDX_SIGMA_E: usize = 0;
pub const IDX_K_INF: usize = 1;
pub const IDX_G: usize = 2;
pub const IDX_CHOL: usize = 5;
pub const N_PRICING: usize = 10;
pub const CHOL_POSITIONS: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacroForm {
    None,
    Gp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lambda1Spec {
    /// Only `λ_{1,2}` free.
    Only12,
    /// All nine entries free.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskPriceSpec {
    pub lambda0_free: bool,
    pub lambda1: Lambda1Spec,
}

impl RiskPriceSpec {
    pub const RESTRICTED: Self = Self { lambda0_free: false, lambda1: Lambda1Spec::Only12 };
    pub const FREE: Self = Self { lambda0_free: true, lambda1: Lambda1Spec::All };
}

/// A model: macro form, activity mask `(i,j,k)` and risk-price restrictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub form: MacroForm,
    pub mask: [bool; N_FACTORS],
    pub risk: RiskPriceSpec,
}

impl ModelSpec {
    pub fn yields_only() -> Self {
        Self { form: MacroForm::None, mask: [false; N_FACTORS], risk: RiskPriceSpec::RESTRICTED }
    }

    pub fn gp(mask: [bool; N_FACTORS]) -> Self {
        Self { form: MacroForm::Gp, mask, risk: RiskPriceSpec::RESTRICTED }
    }

    pub fn linear(mask: [bool; N_FACTORS]) -> Self {
        Self { form: MacroForm::Linear, mask, risk: RiskPriceSpec::RESTRICTED }
    }

    /// Parses `M0`, `M1`, `GP_ijk` or `LM_ijk` with `i,j,k ∈ {0,1}`.
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "M0" => return Ok(Self { risk: RiskPriceSpec::FREE, ..Self::yields_only() }),
            "M1" => return Ok(Self::yields_only()),
            _ => {}
        }
        let (form, bits) = if let Some(b) = id.strip_prefix("GP_") {
            (MacroForm::Gp, b)
        } else if let Some(b) = id.strip_prefix("LM_") {
            (MacroForm::Linear, b)
        } else {
            return Err(Error::Spec(format!("unknown model id '{id}' (expected M0, M1, GP_ijk or LM_ijk)")));
        };
        if bits.len() != N_FACTORS || !bits.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::Spec(format!("model id '{id}' needs a mask of three 0/1 digits")));
        }
        let mut mask = [false; N_FACTORS];
        for (m, c) in mask.iter_mut().zip(bits.chars()) {
            *m = c == '1';
        }
        Ok(Self { form, mask, risk: RiskPriceSpec::RESTRICTED })
    }

    pub fn has_macro(&self) -> bool {
        self.form != MacroForm::None && self.mask.iter().any(|&m| m)
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: String = self.mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
        match self.form {
            MacroForm::None if self.risk == RiskPriceSpec::FREE => write!(f, "M0"),
            MacroForm::None => write!(f, "M1"),
            MacroForm::Gp => write!(f, "GP_{bits}"),
            MacroForm::Linear => write!(f, "LM_{bits}"),
        }
    }
}

/// Index map of `θ` for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub spec: ModelSpec,
    /// GP blocks with a free length-scale.
    pub active: Vec<usize>,
    /// `λ_1P` entries that are free, row-major.
    pub lambda1_entries: Vec<(usize, usize)>,
    /// Rows of `Φ_PM` that are free.
    pub pm_rows: Vec<usize>,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let active = match spec.form {
            MacroForm::Gp => (0..N_FACTORS).filter(|&j| spec.mask[j]).collect(),
            _ => vec![],
        };
        let pm_rows = match spec.form {
            MacroForm::Linear => (0..N_FACTORS).filter(|&j| spec.mask[j]).collect(),
            _ => vec![],
        };
        let lambda1_entries = match spec.risk.lambda1 {
            Lambda1Spec::Only12 => vec![(0, 1)],
            Lambda1Spec::All => (0..N_FACTORS).flat_map(|i| (0..N_FACTORS).map(move |j| (i, j))).collect(),
        };
        Self { spec: spec.clone(), active, lambda1_entries, pm_rows }
    }

    pub fn ell_range(&self) -> Range<usize> {
        let s = IDX_CHOL + 6;
        s..s + self.active.len()
    }

    pub fn lambda0_range(&self) -> Range<usize> {
        let s = self.ell_range().end;
        s..s + if self.spec.risk.lambda0_free { N_FACTORS } else { 0 }
    }

    pub fn lambda1_range(&self) -> Range<usize> {
        let s = self.lambda0_range().end;
        s..s + self.lambda1_entries.len()
    }

    pub fn pm_range(&self) -> Range<usize> {
        let s = self.lambda1_range().end;
        s..s + self.pm_rows.len()
    }

    pub fn dim(&self) -> usize {
        self.pm_range().end
    }

    /// Metropolis blocks: `Σ_P`, `(k_∞^Q, g^Q)`, then the remaining coordinates.
    /// `σ_e²` is handled by its own Gibbs step.
    pub fn mh_blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![(IDX_CHOL..IDX_CHOL + 6).collect::<Vec<_>>(), (IDX_K_INF..IDX_CHOL).collect()];
        let rest: Vec<usize> = (IDX_CHOL + 6..self.dim()).collect();
        if !rest.is_empty() {
            blocks.push(rest);
        }
        blocks
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = vec![
            "log_sigma_e2".to_string(),
            "k_inf_q".into(),
            "g1".into(),
            "log_dg2".into(),
            "log_dg3".into(),
        ];
        for (i, j) in CHOL_POSITIONS {
            n.push(if i == j { format!("log_chol_{}{}", i + 1, j + 1) } else { format!("chol_{}{}", i + 1, j + 1) });
        }
        n.extend(self.active.iter().map(|j| format!("log_ell_{}", j + 1)));
        if self.spec.risk.lambda0_free {
            n.extend((0..N_FACTORS).map(|i| format!("lambda0_{}", i + 1)));
        }
        n.extend(self.lambda1_entries.iter().map(|(i, j)| format!("lambda1_{}{}", i + 1, j + 1)));
        n.extend(self.pm_rows.iter().map(|i| format!("phi_pm_{}", i + 1)));
        n
    }

    pub fn check(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Domain(format!("θ has length {}, layout expects {}", theta.len(), self.dim())));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("θ has non-finite coordinates".into()));
        }
        Ok(())
    }

    /// Natural-scale parameters of a particle.
    pub fn decode(&self, theta: &DVector<f64>) -> Result<Params> {
        self.check(theta)?;
        let (k, g, chol) = decode_pricing::<f64>(&pricing_slice(theta));
        let qp = QParams {
            k_inf_q: k,
            g_q: DVector::from_column_slice(&g),
            sigma_p_chol: chol,
            sigma_e2: theta[IDX_SIGMA_E].exp(),
        };
        let mut ell = [1.0; N_FACTORS];
        for (i, &j) in self.active.iter().enumerate() {
            ell[j] = theta[self.ell_range().start + i].exp();
        }
        let mut lambda0 = DVector::zeros(N_FACTORS);
        for (i, x) in theta.rows_range(self.lambda0_range()).iter().enumerate() {
            lambda0[i] = x / UNIT_SCALE;
        }
        let mut lambda1 = DMatrix::zeros(N_FACTORS, N_FACTORS);
        for (&(i, j), x) in self.lambda1_entries.iter().zip(theta.rows_range(self.lambda1_range()).iter()) {
            lambda1[(i, j)] = *x;
        }
        let mut phi_pm = DVector::zeros(N_FACTORS);
        for (&r, x) in self.pm_rows.iter().zip(theta.rows_range(self.pm_range()).iter()) {
            phi_pm[r] = x / UNIT_SCALE;
        }
        Ok(Params { qp, ell, lambda0, lambda1, phi_pm })
    }

    /// Inverse of [`decode`](Self::decode).
    pub fn encode(&self, p: &Params) -> Result<DVector<f64>> {
        p.qp.validate()?;
        let mut theta = DVector::zeros(self.dim());
        theta[IDX_SIGMA_E] = p.qp.sigma_e2.ln();
        theta[IDX_K_INF] = p.qp.k_inf_q * UNIT_SCALE;
        let g = &p.qp.g_q;
        theta[IDX_G] = g[0];
        theta[IDX_G + 1] = (g[0] - g[1]).ln();
        theta[IDX_G + 2] = (g[1] - g[2]).ln();
        for (c, &(i, j)) in CHOL_POSITIONS.iter().enumerate() {
            let v = p.qp.sigma_p_chol[(i, j)] * UNIT_SCALE;
            theta[IDX_CHOL + c] = if i == j { v.ln() } else { v };
        }
        for (i, &j) in self.active.iter().enumerate() {
            if !(p.ell[j] > 0.0) {
                return Err(Error::Domain(format!("length-scale {j} must be positive")));
            }
            theta[self.ell_range().start + i] = p.ell[j].ln();
        }
        for (i, idx) in self.lambda0_range().enumerate() {
            theta[idx] = p.lambda0[i] * UNIT_SCALE;
        }
        for (&(i, j), idx) in self.lambda1_entries.iter().zip(self.lambda1_range()) {
            theta[idx] = p.lambda1[(i, j)];
        }
        for (&r, idx) in self.pm_rows.iter().zip(self.pm_range()) {
            theta[idx] = p.phi_pm[r] * UNIT_SCALE;
        }
        Ok(theta)
    }

    /// `λ_γ = (λ_{1,2}, free Φ_PM rows)` of the linear model.
    pub fn lambda_gamma(&self, p: &Params) -> DVector<f64> {
        let mut v = vec![p.lambda1[(0, 1)]];
        v.extend(self.pm_rows.iter().map(|&r| p.phi_pm[r]));
        DVector::from_vec(v)
    }
}

/// Natural-scale parameters decoded from `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub qp: QParams,
    /// Length-scales; inactive entries are unused.
    pub ell: [f64; N_FACTORS],
    pub lambda0: DVector<f64>,
    pub lambda1: DMatrix<f64>,
    pub phi_pm: DVector<f64>,
}

pub(crate) fn pricing_slice(theta: &DVector<f64>) -> [f64; N_PRICING] {
    let mut out = [0.0; N_PRICING];
    out.copy_from_slice(&theta.as_slice()[IDX_K_INF..IDX_K_INF + N_PRICING]);
    out
}

/// `(k_∞^Q, g^Q, Σ_P)` from the ten pricing coordinates, generic so complex
/// perturbations propagate through the transforms.
pub(crate) fn decode_pricing<T: ComplexField<RealField = f64> + Copy>(raw: &[T; N_PRICING]) -> (T, [T; N_FACTORS], DMatrix<T>) {
    let scale = T::from_real(1.0 / UNIT_SCALE);
    let k = raw[0] * scale;
    let g1 = raw[1];
    let g2 = g1 - raw[2].exp();
    let g3 = g2 - raw[3].exp();
    let mut chol = DMatrix::from_element(N_FACTORS, N_FACTORS, T::zero());
    for (c, &(i, j)) in CHOL_POSITIONS.iter().enumerate() {
        let v = raw[4 + c];
        chol[(i, j)] = if i == j { v.exp() * scale } else { v * scale };
    }
    (k, [g1, g2, g3], chol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_ids() {
        let s = ModelSpec::parse("GP_110").unwrap();
        assert_eq!(s.form, MacroForm::Gp);
        assert_eq!(s.mask, [true, true, false]);
        assert_eq!(s.to_string(), "GP_110");
        assert_eq!(ModelSpec::parse("LM_011").unwrap().to_string(), "LM_011");
        assert_eq!(ModelSpec::parse("M0").unwrap().risk, RiskPriceSpec::FREE);
        assert!(!ModelSpec::parse("M1").unwrap().has_macro());
        assert!(ModelSpec::parse("GP_12").is_err());
        assert!(ModelSpec::parse("XX").is_err());
    }

    #[test]
    fn layout_dimensions() {
        assert_eq!(ModelSpec::parse("M1").unwrap().layout().dim(), 12);
        assert_eq!(ModelSpec::parse("M0").unwrap().layout().dim(), 23);
        assert_eq!(ModelSpec::parse("GP_101").unwrap().layout().dim(), 14);
        assert_eq!(ModelSpec::parse("LM_111").unwrap().layout().dim(), 15);
        let l = ModelSpec::parse("GP_111").unwrap().layout();
        assert_eq!(l.names().len(), l.dim());
        let covered: usize = l.mh_blocks().iter().map(|b| b.len()).sum();
        assert_eq!(covered + 1, l.dim());
    }

    #[test]
    fn encode_decode_round_trip() {
        for id in ["M0", "M1", "GP_111", "LM_101"] {
            let l = ModelSpec::parse(id).unwrap().layout();
            let theta = DVector::from_fn(l.dim(), |i, _| 0.1 * (i as f64).sin() - 0.2);
            let p = l.decode(&theta).unwrap();
            assert!(p.qp.g_q[0] > p.qp.g_q[1] && p.qp.g_q[1] > p.qp.g_q[2]);
            let back = l.encode(&p).unwrap();
            assert!((back - &theta).amax() < 1e-12, "{id}");
        }
    }
}
