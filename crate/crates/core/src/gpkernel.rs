//! Squared-exponential kernel and the block-diagonal covariance of the three
//! GP-mean functions `v_1, v_2, v_3` evaluated at the lagged macro inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_BLOCKS: usize = 3;

/// Length-scales, signal standard deviations and the activity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHypers {
    pub ell: [f64; N_BLOCKS],
    pub sigma: [f64; N_BLOCKS],
    pub active: [bool; N_BLOCKS],
}

impl KernelHypers {
    pub fn inactive() -> Self {
        Self { ell: [1.0; N_BLOCKS], sigma: [0.0; N_BLOCKS], active: [false; N_BLOCKS] }
    }

    pub fn any_active(&self) -> bool {
        (0..N_BLOCKS).any(|j| self.is_on(j))
    }

    /// Block contributes a non-zero covariance.
    pub fn is_on(&self, j: usize) -> bool {
        self.active[j] && self.sigma[j] != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..N_BLOCKS {
            if self.active[j] && !(self.ell[j] > 0.0 && self.ell[j].is_finite()) {
                return Err(Error::Domain(format!("length-scale of block {j} must be positive, got {}", self.ell[j])));
            }
            if !(self.sigma[j] >= 0.0 && self.sigma[j].is_finite()) {
                return Err(Error::Domain(format!("signal sd of block {j} must be non-negative, got {}", self.sigma[j])));
            }
        }
        Ok(())
    }
}

/// `σ² exp(−‖x_a − x_b‖² / 2ℓ²)`.
pub fn sqexp(x_a: &[f64], x_b: &[f64], ell: f64, sigma: f64) -> f64 {
    let d2: f64 = x_a.iter().zip(x_b).map(|(a, b)| (a - b) * (a - b)).sum();
    sigma * sigma * (-0.5 * d2 / (ell * ell)).exp()
}

/// Pairwise squared distances of scalar inputs.
pub fn sq_dist(macros: &[f64]) -> DMatrix<f64> {
    let t = macros.len();
    DMatrix::from_fn(t, t, |a, b| (macros[a] - macros[b]).powi(2))
}

/// Block-diagonal prior covariance `K = diag(K_1, K_2, K_3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpCov {
    pub blocks: Vec<DMatrix<f64>>,
    pub inputs: Vec<f64>,
    pub hypers: KernelHypers,
}

impl GpCov {
    pub fn t_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_zero(&self) -> bool {
        !self.hypers.any_active()
    }

    /// Dense `3T×3T` matrix in equation-major order.
    pub fn dense(&self) -> DMatrix<f64> {
        let t = self.t_len();
        let mut k = DMatrix::zeros(N_BLOCKS * t, N_BLOCKS * t);
        for (j, b) in self.blocks.iter().enumerate() {
            k.view_mut((j * t, j * t), (t, t)).copy_from(b);
        }
        k
    }
}

fn check_finite(macros: &[f64]) -> Result<()> {
    if let Some(i) = macros.iter().position(|m| !m.is_finite()) {
        return Err(Error::Data(format!("macro input at position {i} is not finite")));
    }
    Ok(())
}

/// Gram matrices of the active blocks on `M_0, …, M_{T−1}`; inactive blocks are zero.
pub fn build_block_k(macros: &[f64], hypers: &KernelHypers) -> Result<GpCov> {
    check_finite(macros)?;
    hypers.validate()?;
    let t = macros.len();
    let d2 = sq_dist(macros);
    let blocks = (0..N_BLOCKS)
        .map(|j| {
            if hypers.is_on(j) {
                let (ell, s2) = (hypers.ell[j], hypers.sigma[j].powi(2));
                d2.map(|d| s2 * (-0.5 * d / (ell * ell)).exp())
            } else {
                DMatrix::zeros(t, t)
            }
        })
        .collect();
    Ok(GpCov { blocks, inputs: macros.to_vec(), hypers: hypers.clone() })
}

/// Prior covariance of `v(M_T)` with itself (`k0`, diagonal `3×3`) and with the
/// training function values (`k_next`, `3T×3`, column `j` non-zero only in block `j`).
pub fn build_cross_k(macros: &[f64], m_t: f64, hypers: &KernelHypers) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_finite(macros)?;
    check_finite(&[m_t])?;
    hypers.validate()?;
    let t = macros.len();
    let mut k0 = DMatrix::zeros(N_BLOCKS, N_BLOCKS);
    let mut k_next = DMatrix::zeros(N_BLOCKS * t, N_BLOCKS);
    for j in 0..N_BLOCKS {
        if !hypers.is_on(j) {
            continue;
        }
        k0[(j, j)] = hypers.sigma[j].powi(2);
        for (s, &m) in macros.iter().enumerate() {
            k_next[(j * t + s, j)] = sqexp(&[m], &[m_t], hypers.ell[j], hypers.sigma[j]);
        }
    }
    Ok((k0, k_next))
}

/// Cross-covariance vector of one block between new inputs and training inputs.
pub fn cross_block(train: &[f64], x: f64, ell: f64, sigma: f64) -> DVector<f64> {
    DVector::from_iterator(train.len(), train.iter().map(|&m| sqexp(&[m], &[x], ell, sigma)))
}
