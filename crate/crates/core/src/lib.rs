//! Gaussian dynamic term-structure models whose real-world factor dynamics
//! carry an unspanned, possibly nonlinear macro effect.
//!
//! The macro effect `v(M_{t-1})` enters the VAR of the first three principal
//! components of the yield curve either linearly or through independent
//! squared-exponential Gaussian-process priors, one per equation. Parameters
//! are learned sequentially with iterated batch importance sampling (IBIS)
//! and hybrid adaptive tempering, and the particle output drives one-month
//! excess-return forecasts, power-utility allocations and risk-premium
//! decompositions.
//!
//! Units: maturities are in months and yields are continuously compounded
//! decimals per month (an annualized 6% yield is `0.005`).

pub mod error;
pub mod evaluation;
pub mod forecast;
pub mod gpkernel;
pub mod gpou;
pub mod inference;
pub mod linalg;
pub mod linearmacro;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod termstructure;

pub use error::{Error, Result};
pub use model::{MacroForm, ModelSpec, RiskPriceSpec};
