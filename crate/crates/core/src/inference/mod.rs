//! Parameter estimation: likelihood, priors, Metropolis moves, the IBIS
//! sampler, mode search and `σ_K` tuning.

pub mod checkpoint;
pub mod data;
pub mod ibis;
pub mod likelihood;
pub mod mcmc;
pub mod optimize;
pub mod prior;
pub mod tuning;

pub use data::ModelData;
pub use ibis::{ess, evidence_increment, IbisConfig, ParticleSystem, Resampling};
pub use likelihood::{Likelihood, ParticleModel, WindowEval};
pub use prior::Prior;
