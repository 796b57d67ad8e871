use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Eigenvalues of the risk-neutral feedback matrix are not strictly ordered.
    #[error("identification error: {0}")]
    Identification(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// `W B_X` is singular, so the latent states cannot be rotated to PCs.
    #[error("knife-edge rotation: W B_X has condition number {cond:.3e}")]
    KnifeEdgeRotation { cond: f64 },

    #[error("degenerate panel: {0}")]
    DegeneratePanel(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical conditioning failure in {context} (condition estimate {cond:.3e})")]
    NumericalConditioning { context: String, cond: f64 },

    #[error("particle degeneracy: {0}")]
    Degeneracy(String),

    #[error("optimizer failed to converge: {message}\n{trace}")]
    Optimization { message: String, trace: String },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("invalid model specification: {0}")]
    Spec(String),
}

impl Error {
    /// True for failures that stem from numerics rather than invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::KnifeEdgeRotation { .. }
                | Error::NumericalConditioning { .. }
                | Error::Degeneracy(_)
                | Error::Optimization { .. }
                | Error::Undefined(_)
        )
    }
}
