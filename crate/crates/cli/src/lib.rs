//! Batch driver: CSV ingestion, synthetic data, and the
//! tune → train → out-of-sample → evaluate pipeline.

pub mod config;
pub mod data;
pub mod output;
pub mod pipeline;

use std::path::PathBuf;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: config, files, or arguments.
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Numerical(String),

    #[error("stage '{stage}' failed: {source}{}", resume_hint(.checkpoint))]
    Stage {
        stage: &'static str,
        source: Box<CliError>,
        checkpoint: Option<PathBuf>,
    },
}

fn resume_hint(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| format!(" (resume with --resume {})", p.display())).unwrap_or_default()
}

impl CliError {
    /// 1 for validation errors, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn in_stage(self, stage: &'static str, checkpoint: Option<PathBuf>) -> Self {
        match self {
            e @ CliError::Stage { .. } => e,
            e => CliError::Stage { stage, source: Box::new(e), checkpoint },
        }
    }
}

impl From<gpdtsm::Error> for CliError {
    fn from(e: gpdtsm::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Validation(format!("csv: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let num: CliError = gpdtsm::Error::Degeneracy("x".into()).into();
        let val: CliError = gpdtsm::Error::Data("x".into()).into();
        assert_eq!(num.exit_code(), 2);
        assert_eq!(val.exit_code(), 1);
        assert_eq!(num.in_stage("train", None).exit_code(), 2);
    }

    #[test]
    fn stage_errors_name_the_checkpoint() {
        let e = CliError::Numerical("boom".into()).in_stage("forecast", Some("out/oos.ckpt".into()));
        let s = e.to_string();
        assert!(s.contains("forecast") && s.contains("out/oos.ckpt"), "{s}");
    }
}
