use std::path::PathBuf;

use thiserror::Error;
use twostage::bound::BoundError;
use twostage::data::DataError;
use twostage::ensemble::EnsembleError;
use twostage::experiment::ExperimentError;
use twostage::format::FormatError;
use twostage::mlp::MlpError;
use twostage::sensitivity::SensitivityError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    /// Reserved for command-line usage errors (reported by the parser).
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const SCHEMA: i32 = 4;
    pub const DEGENERATE: i32 = 5;
    pub const DIVERGED: i32 = 6;
    pub const MISSING_ARTIFACT: i32 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("missing artifact {}; run `twostage {command}` first", path.display())]
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },
}

fn mlp_code(e: &MlpError) -> i32 {
    match e {
        MlpError::Diverged { .. } => exit::DIVERGED,
        MlpError::Config(_) => exit::CONFIG,
        _ => exit::OTHER,
    }
}

fn ensemble_code(e: &EnsembleError) -> i32 {
    match e {
        EnsembleError::TooFewMembers(_) => exit::CONFIG,
        EnsembleError::Member { source, .. } => mlp_code(source),
        EnsembleError::Data(d) => data_code(d),
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Empty | DataError::ConstantFeature(_) | DataError::TooFewSamples(_) => {
            exit::DEGENERATE
        }
        DataError::Fraction(_) => exit::CONFIG,
        DataError::Io(_) => exit::OTHER,
        _ => exit::SCHEMA,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(e) => data_code(e),
            CliError::Format(FormatError::Io { .. }) => exit::OTHER,
            CliError::Format(FormatError::Ensemble(e)) => ensemble_code(e),
            CliError::Format(_) => exit::SCHEMA,
            CliError::Ensemble(e) => ensemble_code(e),
            CliError::Experiment(e) => match e {
                ExperimentError::Data(d) => data_code(d),
                ExperimentError::Ensemble(e) => ensemble_code(e),
                ExperimentError::Censor(m) => mlp_code(m),
                ExperimentError::LengthMismatch { .. } => exit::OTHER,
                ExperimentError::SingleClass | ExperimentError::Degenerate(_) => exit::DEGENERATE,
            },
            CliError::Bound(_) => exit::CONFIG,
            CliError::Sensitivity(_) => exit::DEGENERATE,
            CliError::Io { .. } => exit::OTHER,
            CliError::Input { .. } => exit::SCHEMA,
            CliError::MissingArtifact { .. } => exit::MISSING_ARTIFACT,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
