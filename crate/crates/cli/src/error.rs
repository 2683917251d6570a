//! Error taxonomy mapped onto the process exit codes:
//! 1 — I/O failure, 2 — configuration or validation, 3 — internal
//! invariant breach (including failed gradient verification).

use protext_core::curation::CurationError;
use protext_core::encoders::checkpoint::CheckpointError;
use protext_core::encoders::EncoderError;
use protext_core::objectives::ObjectiveError;
use protext_core::sampler::SamplerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> CliError {
        match e {
            CurationError::Io(inner) => CliError::Io(inner.to_string()),
            CurationError::MalformedRecord { .. } => CliError::Config(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> CliError {
        match e {
            SamplerError::EmptyCorpus => CliError::Config(e.to_string()),
            SamplerError::EmptyCluster { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        match e {
            CheckpointError::Io(inner) => CliError::Io(inner.to_string()),
            _ => CliError::Config(format!("checkpoint: {e}")),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> CliError {
        match e {
            ObjectiveError::BadConfig(_)
            | ObjectiveError::WeightConstraintViolation { .. }
            | ObjectiveError::BatchTooSmall(_)
            | ObjectiveError::Record(_) => CliError::Config(e.to_string()),
            ObjectiveError::Encoder(EncoderError::BadConfig(_)) => CliError::Config(e.to_string()),
            ObjectiveError::Checkpoint(inner) => inner.into(),
            ObjectiveError::EmptyMask
            | ObjectiveError::Encoder(_)
            | ObjectiveError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}
