use std::fmt;

use comicfuse::classifier::ClassifierError;
use comicfuse::pipeline::PipelineError;
use comicfuse::speaker::{BackendError, SpeakerError};
use comicfuse::{CorpusError, ValidationError};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_BACKEND: u8 = 4;
pub const EXIT_INTERNAL: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        let code = match e {
            BackendError::Config(_) => EXIT_USAGE,
            _ => EXIT_BACKEND,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        let code = match e {
            ClassifierError::InvalidConfig(_) => EXIT_USAGE,
            ClassifierError::MissingFeatures(_)
            | ClassifierError::DimensionMismatch { .. }
            | ClassifierError::TooFewPoints { .. } => EXIT_INPUT,
            ClassifierError::EmptyTraining | ClassifierError::DegenerateTraining(_) => EXIT_INTERNAL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) => EXIT_USAGE,
            PipelineError::Speaker(SpeakerError::Backend(BackendError::Config(_))) => EXIT_USAGE,
            PipelineError::Speaker(SpeakerError::Backend(_)) => EXIT_BACKEND,
            PipelineError::Speaker(SpeakerError::Unsupported(_)) => EXIT_USAGE,
            PipelineError::Speaker(_) => EXIT_INPUT,
            PipelineError::Classifier(c) => CliError::from(c.clone()).code,
            PipelineError::Relationship(_) | PipelineError::Validation(_) | PipelineError::Corpus(_) => EXIT_INPUT,
            PipelineError::CorruptTrace(_) => EXIT_INTERNAL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::internal(format!("json: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
