//! Classified errors with stable class names for scripting.

use std::fmt;

use emerge_core::align::AlignError;
use emerge_core::baselines::MergeError;
use emerge_core::chunked::ChunkError;
use emerge_core::model::ModelError;
use emerge_core::task_vector::TaskVectorError;
use emerge_core::tasks::TaskError;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
    Threshold,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "CONFIG",
            ErrorClass::Io => "IO",
            ErrorClass::Numeric => "NUMERIC",
            ErrorClass::Threshold => "THRESHOLD",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        CliError {
            class,
            message: message.into(),
        }
    }

    /// `CLASS: message` on a single line.
    pub fn line(&self) -> String {
        let msg = self.message.replace('\n', " ");
        format!("{}: {msg}", self.class.as_str())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::new(ErrorClass::Io, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(ErrorClass::Io, e.to_string())
    }
}

fn model_class(e: &ModelError) -> ErrorClass {
    match e {
        ModelError::Tensor(_) => ErrorClass::Numeric,
        _ => ErrorClass::Config,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::new(model_class(&e), e.to_string())
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        let class = match &e {
            TaskError::Threshold { .. } => ErrorClass::Threshold,
            TaskError::Diverged { .. } => ErrorClass::Numeric,
            TaskError::Model(m) => model_class(m),
            _ => ErrorClass::Config,
        };
        CliError::new(class, e.to_string())
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        let class = match &e {
            MergeError::Schema(m) => model_class(m),
            _ => ErrorClass::Config,
        };
        CliError::new(class, e.to_string())
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        let class = match &e {
            AlignError::NonFinite { .. } => ErrorClass::Numeric,
            AlignError::Model(m) => model_class(m),
            _ => ErrorClass::Config,
        };
        CliError::new(class, e.to_string())
    }
}

impl From<ChunkError> for CliError {
    fn from(e: ChunkError) -> Self {
        match e {
            ChunkError::Align(a) => a.into(),
            ChunkError::AllZeroImportance => CliError::new(ErrorClass::Numeric, e.to_string()),
            other => CliError::new(ErrorClass::Config, other.to_string()),
        }
    }
}

impl From<TaskVectorError> for CliError {
    fn from(e: TaskVectorError) -> Self {
        let class = match &e {
            TaskVectorError::AllZero => ErrorClass::Numeric,
            _ => ErrorClass::Config,
        };
        CliError::new(class, e.to_string())
    }
}
