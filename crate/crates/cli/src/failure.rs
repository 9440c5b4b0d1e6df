use std::fmt;

use nuvision::ckpt::CkptError;
use nuvision::cnn::CnnError;
use nuvision::config::ConfigError;
use nuvision::datastore::DataError;
use nuvision::eventgen::EventGenError;
use nuvision::evalkit::EvalError;
use nuvision::vlm::VlmError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn with(code: i32, e: &dyn fmt::Display) -> Failure {
    Failure { code, message: e.to_string() }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        with(EXIT_USAGE, &e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::Config(_) | DataError::Template(_) => EXIT_USAGE,
            DataError::Io { .. } | DataError::Format { .. } => EXIT_DATA,
            DataError::Generator(_) => EXIT_RUNTIME,
        };
        with(code, &e)
    }
}

impl From<EventGenError> for Failure {
    fn from(e: EventGenError) -> Self {
        let code = match &e {
            EventGenError::Config(_) => EXIT_USAGE,
            EventGenError::InvalidInput(_) => EXIT_RUNTIME,
        };
        with(code, &e)
    }
}

impl From<CkptError> for Failure {
    fn from(e: CkptError) -> Self {
        let code = match &e {
            CkptError::Format { .. } => EXIT_DATA,
            CkptError::Io { .. } => EXIT_RUNTIME,
        };
        with(code, &e)
    }
}

impl From<CnnError> for Failure {
    fn from(e: CnnError) -> Self {
        match e {
            CnnError::Config(_) => with(EXIT_USAGE, &e),
            CnnError::Checkpoint(inner) => inner.into(),
            CnnError::Data(inner) => inner.into(),
            other => with(EXIT_RUNTIME, &other),
        }
    }
}

impl From<VlmError> for Failure {
    fn from(e: VlmError) -> Self {
        match e {
            VlmError::Config(_) => with(EXIT_USAGE, &e),
            VlmError::TemplateMismatch { .. } => with(EXIT_DATA, &e),
            VlmError::Checkpoint(inner) => inner.into(),
            VlmError::Data(inner) => inner.into(),
            other => with(EXIT_RUNTIME, &other),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::SplitMismatch { .. } | EvalError::InvalidPrediction { .. } | EvalError::Io { .. } => EXIT_DATA,
            EvalError::InvalidArgument(_) => EXIT_USAGE,
            EvalError::Empty | EvalError::UndefinedAuc { .. } | EvalError::Classifier { .. } => EXIT_RUNTIME,
        };
        with(code, &e)
    }
}
