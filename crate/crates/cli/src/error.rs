use std::fmt;

use imageset::bench::BenchError;
use imageset::clients::ClientError;
use imageset::evalkit::EvalError;
use imageset::model::ModelError;
use imageset::recaption::RecaptionError;
use imageset::setgen::SetGenError;
use imageset::tensor::TensorError;

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Validation = 2,
    External = 3,
    Internal = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn validation(m: impl Into<String>) -> Self {
        Self {
            exit: Exit::Validation,
            message: m.into(),
        }
    }

    pub fn external(m: impl Into<String>) -> Self {
        Self {
            exit: Exit::External,
            message: m.into(),
        }
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self {
            exit: Exit::Internal,
            message: m.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Config(_) => Self::validation(e.to_string()),
            ClientError::Precondition(_) => Self::internal(e.to_string()),
            _ => Self::external(e.to_string()),
        }
    }
}

impl From<RecaptionError> for CliError {
    fn from(e: RecaptionError) -> Self {
        match e {
            RecaptionError::Client(c) => c.into(),
            RecaptionError::Parse(_) => Self::external(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Client(c) => c.into(),
            EvalError::Cell { .. } | EvalError::Criteria(_) => Self::external(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } | ModelError::Tensor(_) => Self::internal(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<SetGenError> for CliError {
    fn from(e: SetGenError) -> Self {
        match e {
            SetGenError::Model(m) => m.into(),
            SetGenError::Layout(_) | SetGenError::Schedule(_) => Self::validation(e.to_string()),
            SetGenError::Tensor(_) | SetGenError::Invariant(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::validation(format!("bad JSON: {e}"))
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        Self::internal(format!("image output failed: {e}"))
    }
}

pub fn io(context: impl fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::validation(format!("{context}: {e}"))
}
