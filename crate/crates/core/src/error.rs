use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("cannot step below timestep 0")]
    StepUnderflow,

    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("missing attention trace entry for step {step}, layer {layer}")]
    MissingTrace { step: usize, layer: usize },

    #[error("text condition: {0}")]
    Condition(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("plugin {endpoint} timed out after {seconds}s")]
    PluginTimeout { endpoint: String, seconds: f64 },

    #[error("plugin {endpoint} failed: {reason}")]
    Plugin { endpoint: String, reason: String },

    #[error("plugin {endpoint} protocol error: {reason}")]
    Protocol { endpoint: String, reason: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_validation(&self) -> bool {
        matches!(self.root(), Error::Validation { .. })
    }

    pub fn is_plugin(&self) -> bool {
        matches!(
            self.root(),
            Error::PluginTimeout { .. } | Error::Plugin { .. } | Error::Protocol { .. }
        )
    }

    /// Timeouts are the only failures worth retrying unchanged.
    pub fn is_retryable(&self) -> bool {
        matches!(self.root(), Error::PluginTimeout { .. })
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
