use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: u64, loss: f64 },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", .path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// `1` for bad configuration or input, `2` for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::Config(_) | Error::Parse { .. } | Error::Json(_) => 1,
            Error::Shape { .. } | Error::NonFiniteGradient(_) | Error::Diverged { .. } | Error::Io { .. }
            | Error::CheckFailed(_) => 2,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
