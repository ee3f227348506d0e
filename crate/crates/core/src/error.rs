use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument or precondition, tagged with the module that rejected it.
    #[error("{module}: {msg}")]
    Invalid { module: &'static str, msg: String },
    #[error("{module}: non-finite value during {what}")]
    NonFinite { module: &'static str, what: String },
    #[error("{module}: training diverged at {stage}, step {step}")]
    Diverged {
        module: &'static str,
        stage: String,
        step: usize,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("stage {index} ({name}) failed: {source}")]
    Stage {
        index: usize,
        name: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(module: &'static str, msg: impl Into<String>) -> Self {
        Self::Invalid {
            module,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
