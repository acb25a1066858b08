use std::io;
use std::path::Path;

use thiserror::Error;

/// Pipeline stage an orchestrated failure happened in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Spec,
    Build,
    Run,
    Verify,
    Package,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Spec => "spec",
            Stage::Build => "build",
            Stage::Run => "run",
            Stage::Verify => "verify",
            Stage::Package => "package",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0} not found")]
    NotFound(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("{0} already exists")]
    AlreadyExists(String),

    #[error("path traversal rejected: {0}")]
    PathTraversal(String),

    #[error("not supported: {0}")]
    NotSupported(String),

    #[error("engine failure: {message}")]
    Engine { message: String, log: String },

    #[error("integrity check failed: {message}: {}", paths.join(", "))]
    Integrity { message: String, paths: Vec<String> },

    #[error("remote fetch failed: {0}")]
    Remote(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("corrupt metadata {context}: {source}")]
    Metadata {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Error::NotFound(what.into())
    }

    pub fn engine(message: impl Into<String>, log: impl Into<String>) -> Self {
        Error::Engine {
            message: message.into(),
            log: log.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn at_path(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::Io {
            context: path.display().to_string(),
            source,
        }
    }

    pub fn in_stage(self, stage: Stage) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
