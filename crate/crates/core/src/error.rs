use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("validation failed: {}", problems.join("; "))]
    Validation { problems: Vec<String> },

    #[error("unknown token `{0}`")]
    Lookup(String),

    #[error("coverage error: {context}")]
    Coverage {
        context: String,
        missing: Vec<(String, String)>,
    },

    #[error("no candidates left after exclusion")]
    EmptyResult,

    #[error("oracle transport error: {0}")]
    Transport(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("generation error: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn validation(problems: Vec<String>) -> Self {
        Error::Validation { problems }
    }
}
