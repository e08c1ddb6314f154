use thiserror::Error;

/// Crate-wide error type.
///
/// Shape mismatches between tensors are treated as programming errors and
/// panic at the call site; everything that can go wrong with user data,
/// files, or numerics at run time comes through here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("attention over a fully masked source")]
    FullyMasked,

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}{}",
            last_good.as_deref().map(|p| format!(" (last good checkpoint: {p})")).unwrap_or_default())]
    Diverged {
        step: u64,
        detail: String,
        last_good: Option<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
