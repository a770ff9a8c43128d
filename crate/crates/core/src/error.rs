use std::path::PathBuf;

/// Errors surfaced by every layer of the pipeline.
///
/// The variants are coarse on purpose: the CLI maps them onto exit codes
/// (`Data` → 2, `Numeric` → 3, everything else → 1).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes. The message names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (images, masks, manifests, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// NaN or infinity produced during a forward pass or update.
    #[error("numeric error in {layer}: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Data(_) | Error::Io { .. })
    }
}
