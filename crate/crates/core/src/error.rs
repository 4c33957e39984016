use thiserror::Error;

/// Errors produced by graph construction, execution, quantization and
/// artifact serialization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("missing calibration entry for node `{0}`")]
    MissingCalibration(String),

    #[error("missing per-channel statistics for node `{0}`")]
    MissingChannelStats(String),

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("malformed {what} at {position}: {detail}")]
    Format {
        what: &'static str,
        position: String,
        detail: String,
    },

    #[error("unsupported {what} version {found} (this build reads up to {supported})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArg(detail.into())
    }

    pub(crate) fn format(
        what: &'static str,
        position: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            what,
            position: position.into(),
            detail: detail.into(),
        }
    }
}
