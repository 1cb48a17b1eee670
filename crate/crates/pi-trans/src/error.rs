use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension contract violated by an operation input.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An autodiff contract was violated (non-scalar root, missing grad, ...).
    #[error("contract error in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A non-finite value surfaced while finite-checking was enabled.
    #[error("non-finite value ({value}) in {op} output at element {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f32,
    },

    /// Malformed binary input (PPM image, checkpoint, ...) at a byte offset.
    #[error("parse error in {what} at byte {offset}: {detail}")]
    Parse {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    /// A dataset directory is missing a member of a triplet.
    #[error("dataset error for id {id}: {detail}")]
    Dataset { id: String, detail: String },

    #[error("training aborted at step {step}: component {component} is non-finite")]
    NonFiniteLoss { step: usize, component: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
