use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("row partition error: {0}")]
    Partition(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure in {context}: {detail}")]
    Numerical {
        context: &'static str,
        detail: String,
    },

    #[error("value {value} outside of supported range [{lo}, {hi}]: {what}")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("Blahut-Arimoto did not converge after {iterations} iterations (rate {rate}, distortion {distortion})")]
    Convergence {
        iterations: usize,
        rate: f64,
        distortion: f64,
    },

    #[error("coded block checksum {found:#010x} does not match quantizer spec {expected:#010x}")]
    Integrity { expected: u32, found: u32 },

    #[error("corrupt coded block: {0}")]
    Decode(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
