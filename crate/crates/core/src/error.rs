use alloc::string::String;

/// Every failure the core library can report.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: numeric overflow, produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    /// The row has nothing observed; callers skip it.
    #[error("row has no observed features")]
    EmptyRow,
    #[error("reverse diffusion chain diverged at step {step} (value {value})")]
    ChainDiverged { step: usize, value: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
