use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("invalid quantization parameter: {0}")]
    InvalidQuant(String),

    #[error("write rejected: array {0} is read-only")]
    ReadOnlyWrite(String),

    #[error("capacity exceeded for {what}: required {required} {unit}, available {available}")]
    Capacity {
        what: String,
        required: u64,
        available: u64,
        unit: &'static str,
    },

    #[error("sparse integrity violation: S[{row},{col}] is nonzero outside the mask")]
    OffMaskValue { row: usize, col: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("mask file error: {0}")]
    MaskFormat(String),

    #[error("internal scheduling error: {0}")]
    Schedule(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> SimError {
    SimError::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}
