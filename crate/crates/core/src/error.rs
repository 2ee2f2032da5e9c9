use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid bounding box ({x0}, {y0}, {x1}, {y1})")]
    InvalidBox { x0: i64, y0: i64, x1: i64, y1: i64 },
    #[error("face box does not intersect the {width}x{height} frame")]
    DetectionOutsideFrame { width: usize, height: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("covariance is not positive semi-definite (eigenvalue {0})")]
    NonPsd(f64),
    #[error("gradient unavailable: {0}")]
    GradientUnavailable(&'static str),
    #[error("median of generated distances is zero")]
    DegenerateMedian,
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("sequence too short: {len} usable frames, need {min}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("non-finite loss `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error("checkpoint was trained in {found} mode, expected {expected}")]
    CheckpointModeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
