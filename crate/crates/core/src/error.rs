use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    EmptyDimension([usize; 4]),
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch { shape: [usize; 4], len: usize, expected: usize },
    #[error("non-finite element at flat index {0}")]
    NonFinite(usize),
    #[error("sample index {index} out of range for batch of {batch}")]
    IndexOutOfRange { index: usize, batch: usize },
    #[error("ghost batch must contain at least one sample")]
    EmptySelection,
    #[error("ghost batch size {ghost} does not divide batch size {batch}")]
    NotDivisible { batch: usize, ghost: usize },
    #[error("ghost batch size {ghost} is invalid: {reason}")]
    InvalidGhostSize { ghost: usize, reason: &'static str },
    #[error("epsilon must be positive, got {0}")]
    InvalidEps(f64),
    #[error("EMA decay must lie in (0, 1), got {0}")]
    InvalidDecay(f64),
    #[error("running statistics have not been updated yet")]
    UninitializedRunningStats,
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("ghost batch {ghost_batch} channel {channel} has variance {var} below the floor {floor}")]
    VarianceFloor { ghost_batch: usize, channel: usize, var: f64, floor: f64 },
    #[error("drop probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("noise standard deviation must be non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("{0}")]
    InvalidModel(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}
