use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated {section} section")]
    Truncated { section: &'static str },
    #[error("unknown section tag {0:?}")]
    UnknownSection([u8; 4]),
    #[error("count overflow: {count} entries do not fit in {available} bytes")]
    CountOverflow { count: u64, available: usize },
    #[error("non-monotone IDs at index {index}")]
    NonMonotoneIds { index: usize },
    #[error("trailing bytes: {0}")]
    TrailingBytes(usize),
    #[error("invalid utf-8 in image path")]
    InvalidPath,

    #[error("image error: {0}")]
    Image(String),
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("singular covariance")]
    SingularCovariance,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid gaussian cloud: {0}")]
    InvalidCloud(String),

    #[error("empty point set")]
    EmptyPointSet,
    #[error("over-partitioned: {blocks} blocks requested for {points} points")]
    OverPartitioned { blocks: usize, points: usize },

    #[error("ID misalignment: {0}")]
    IdMisalignment(String),
    #[error("ID {0} is owned by no block")]
    UnownedId(u64),
    #[error("ID allocator exhausted for block {0}")]
    AllocatorExhausted(u16),

    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty holdout set")]
    EmptyHoldout,
    #[error("no runs found in {0}")]
    NoRunsFound(String),

    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("version mismatch: peer speaks {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("worker {0} timed out")]
    WorkerTimeout(u16),
    #[error("connection failed after {attempts} attempts: {reason}")]
    ConnectionFailed { attempts: u32, reason: String },
    #[error("channel closed")]
    ChannelClosed,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
