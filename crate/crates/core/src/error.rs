use std::fmt;

use serde::{Deserialize, Serialize};

use crate::storage::Metrics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid block: payload is {actual} bytes, expected {expected}")]
    InvalidBlock { expected: usize, actual: usize },

    #[error("corrupt ciphertext")]
    CorruptCiphertext,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The algorithm asked the server for something the protocol does not
    /// allow. Always indicates a bug in the caller.
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("server capacity exceeded: {requested} slots requested, {available} available")]
    CapacityExceeded { requested: usize, available: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error(transparent)]
    Aborted(Box<Abort>),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_abort(&self) -> bool {
        matches!(self, Error::Aborted(_))
    }

    pub fn abort(&self) -> Option<&Abort> {
        match self {
            Error::Aborted(a) => Some(a),
            _ => None,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn violation(msg: impl Into<String>) -> Self {
        Error::ProtocolViolation(msg.into())
    }
}

/// Why a randomized shuffle gave up.
///
/// Every variant corresponds to an event whose probability is bounded by a
/// tail inequality; the caller may retry with fresh coins.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortReason {
    /// Total client cache size exceeded the configured cap after a spray round.
    CacheOverflow { held: usize, cap: usize },
    /// A spray bucket received more real blocks than its temporary array holds.
    BucketOverflow { bucket: usize, real: usize, slots: usize },
    /// A recursion-level destination bucket lost its dummy slack.
    LevelSize { level: usize, real: usize, slots: usize },
    /// A merge bucket has more untouched blocks than its download quota.
    QuotaExceeded { bucket: usize, needed: usize, quota: usize },
    /// A merge bucket produced more surplus blocks than its overflow array holds.
    RemOverflow { bucket: usize, surplus: usize, cap: usize },
    /// A dummy-shuffle partition has too many destination indices.
    PartitionTooLarge { partition: usize, size: usize, cap: usize },
    /// A dummy-shuffle partition has too many real destinations.
    TooManyReal { partition: usize, real: usize, cap: usize },
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::CacheOverflow { held, cap } => {
                write!(f, "client cache holds {held} blocks, cap {cap}")
            }
            AbortReason::BucketOverflow { bucket, real, slots } => {
                write!(f, "bucket {bucket} has {real} real blocks for {slots} slots")
            }
            AbortReason::LevelSize { level, real, slots } => {
                write!(f, "level {level} bucket has {real} real blocks in {slots} slots")
            }
            AbortReason::QuotaExceeded { bucket, needed, quota } => {
                write!(f, "bucket {bucket} needs {needed} untouched downloads, quota {quota}")
            }
            AbortReason::RemOverflow { bucket, surplus, cap } => {
                write!(f, "bucket {bucket} has {surplus} surplus blocks, cap {cap}")
            }
            AbortReason::PartitionTooLarge { partition, size, cap } => {
                write!(f, "partition {partition} has {size} indices, cap {cap}")
            }
            AbortReason::TooManyReal { partition, real, cap } => {
                write!(f, "partition {partition} has {real} real destinations, cap {cap}")
            }
        }
    }
}

#[derive(Clone, Debug, thiserror::Error)]
#[error("shuffle aborted: {reason}")]
pub struct Abort {
    pub reason: AbortReason,
    /// Metrics at the moment of the abort (the `aborted` flag is set).
    pub metrics: Metrics,
}
