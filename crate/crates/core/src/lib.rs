//! Oblivious and K-oblivious shuffles over a simulated client/server block
//! store, with exact bandwidth accounting and move transcripts.
//!
//! The server is a [`storage::ServerStore`]; every algorithm runs inside a
//! [`session::Session`] that owns the store, the cipher and the random coins.

pub mod blockfile;
pub mod crypto;
pub mod dummy;
pub mod error;
pub mod experiment;
pub mod field;
pub mod kshuffle;
pub mod obliv;
pub mod oram;
pub mod poly;
pub mod recursive;
pub mod root;
pub mod runner;
pub mod session;
pub mod spray;
pub mod storage;
pub mod util;

pub use crypto::{
    complete_permutation, keygen, random_permutation, Block, BlockId, Cipher, CipherKind, Ciphertext, Key,
    Payload, Permutation, PermutationMap, DUMMY,
};
pub use dummy::{k_cache_shuffle_dummy, DummyOutcome, DummyShuffleConfig};
pub use experiment::{experiment_suite, ExperimentSpec};
pub use error::{Abort, AbortReason, Error, Result};
pub use kshuffle::{k_cache_shuffle, k_cache_shuffle_basic, k_cache_shuffle_root, BasicOptions, BasicVariant, KOutcome, KReport, TouchedSet};
pub use obliv::{OblivReport, Verdict};
pub use oram::Oram;
pub use recursive::{cache_shuffle, rspray};
pub use root::cache_shuffle_root;
pub use runner::{run, Algo, Row, RunReport, RunSpec, CSV_HEADER};
pub use session::{Session, SessionConfig};
pub use spray::{CallKind, CallTrace, Gate, Outcome, ShuffleConfig, SlotRef};
pub use storage::{ArrayId, Event, Metrics, MoveTranscript, ServerStore, TranscriptMode};
