//! Selective state-space model inference with hierarchical token pruning.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel`]: the discretized selective-scan recurrence and its leave-one-out oracle.
//! - [`model`]: a Mamba-style block stack whose forward pass runs on a shrinking set of
//!   active tokens, plus the tensor-archive checkpoint format.
//! - [`pruning`]: token influence scores, selection criteria, linear schedules.
//! - [`analysis`]: redundancy, information flow, FLOPs accounting and latency benchmarks.
//! - [`harness`]: tokenization, corpora, perplexity and prompt/label evaluation protocols,
//!   and the synthetic key-token task.
//! - [`cli`]: the command implementations behind the `ssm-prune` binary.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod numeric;
pub mod pruning;

pub use error::{Error, Result};
pub use kernel::{ScanParams, ScanTrace};
pub use model::{ActiveSet, ForwardRecord, Model, ModelConfig};
pub use pruning::{Aggregator, Criterion, InfluenceScores, PruneSchedule};
