//! Sharded ingest and per-node buffers that reshard samples between stages.

mod buffer;
mod loader;
mod record;

use thiserror::Error;

use crate::transport::TransportError;

pub use buffer::{BufferStats, BufferStore, StageRef};
pub use loader::{load_shard, shard_dataset, DataSource, ShardLoader, LOADER_STAGE};
pub use record::{decode_records, encode_records, encoded_len, Rollout, SampleBatch, SampleRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{what} {n} is not divisible by {d}")]
    Indivisible { what: &'static str, n: u64, d: u64 },
    #[error("i/o: {0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("range end {end} exceeds dataset length {len}")]
    OutOfRange { end: u64, len: u64 },
    #[error("batch of {batch} records does not fit a shard of {shard}")]
    ShardTooSmall { shard: usize, batch: usize },
    #[error("put for iteration {iteration} but store is at {current}")]
    StaleIteration { iteration: u32, current: u32 },
    #[error("stage {stage} iteration {iteration} not ready")]
    NotReady { stage: String, iteration: u32 },
    #[error("unknown stage {stage} at iteration {iteration}")]
    UnknownStage { stage: String, iteration: u32 },
    #[error("dp group {dp_rank} already put for stage {stage}")]
    DuplicatePut { stage: String, dp_rank: u32 },
    #[error("dp group {dp_rank} is not local to node {node}")]
    NotLocal { dp_rank: u32, node: u32 },
    #[error("duplicate sample id {0}")]
    DuplicateSample(u64),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("codec: {0}")]
    Codec(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}
