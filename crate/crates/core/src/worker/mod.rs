//! Per-rank execution of a task chain.

pub mod functions;
mod metrics;
mod runtime;

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::data::DataError;
use crate::topology::EndpointId;
use crate::transport::{Endpoint, Envelope, TransportError};

pub use functions::{
    CostModel, FnContext, FunctionError, FunctionParams, GenerationParams, Registry, StageCost, StageFn, TokenDist,
};
pub use metrics::{aggregate_metrics, digest_records, IterationMetrics, NodeMetrics, RecordDigest, RolloutDigest, RunMetrics};
pub use runtime::{registry_bind, BoundNode, Dataflow, DistributedFlow, ExecutableChain, WorkerState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkerError {
    #[error("node {node} has no function registered under {key}")]
    UnboundNode { node: String, key: String },
    #[error("node {node} has no layout")]
    MissingLayout { node: String },
    #[error("node {node}: {source}")]
    Function { node: String, source: FunctionError },
    #[error("timed out waiting for {what} from ranks {ranks:?}")]
    Missing { what: String, ranks: Vec<EndpointId> },
    #[error("controller staging would hold {staged} bytes, capacity is {capacity}")]
    CapacityExceeded { staged: u64, capacity: u64 },
    #[error("metrics codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl WorkerError {
    /// True when this error only reflects a failure raised elsewhere.
    pub fn is_secondary(&self) -> bool {
        matches!(
            self,
            WorkerError::Transport(TransportError::Aborted(_) | TransportError::PeerClosed(_))
                | WorkerError::Data(DataError::Transport(TransportError::Aborted(_) | TransportError::PeerClosed(_)))
        )
    }
}

/// Receives one message per source, in source order. On timeout the error
/// lists every source that has not delivered.
pub fn recv_each(
    ep: &Endpoint,
    sources: &[EndpointId],
    tag: u32,
    iteration: u32,
    what: &str,
) -> Result<Vec<Envelope>, WorkerError> {
    let deadline = Instant::now() + ep.fabric().options().recv_timeout;
    let mut out = Vec::with_capacity(sources.len());
    for (i, &src) in sources.iter().enumerate() {
        let left = deadline.saturating_duration_since(Instant::now());
        match ep.recv_timeout(Some(src), tag, iteration, left) {
            Ok(env) => out.push(env),
            Err(TransportError::Timeout { .. }) => {
                let mut missing = vec![src];
                for &s in &sources[i + 1..] {
                    if ep.recv_timeout(Some(s), tag, iteration, Duration::ZERO).is_err() {
                        missing.push(s);
                    }
                }
                return Err(WorkerError::Missing { what: what.to_string(), ranks: missing });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}
