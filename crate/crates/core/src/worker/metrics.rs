use serde::{Deserialize, Serialize};

use super::{recv_each, WorkerError};
use crate::data::SampleRecord;
use crate::hash;
use crate::topology::Rank;
use crate::transport::{tags, Endpoint};
use crate::worker::functions::channels;

/// Timing and volume of one chain node on one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node_id: String,
    /// Nanoseconds since the worker's start.
    pub enter_ns: u64,
    pub exit_ns: u64,
    pub records: u64,
    pub tokens: u64,
}

impl NodeMetrics {
    pub fn elapsed_ns(&self) -> u64 {
        self.exit_ns - self.enter_ns
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RolloutDigest {
    pub token_count: u32,
    pub payload_hash: u64,
    /// Channel values as raw `f64` bits.
    pub channels: Vec<(String, u64)>,
}

/// Exact fingerprint of a finished record.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordDigest {
    pub sample_id: u64,
    pub rollouts: Vec<RolloutDigest>,
}

pub fn digest_records(records: &[SampleRecord]) -> Vec<RecordDigest> {
    records
        .iter()
        .map(|r| RecordDigest {
            sample_id: r.sample_id,
            rollouts: r
                .group
                .iter()
                .map(|ro| RolloutDigest {
                    token_count: ro.token_count,
                    payload_hash: hash::fnv1a(&ro.payload),
                    channels: ro.channels.iter().map(|(k, v)| (k.clone(), v.to_bits())).collect(),
                })
                .collect(),
        })
        .collect()
}

/// One rank's report for one iteration. Serialized as JSON with fields in
/// declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub rank: Rank,
    pub iteration: u32,
    pub wall_ns: u64,
    pub nodes: Vec<NodeMetrics>,
    /// Whether this rank's final batch counts toward global totals
    /// (tp rank 0 under the last node's layout).
    pub counted: bool,
    pub records: u64,
    pub tokens: u64,
    pub suppressed_puts: u64,
    pub reward_sum: f64,
    pub reward_sq_sum: f64,
    pub reward_count: u64,
    pub max_active_nodes: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub digests: Vec<RecordDigest>,
}

impl IterationMetrics {
    /// Copy with every wall-clock field cleared.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.wall_ns = 0;
        for n in &mut m.nodes {
            n.enter_ns = 0;
            n.exit_ns = 0;
        }
        m
    }

    pub(crate) fn add_rewards(&mut self, records: &[SampleRecord]) {
        for r in records.iter().flat_map(|r| &r.group) {
            if let Some(v) = r.channel(channels::REWARD) {
                self.reward_sum += v;
                self.reward_sq_sum += v * v;
                self.reward_count += 1;
            }
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("metrics serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, WorkerError> {
        serde_json::from_slice(bytes).map_err(|e| WorkerError::Codec(e.to_string()))
    }
}

/// All ranks' reports for one iteration, held at rank 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub iteration: u32,
    pub per_rank: Vec<IterationMetrics>,
}

impl RunMetrics {
    fn counted(&self) -> impl Iterator<Item = &IterationMetrics> {
        self.per_rank.iter().filter(|m| m.counted)
    }

    /// Tokens in the global batch.
    pub fn tokens(&self) -> u64 {
        self.counted().map(|m| m.tokens).sum()
    }

    pub fn records(&self) -> u64 {
        self.counted().map(|m| m.records).sum()
    }

    /// Slowest rank's iteration time.
    pub fn iteration_time_s(&self) -> f64 {
        self.per_rank.iter().map(|m| m.wall_ns).max().unwrap_or(0) as f64 * 1e-9
    }

    pub fn tokens_per_sec(&self) -> f64 {
        let t = self.iteration_time_s();
        if t > 0.0 {
            self.tokens() as f64 / t
        } else {
            0.0
        }
    }

    /// Per chain node, the slowest rank's time in milliseconds.
    pub fn stage_times_ms(&self) -> Vec<(String, f64)> {
        let Some(first) = self.per_rank.first() else { return Vec::new() };
        first
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let worst = self.per_rank.iter().filter_map(|m| m.nodes.get(i)).map(NodeMetrics::elapsed_ns).max();
                (n.node_id.clone(), worst.unwrap_or(0) as f64 * 1e-6)
            })
            .collect()
    }

    pub fn suppressed_puts(&self) -> u64 {
        self.per_rank.iter().map(|m| m.suppressed_puts).sum()
    }

    pub fn reward_mean(&self) -> f64 {
        let n: u64 = self.counted().map(|m| m.reward_count).sum();
        if n == 0 {
            return 0.0;
        }
        self.counted().map(|m| m.reward_sum).sum::<f64>() / n as f64
    }

    /// Population variance of the reward channel over the global batch.
    pub fn entropy_proxy(&self) -> f64 {
        let n: u64 = self.counted().map(|m| m.reward_count).sum();
        if n == 0 {
            return 0.0;
        }
        let mean = self.reward_mean();
        (self.counted().map(|m| m.reward_sq_sum).sum::<f64>() / n as f64 - mean * mean).max(0.0)
    }

    pub fn max_active_nodes(&self) -> u32 {
        self.per_rank.iter().map(|m| m.max_active_nodes).max().unwrap_or(0)
    }

    pub fn digests(&self) -> Vec<RecordDigest> {
        let mut all: Vec<RecordDigest> = self.counted().flat_map(|m| m.digests.iter().cloned()).collect();
        all.sort();
        all
    }
}

/// All-to-one metrics collection through rank 0. Every rank calls this
/// once per iteration; rank 0 gets the combined view.
pub fn aggregate_metrics(ep: &Endpoint, world: u32, metrics: IterationMetrics) -> Result<Option<RunMetrics>, WorkerError> {
    let iteration = metrics.iteration;
    let tag = tags::make(tags::METRICS, 0);
    if ep.id() != 0 {
        ep.send(0, tag, iteration, metrics.to_json())?;
        return Ok(None);
    }
    let others: Vec<Rank> = (1..world).collect();
    let mut per_rank = vec![metrics];
    for env in recv_each(ep, &others, tag, iteration, "metrics")? {
        per_rank.push(IterationMetrics::from_json(&env.payload)?);
    }
    Ok(Some(RunMetrics { iteration, per_rank }))
}
