//! Cluster shape, parallel layouts and endpoint addressing.
//!
//! Endpoints are numbered densely: worker ranks `0..world_size` come first,
//! then one databuffer endpoint per node, then (optionally) a dedicated
//! controller endpoint that lives on its own virtual node.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rank = u32;
pub type EndpointId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology needs at least one node and one worker per node (got {nodes}x{workers_per_node})")]
    Degenerate { nodes: u32, workers_per_node: u32 },
    #[error("layout dp={dp} x tp={tp} does not match world size {world_size}")]
    WorldMismatch { dp: u32, tp: u32, world_size: u32 },
    #[error("tp_size {tp} does not divide workers_per_node {workers_per_node}")]
    TpSpansNodes { tp: u32, workers_per_node: u32 },
    #[error("layout sizes must be positive (dp={dp}, tp={tp})")]
    ZeroLayout { dp: u32, tp: u32 },
}

/// `nodes` x `workers_per_node` grid of workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterTopology {
    nodes: u32,
    workers_per_node: u32,
}

impl ClusterTopology {
    pub fn new(nodes: u32, workers_per_node: u32) -> Result<Self, TopologyError> {
        if nodes == 0 || workers_per_node == 0 {
            return Err(TopologyError::Degenerate { nodes, workers_per_node });
        }
        Ok(Self { nodes, workers_per_node })
    }

    pub fn nodes(&self) -> u32 {
        self.nodes
    }

    pub fn workers_per_node(&self) -> u32 {
        self.workers_per_node
    }

    pub fn world_size(&self) -> u32 {
        self.nodes * self.workers_per_node
    }

    pub fn node_of(&self, rank: Rank) -> u32 {
        rank / self.workers_per_node
    }

    pub fn local_rank(&self, rank: Rank) -> u32 {
        rank % self.workers_per_node
    }

    pub fn rank_of(&self, node: u32, local: u32) -> Rank {
        node * self.workers_per_node + local
    }

    pub fn ranks_on_node(&self, node: u32) -> std::ops::Range<Rank> {
        let start = node * self.workers_per_node;
        start..start + self.workers_per_node
    }

    /// Databuffer endpoint of `node`.
    pub fn store_endpoint(&self, node: u32) -> EndpointId {
        self.world_size() + node
    }

    /// Endpoint used by a controller placed on its own node.
    pub fn dedicated_controller_endpoint(&self) -> EndpointId {
        self.world_size() + self.nodes
    }

    /// Node hosting `endpoint`. The dedicated controller maps to node index `nodes`.
    pub fn endpoint_node(&self, endpoint: EndpointId) -> u32 {
        let world = self.world_size();
        if endpoint < world {
            self.node_of(endpoint)
        } else {
            (endpoint - world).min(self.nodes)
        }
    }

    /// Total number of addressable endpoints, including the dedicated-controller slot.
    pub fn endpoint_count(&self) -> u32 {
        self.world_size() + self.nodes + 1
    }

    /// Checks a stage layout against this cluster.
    pub fn check_layout(&self, layout: ParallelLayout) -> Result<(), TopologyError> {
        if layout.dp == 0 || layout.tp == 0 {
            return Err(TopologyError::ZeroLayout { dp: layout.dp, tp: layout.tp });
        }
        if layout.dp * layout.tp != self.world_size() {
            return Err(TopologyError::WorldMismatch {
                dp: layout.dp,
                tp: layout.tp,
                world_size: self.world_size(),
            });
        }
        if !self.workers_per_node.is_multiple_of(layout.tp) {
            return Err(TopologyError::TpSpansNodes {
                tp: layout.tp,
                workers_per_node: self.workers_per_node,
            });
        }
        Ok(())
    }

    /// DP groups of `layout` that live on `node`, in dp-rank order.
    /// Assumes `layout` passed [`check_layout`](Self::check_layout).
    pub fn local_groups(&self, node: u32, layout: ParallelLayout) -> std::ops::Range<u32> {
        let per_node = self.workers_per_node / layout.tp;
        node * per_node..(node + 1) * per_node
    }
}

/// Data/tensor parallel sizes of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelLayout {
    pub dp: u32,
    pub tp: u32,
}

impl ParallelLayout {
    pub fn new(dp: u32, tp: u32) -> Self {
        Self { dp, tp }
    }

    pub fn dp_rank(&self, rank: Rank) -> u32 {
        rank / self.tp
    }

    pub fn tp_rank(&self, rank: Rank) -> u32 {
        rank % self.tp
    }

    /// Ranks forming DP group `dp_rank`.
    pub fn group_ranks(&self, dp_rank: u32) -> std::ops::Range<Rank> {
        let start = dp_rank * self.tp;
        start..start + self.tp
    }

    /// Ranks with tp rank 0, one per DP group, in dp order.
    pub fn leaders(&self) -> impl Iterator<Item = Rank> + '_ {
        (0..self.dp).map(move |g| g * self.tp)
    }
}
