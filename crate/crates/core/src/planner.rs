//! Turns a workflow graph into a linear per-worker task chain and maps chains
//! and stage layouts onto the cluster.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{DagGraph, NodeSpec};
use crate::topology::{ClusterTopology, ParallelLayout, Rank, TopologyError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("graph contains a cycle through [{}]", .0.join(", "))]
    Cycle(Vec<String>),
    #[error("dependency \"{dep}\" of \"{node}\" is not declared")]
    UnknownDep { node: String, dep: String },
    #[error("layout of stage \"{stage}\": {source}")]
    Layout { stage: String, source: TopologyError },
    #[error("no layout configured for stage \"{0}\"")]
    MissingLayout(String),
    #[error("chain coverage: {0}")]
    Coverage(String),
}

/// Longest-path depth of every node: roots are 0, others 1 + max over deps.
pub fn compute_depths(g: &DagGraph) -> Result<HashMap<String, usize>, PlanError> {
    let index: HashMap<&str, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let n = g.nodes.len();
    let mut indeg = vec![0usize; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        for dep in &node.deps {
            let &d = index.get(dep.as_str()).ok_or_else(|| PlanError::UnknownDep {
                node: node.id.clone(),
                dep: dep.clone(),
            })?;
            children[d].push(i);
            indeg[i] += 1;
        }
    }

    let mut depth = vec![0usize; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut visited = 0;
    while let Some(i) = queue.pop_front() {
        visited += 1;
        for &c in &children[i] {
            depth[c] = depth[c].max(depth[i] + 1);
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if visited != n {
        let stuck = (0..n).filter(|&i| indeg[i] > 0).map(|i| g.nodes[i].id.clone()).collect();
        return Err(PlanError::Cycle(stuck));
    }
    Ok(g.nodes.iter().map(|n| n.id.clone()).zip(depth).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub node: NodeSpec,
    /// Resolved dispatch key.
    pub key: String,
}

/// Linear execution order for one worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskChain {
    pub source_graph: String,
    pub entries: Vec<ChainEntry>,
}

impl TaskChain {
    pub fn node_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.node.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Orders nodes by (depth, declaration order). Equal-depth nodes become a
/// sequence instead of running side by side.
pub fn serialize_graph(g: &DagGraph) -> Result<TaskChain, PlanError> {
    let depths = compute_depths(g)?;
    let mut order: Vec<(usize, usize)> = g.nodes.iter().enumerate().map(|(i, n)| (depths[&n.id], i)).collect();
    order.sort_unstable();
    Ok(TaskChain {
        source_graph: g.name.clone(),
        entries: order
            .into_iter()
            .map(|(_, i)| ChainEntry {
                node: g.nodes[i].clone(),
                key: g.nodes[i].dispatch_key(),
            })
            .collect(),
    })
}

/// Stage → layout table with an optional fallback.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLayouts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParallelLayout>,
    #[serde(default)]
    pub stages: BTreeMap<String, ParallelLayout>,
}

impl StageLayouts {
    pub fn uniform(layout: ParallelLayout) -> Self {
        Self { default: Some(layout), stages: BTreeMap::new() }
    }

    pub fn with(mut self, stage: &str, layout: ParallelLayout) -> Self {
        self.stages.insert(stage.to_string(), layout);
        self
    }

    pub fn resolve(&self, stage: &str) -> Option<ParallelLayout> {
        self.stages.get(stage).copied().or(self.default)
    }
}

/// How chains map to ranks.
#[derive(Debug, Clone)]
pub enum ChainAssignment {
    /// Every rank runs the same chain.
    Replicated(TaskChain),
    /// Explicit rank ranges, each with its own chain.
    Groups(Vec<(Range<Rank>, TaskChain)>),
}

#[derive(Debug, Clone)]
pub struct WorkerPlan {
    pub topology: ClusterTopology,
    chains: Vec<Arc<TaskChain>>,
    rank_chain: Vec<usize>,
    pub layouts: BTreeMap<String, ParallelLayout>,
}

impl WorkerPlan {
    pub fn chain_for(&self, rank: Rank) -> &Arc<TaskChain> {
        &self.chains[self.rank_chain[rank as usize]]
    }

    pub fn distinct_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn is_replicated(&self) -> bool {
        self.chains.len() == 1
    }

    pub fn layout(&self, stage: &str) -> ParallelLayout {
        self.layouts[stage]
    }

    /// Diagnostic dump: `{"ranks": {"0": [...]}, "layouts": {...}}`.
    pub fn dump_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            ranks: BTreeMap<Rank, Vec<&'a str>>,
            layouts: &'a BTreeMap<String, ParallelLayout>,
        }
        let ranks = (0..self.topology.world_size()).map(|r| (r, self.chain_for(r).node_ids())).collect();
        serde_json::to_string_pretty(&Dump { ranks, layouts: &self.layouts }).expect("plan serializes")
    }
}

pub fn assign_chains(
    assignment: ChainAssignment,
    topology: ClusterTopology,
    layouts: &StageLayouts,
) -> Result<WorkerPlan, PlanError> {
    let world = topology.world_size();
    let (chains, rank_chain) = match assignment {
        ChainAssignment::Replicated(chain) => (vec![Arc::new(chain)], vec![0; world as usize]),
        ChainAssignment::Groups(groups) => {
            let mut owner: Vec<Option<usize>> = vec![None; world as usize];
            let mut chains = Vec::with_capacity(groups.len());
            for (gi, (range, chain)) in groups.into_iter().enumerate() {
                if range.end > world || range.is_empty() {
                    return Err(PlanError::Coverage(format!(
                        "rank range {}..{} invalid for world size {world}",
                        range.start, range.end
                    )));
                }
                for r in range {
                    if let Some(prev) = owner[r as usize] {
                        return Err(PlanError::Coverage(format!(
                            "rank {r} assigned to groups {prev} and {gi}"
                        )));
                    }
                    owner[r as usize] = Some(gi);
                }
                chains.push(Arc::new(chain));
            }
            let mut rank_chain = Vec::with_capacity(world as usize);
            for (r, o) in owner.into_iter().enumerate() {
                rank_chain.push(o.ok_or_else(|| PlanError::Coverage(format!("rank {r} has no chain")))?);
            }
            (chains, rank_chain)
        }
    };

    let mut resolved = BTreeMap::new();
    for chain in &chains {
        for entry in &chain.entries {
            let id = &entry.node.id;
            let layout = layouts.resolve(id).ok_or_else(|| PlanError::MissingLayout(id.clone()))?;
            topology
                .check_layout(layout)
                .map_err(|source| PlanError::Layout { stage: id.clone(), source })?;
            resolved.insert(id.clone(), layout);
        }
    }

    Ok(WorkerPlan { topology, chains, rank_chain, layouts: resolved })
}
