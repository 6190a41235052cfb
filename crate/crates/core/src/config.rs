//! Run configuration document and plan-time validation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{parse_dag_config, preset_dag, validate_dag, Algorithm, DagGraph};
use crate::data::DataSource;
use crate::hash;
use crate::planner::{assign_chains, serialize_graph, ChainAssignment, PlanError, StageLayouts, WorkerPlan};
use crate::topology::{ClusterTopology, ParallelLayout};
use crate::transport::{Backend, FabricOptions};
use crate::worker::{CostModel, FunctionParams, GenerationParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Distributed,
    Central,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "distributed" => Ok(Mode::Distributed),
            "central" => Ok(Mode::Central),
            other => Err(format!("unknown mode \"{other}\"")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Distributed => "distributed",
            Mode::Central => "central",
        })
    }
}

/// Where the central-mode controller lives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerPlacement {
    /// Shares rank 0's endpoint.
    #[default]
    Hybrid,
    /// Own endpoint on an extra node.
    Dedicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic { size: u64, prompt_tokens: u32 },
    Jsonl { path: PathBuf },
}

/// Explicit chain for a rank range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainGroup {
    pub start: u32,
    pub end: u32,
    #[serde(default)]
    pub algorithm: Option<Algorithm>,
    #[serde(default)]
    pub dag: Option<PathBuf>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Grpo
}
fn default_iterations() -> u32 {
    5
}
fn default_warmup() -> u32 {
    2
}
fn default_eps() -> f64 {
    1e-6
}
fn default_timeout_ms() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub nodes: u32,
    pub workers_per_node: u32,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    /// DAG document replacing the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dag: Option<PathBuf>,
    /// Missing entries fall back to `dp = world, tp = 1`.
    #[serde(default)]
    pub layouts: StageLayouts,
    pub global_batch: u64,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_warmup")]
    pub warmup: u32,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_capacity_bytes: Option<u64>,
    #[serde(default)]
    pub controller_placement: ControllerPlacement,
    #[serde(default = "default_eps")]
    pub advantage_eps: f64,
    /// Per-range chains; accepted by plan dumps only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_groups: Option<Vec<ChainGroup>>,
    #[serde(default = "default_timeout_ms")]
    pub recv_timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_frame_bytes: Option<usize>,
    #[serde(default)]
    pub shuffle: bool,
}

fn default_backend() -> Backend {
    Backend::Inproc
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative paths inside the document resolve against its directory.
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dag.as_mut() {
            fix(p);
        }
        if let DatasetConfig::Jsonl { path } = &mut cfg.dataset {
            fix(path);
        }
        for g in cfg.chain_groups.iter_mut().flatten() {
            if let Some(p) = g.dag.as_mut() {
                fix(p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn topology(&self) -> Result<ClusterTopology, ConfigError> {
        ClusterTopology::new(self.nodes, self.workers_per_node).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn world_size(&self) -> u32 {
        self.nodes * self.workers_per_node
    }

    /// `BxW` label.
    pub fn scale(&self) -> String {
        format!("{}x{}", self.nodes, self.workers_per_node)
    }

    pub fn graph(&self) -> Result<DagGraph, ConfigError> {
        load_graph(self.algorithm, self.dag.as_deref())
    }

    fn resolved_layouts(&self) -> StageLayouts {
        let mut l = self.layouts.clone();
        if l.default.is_none() {
            l.default = Some(ParallelLayout::new(self.world_size(), 1));
        }
        l
    }

    /// Chain assignment and layouts, with chain groups if configured.
    pub fn plan(&self) -> Result<WorkerPlan, ConfigError> {
        let topo = self.topology()?;
        let assignment = match &self.chain_groups {
            None => ChainAssignment::Replicated(serialize_graph(&self.graph()?)?),
            Some(groups) => ChainAssignment::Groups(
                groups
                    .iter()
                    .map(|g| {
                        let graph = load_graph(g.algorithm.unwrap_or(self.algorithm), g.dag.as_deref())?;
                        Ok((g.start..g.end, serialize_graph(&graph)?))
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?,
            ),
        };
        Ok(assign_chains(assignment, topo, &self.resolved_layouts())?)
    }

    /// Every precondition a launch needs, checked up front.
    pub fn validate(&self) -> Result<WorkerPlan, ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.chain_groups.is_some() {
            return invalid("chain_groups are only supported with --dump-plan".into());
        }
        let plan = self.plan()?;
        let chain = plan.chain_for(0);
        if chain.is_empty() {
            return invalid("chain is empty".into());
        }
        if self.iterations == 0 {
            return invalid("iterations must be at least 1".into());
        }
        if self.generation.rollouts == 0 || self.generation.bytes_per_token == 0 {
            return invalid("generation needs rollouts >= 1 and bytes_per_token >= 1".into());
        }
        if let crate::worker::TokenDist::Uniform { min, max } = self.generation.response_tokens {
            if min > max {
                return invalid(format!("uniform token range {min}..={max} is empty"));
            }
        }
        let g = self.global_batch;
        let b = self.nodes as u64;
        let layouts: Vec<ParallelLayout> = chain.node_ids().iter().map(|id| plan.layout(id)).collect();
        for (id, l) in chain.node_ids().iter().zip(&layouts) {
            if g == 0 || !g.is_multiple_of(l.dp as u64) {
                return invalid(format!("global batch {g} is not divisible by dp {} of stage {id}", l.dp));
            }
        }
        if self.mode == Mode::Distributed {
            for pair in layouts.windows(2) {
                if pair[0].dp != pair[1].dp && !(g / b).is_multiple_of(b) {
                    return invalid(format!("per-store count {} is not divisible by {b} nodes", g / b));
                }
            }
        }
        let n = self.data_source().len().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = layouts[0].dp as u64;
        if n % d != 0 {
            return invalid(format!("dataset size {n} is not divisible by dp {d}"));
        }
        if g / d > n / d {
            return invalid(format!("batch of {} per group exceeds shard of {}", g / d, n / d));
        }
        Ok(plan)
    }

    pub fn data_source(&self) -> DataSource {
        match &self.dataset {
            DatasetConfig::Synthetic { size, prompt_tokens } => DataSource::Synthetic {
                size: *size,
                prompt_tokens: *prompt_tokens,
                bytes_per_token: self.generation.bytes_per_token,
                seed: self.seed,
            },
            DatasetConfig::Jsonl { path } => DataSource::Jsonl { path: path.clone() },
        }
    }

    pub fn function_params(&self) -> FunctionParams {
        FunctionParams {
            seed: self.seed,
            generation: self.generation,
            cost: self.cost,
            advantage_eps: self.advantage_eps,
            no_cost: false,
        }
    }

    pub fn shuffle_seed(&self) -> Option<u64> {
        self.shuffle.then_some(self.seed)
    }

    pub fn dedicated_controller(&self) -> bool {
        self.mode == Mode::Central && self.controller_placement == ControllerPlacement::Dedicated
    }

    pub fn fabric_options(&self) -> FabricOptions {
        let mut o = FabricOptions {
            recv_timeout: Duration::from_millis(self.recv_timeout_ms),
            dedicated_controller: self.dedicated_controller(),
            ..FabricOptions::default()
        };
        if let Some(m) = self.max_frame_bytes {
            o.max_frame = m;
        }
        o
    }

    /// Stable id of the experiment; the backend is left out so the same
    /// experiment on both backends shares a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.backend = Backend::Inproc;
        format!("{:016x}", hash::fnv1a(serde_json::to_string(&c).expect("config serializes").as_bytes()))
    }

    /// Same experiment on `nodes x workers_per_node`, with the global batch
    /// and synthetic dataset scaled by the node count and each layout keeping
    /// its tp size.
    pub fn scaled(&self, nodes: u32, workers_per_node: u32) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        let scale = |v: u64| -> Result<u64, ConfigError> {
            let num = v * nodes as u64;
            if !num.is_multiple_of(self.nodes as u64) {
                return Err(ConfigError::Invalid(format!("{v} does not scale from {} to {nodes} nodes", self.nodes)));
            }
            Ok(num / self.nodes as u64)
        };
        c.nodes = nodes;
        c.workers_per_node = workers_per_node;
        c.global_batch = scale(self.global_batch)?;
        if let DatasetConfig::Synthetic { size, prompt_tokens } = self.dataset {
            c.dataset = DatasetConfig::Synthetic { size: scale(size)?, prompt_tokens };
        }
        let world = nodes * workers_per_node;
        let rescale = |l: ParallelLayout| ParallelLayout::new(world / l.tp.max(1), l.tp);
        c.layouts.default = self.layouts.default.map(rescale);
        c.layouts.stages = self.layouts.stages.iter().map(|(k, l)| (k.clone(), rescale(*l))).collect();
        Ok(c)
    }
}

fn load_graph(algorithm: Algorithm, dag: Option<&Path>) -> Result<DagGraph, ConfigError> {
    let graph = match dag {
        None => preset_dag(algorithm),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
            parse_dag_config(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        }
    };
    let report = validate_dag(&graph);
    if !report.ok() {
        let msgs: Vec<String> = report.issues.iter().map(|i| i.message.clone()).collect();
        return Err(ConfigError::Invalid(format!("DAG {}: {}", graph.name, msgs.join("; "))));
    }
    Ok(graph)
}

/// Parses `"1x4,2x4"` into `(nodes, workers_per_node)` pairs.
pub fn parse_scales(text: &str) -> Result<Vec<(u32, u32)>, ConfigError> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            let (b, w) = s.split_once('x').ok_or_else(|| ConfigError::Parse(format!("scale \"{s}\" is not BxW")))?;
            let parse = |v: &str| v.parse::<u32>().map_err(|_| ConfigError::Parse(format!("scale \"{s}\" is not BxW")));
            Ok((parse(b)?, parse(w)?))
        })
        .collect()
}
