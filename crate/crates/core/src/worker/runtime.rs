use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use log::trace;

use super::functions::{FnContext, FunctionParams, Registry, StageFn};
use super::metrics::{digest_records, IterationMetrics, NodeMetrics};
use super::WorkerError;
use crate::dag::{NodeSpec, Role};
use crate::data::{BufferStore, SampleBatch, ShardLoader, StageRef};
use crate::planner::TaskChain;
use crate::topology::{ClusterTopology, ParallelLayout, Rank};

pub struct BoundNode {
    pub spec: NodeSpec,
    pub key: String,
    pub layout: ParallelLayout,
    pub func: StageFn,
}

impl std::fmt::Debug for BoundNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundNode").field("id", &self.spec.id).field("key", &self.key).field("layout", &self.layout).finish()
    }
}

#[derive(Debug)]
pub struct ExecutableChain {
    pub nodes: Vec<BoundNode>,
}

impl ExecutableChain {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn layouts(&self) -> Vec<ParallelLayout> {
        self.nodes.iter().map(|n| n.layout).collect()
    }
}

/// Resolves every chain node to a registered function and its layout.
pub fn registry_bind(
    chain: &TaskChain,
    registry: &Registry,
    layouts: &BTreeMap<String, ParallelLayout>,
) -> Result<ExecutableChain, WorkerError> {
    let nodes = chain
        .entries
        .iter()
        .map(|e| {
            let func = registry
                .get(&e.key)
                .ok_or_else(|| WorkerError::UnboundNode { node: e.node.id.clone(), key: e.key.clone() })?;
            let layout = *layouts.get(&e.node.id).ok_or_else(|| WorkerError::MissingLayout { node: e.node.id.clone() })?;
            Ok(BoundNode { spec: e.node.clone(), key: e.key.clone(), layout, func: Arc::clone(func) })
        })
        .collect::<Result<Vec<_>, WorkerError>>()?;
    Ok(ExecutableChain { nodes })
}

/// How a worker obtains its first batch and moves data between stages.
pub trait Dataflow: Send {
    /// This group's slice of the global batch for the first node.
    fn load(&mut self, iteration: u32, layout: ParallelLayout) -> Result<SampleBatch, WorkerError>;

    /// Hands off the output of chain position `index` (produced under `from`)
    /// and returns this rank's input for the next node (under `to`).
    fn handoff(
        &mut self,
        stage: StageRef<'_>,
        iteration: u32,
        from: ParallelLayout,
        to: ParallelLayout,
        batch: SampleBatch,
    ) -> Result<SampleBatch, WorkerError>;

    /// Puts dropped as TP duplicates so far.
    fn suppressed(&self) -> u64;
}

/// Sharded loader plus the node-local databuffer.
pub struct DistributedFlow {
    rank: Rank,
    global_batch: u64,
    loader: ShardLoader,
    store: Arc<BufferStore>,
    suppressed: u64,
}

impl DistributedFlow {
    pub fn new(rank: Rank, global_batch: u64, loader: ShardLoader, store: Arc<BufferStore>) -> Self {
        Self { rank, global_batch, loader, store, suppressed: 0 }
    }
}

impl Dataflow for DistributedFlow {
    fn load(&mut self, iteration: u32, _layout: ParallelLayout) -> Result<SampleBatch, WorkerError> {
        Ok(self.loader.next_batch(iteration, self.global_batch)?)
    }

    fn handoff(
        &mut self,
        stage: StageRef<'_>,
        iteration: u32,
        from: ParallelLayout,
        to: ParallelLayout,
        batch: SampleBatch,
    ) -> Result<SampleBatch, WorkerError> {
        let tp = from.tp_rank(self.rank);
        if tp != 0 {
            self.suppressed += 1;
        }
        self.store.put(stage, iteration, from, from.dp_rank(self.rank), tp, batch)?;
        Ok(self.store.get(stage.id, iteration, to.dp_rank(self.rank), to)?)
    }

    fn suppressed(&self) -> u64 {
        self.suppressed
    }
}

/// Everything one worker needs across iterations.
pub struct WorkerState {
    pub rank: Rank,
    pub topology: ClusterTopology,
    pub chain: ExecutableChain,
    pub params: Arc<FunctionParams>,
    pub model_versions: BTreeMap<Role, u64>,
    flow: Box<dyn Dataflow>,
    epoch: Instant,
    collect_digests: bool,
    active: u32,
}

impl WorkerState {
    pub fn new(
        rank: Rank,
        topology: ClusterTopology,
        chain: ExecutableChain,
        params: Arc<FunctionParams>,
        flow: Box<dyn Dataflow>,
    ) -> Self {
        Self {
            rank,
            topology,
            chain,
            params,
            model_versions: BTreeMap::new(),
            flow,
            epoch: Instant::now(),
            collect_digests: false,
            active: 0,
        }
    }

    /// Attach per-record digests of the final batch to every report.
    pub fn with_digests(mut self, on: bool) -> Self {
        self.collect_digests = on;
        self
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    /// Runs the chain once, strictly in order.
    pub fn run_iteration(&mut self, iteration: u32) -> Result<IterationMetrics, WorkerError> {
        let started = Instant::now();
        let suppressed_before = self.flow.suppressed();
        let mut metrics = IterationMetrics {
            rank: self.rank,
            iteration,
            wall_ns: 0,
            nodes: Vec::with_capacity(self.chain.len()),
            counted: false,
            records: 0,
            tokens: 0,
            suppressed_puts: 0,
            reward_sum: 0.0,
            reward_sq_sum: 0.0,
            reward_count: 0,
            max_active_nodes: 0,
            digests: Vec::new(),
        };
        let mut batch: Option<SampleBatch> = None;
        for i in 0..self.chain.nodes.len() {
            let enter_ns = self.now_ns();
            self.active += 1;
            metrics.max_active_nodes = metrics.max_active_nodes.max(self.active);
            let node = &self.chain.nodes[i];
            let input = match batch.take() {
                None => self.flow.load(iteration, node.layout)?,
                Some(prev) => {
                    let p = &self.chain.nodes[i - 1];
                    let stage = StageRef { id: &p.spec.id, index: (i - 1) as u32 };
                    self.flow.handoff(stage, iteration, p.layout, node.layout, prev)?
                }
            };
            trace!("rank {} node {} got {} records", self.rank, node.spec.id, input.len());
            let mut ctx = FnContext {
                node: &node.spec,
                iteration,
                params: &self.params,
                model_versions: &mut self.model_versions,
            };
            let mut out = (node.func)(&mut ctx, input)
                .map_err(|source| WorkerError::Function { node: node.spec.id.clone(), source })?;
            out.stage_id = node.spec.id.clone();
            out.iteration = iteration;
            self.active -= 1;
            metrics.nodes.push(NodeMetrics {
                node_id: node.spec.id.clone(),
                enter_ns,
                exit_ns: self.now_ns(),
                records: out.len() as u64,
                tokens: out.tokens(),
            });
            batch = Some(out);
        }
        if let (Some(last), Some(out)) = (self.chain.nodes.last(), batch) {
            metrics.counted = last.layout.tp_rank(self.rank) == 0;
            metrics.records = out.len() as u64;
            metrics.tokens = out.tokens();
            if metrics.counted {
                metrics.add_rewards(&out.records);
                if self.collect_digests {
                    metrics.digests = digest_records(&out.records);
                }
            }
        }
        metrics.suppressed_puts = self.flow.suppressed() - suppressed_before;
        metrics.wall_ns = started.elapsed().as_nanos() as u64;
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{preset_dag, Algorithm, NodeType};
    use crate::data::{DataSource, SampleRecord};
    use crate::planner::serialize_graph;
    use crate::transport::{create_fabric, Backend, FabricOptions};
    use crate::worker::functions::{CostModel, GenerationParams, TokenDist};
    use crate::worker::{aggregate_metrics, RunMetrics};
    use std::thread;

    fn layouts(chain: &TaskChain, l: ParallelLayout) -> BTreeMap<String, ParallelLayout> {
        chain.node_ids().into_iter().map(|id| (id.to_string(), l)).collect()
    }

    fn params() -> Arc<FunctionParams> {
        Arc::new(FunctionParams {
            seed: 3,
            generation: GenerationParams { rollouts: 2, response_tokens: TokenDist::Uniform { min: 1, max: 9 }, bytes_per_token: 1 },
            cost: CostModel::zero(),
            ..FunctionParams::default()
        })
    }

    /// Runs `iterations` of the GRPO preset on a 1xW inproc cluster.
    fn run_grpo(w: u32, dataset: u64, g: u64, iterations: u32) -> Vec<RunMetrics> {
        let topo = ClusterTopology::new(1, w).unwrap();
        let chain = serialize_graph(&preset_dag(Algorithm::Grpo)).unwrap();
        let layout = ParallelLayout::new(w, 1);
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let store = Arc::new(BufferStore::new(0, hubs[0].endpoint(topo.store_endpoint(0)).unwrap()));
        let src = DataSource::Synthetic { size: dataset, prompt_tokens: 2, bytes_per_token: 1, seed: 3 };
        let handles: Vec<_> = (0..w)
            .map(|rank| {
                let bound = registry_bind(&chain, &Registry::builtin(), &layouts(&chain, layout)).unwrap();
                let loader = ShardLoader::open(&src, layout, layout.dp_rank(rank)).unwrap();
                let flow = DistributedFlow::new(rank, g, loader, Arc::clone(&store));
                let ep = hubs[0].endpoint(rank).unwrap();
                thread::spawn(move || {
                    let mut st = WorkerState::new(rank, topo, bound, params(), Box::new(flow)).with_digests(true);
                    (0..iterations)
                        .map(|it| aggregate_metrics(&ep, w, st.run_iteration(it).unwrap()).unwrap())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<Vec<Option<RunMetrics>>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        all.swap_remove(0).into_iter().map(Option::unwrap).collect()
    }

    #[test]
    fn grpo_binds_five_nodes() {
        let chain = serialize_graph(&preset_dag(Algorithm::Grpo)).unwrap();
        let bound = registry_bind(&chain, &Registry::builtin(), &layouts(&chain, ParallelLayout::new(1, 1))).unwrap();
        assert_eq!(bound.len(), 5);
    }

    #[test]
    fn unregistered_func_is_unbound() {
        let mut g = preset_dag(Algorithm::Grpo);
        g.nodes[2].func_tag = Some("my_reward".into());
        let chain = serialize_graph(&g).unwrap();
        let err = registry_bind(&chain, &Registry::builtin(), &layouts(&chain, ParallelLayout::new(1, 1))).unwrap_err();
        assert_eq!(err, WorkerError::UnboundNode { node: "reward_compute".into(), key: "my_reward".into() });
    }

    #[test]
    fn four_records_per_worker_and_token_sum() {
        let runs = run_grpo(4, 16, 16, 1);
        let m = &runs[0];
        for r in &m.per_rank {
            assert!(r.nodes.iter().all(|n| n.records == 4), "rank {}", r.rank);
        }
        // Independent token total straight from the length distribution.
        let p = params();
        let expected: u64 = (0..16u64)
            .flat_map(|id| (0..2u64).map(move |j| (id, j)))
            .map(|(id, j)| {
                let h = crate::hash::keyed(p.seed, &[0x746f_6b65_6e73, id, j]);
                1 + h % 9
            })
            .sum();
        assert_eq!(m.tokens(), expected);
        assert_eq!(m.records(), 16);
        assert_eq!(m.max_active_nodes(), 1);
        assert_eq!(m.digests().len(), 16);
    }

    #[test]
    fn consecutive_iterations_match_without_timing() {
        // Dataset equals the global batch, so every iteration reads the same records.
        let runs = run_grpo(2, 8, 8, 2);
        let strip = |m: &RunMetrics| m.per_rank.iter().map(|r| IterationMetrics { iteration: 0, ..r.without_timing() }).collect::<Vec<_>>();
        assert_eq!(strip(&runs[0]), strip(&runs[1]));
    }

    #[test]
    fn node_intervals_do_not_overlap() {
        for m in run_grpo(4, 32, 16, 2) {
            for r in &m.per_rank {
                for w in r.nodes.windows(2) {
                    assert!(w[0].exit_ns <= w[1].enter_ns);
                }
            }
        }
    }

    struct Fixed(Vec<SampleRecord>);

    impl Dataflow for Fixed {
        fn load(&mut self, iteration: u32, _: ParallelLayout) -> Result<SampleBatch, WorkerError> {
            Ok(SampleBatch::new("dataset", iteration, self.0.clone()))
        }
        fn handoff(&mut self, _: StageRef<'_>, _: u32, _: ParallelLayout, _: ParallelLayout, b: SampleBatch) -> Result<SampleBatch, WorkerError> {
            Ok(b)
        }
        fn suppressed(&self) -> u64 {
            0
        }
    }

    #[test]
    fn compute_node_over_empty_batch() {
        let node = NodeSpec::new("c", Role::Reward, NodeType::Compute, Some("reward"), &[]);
        let chain = TaskChain {
            source_graph: "one".into(),
            entries: vec![crate::planner::ChainEntry { key: node.dispatch_key(), node }],
        };
        let bound = registry_bind(&chain, &Registry::builtin(), &layouts(&chain, ParallelLayout::new(1, 1))).unwrap();
        let topo = ClusterTopology::new(1, 1).unwrap();
        let mut st = WorkerState::new(0, topo, bound, params(), Box::new(Fixed(vec![])));
        let m = st.run_iteration(0).unwrap();
        assert_eq!((m.records, m.tokens, m.nodes[0].records), (0, 0, 0));
    }

    #[test]
    fn function_errors_name_the_node() {
        let node = NodeSpec::new("score", Role::Reward, NodeType::Compute, Some("reward"), &[]);
        let chain = TaskChain {
            source_graph: "one".into(),
            entries: vec![crate::planner::ChainEntry { key: node.dispatch_key(), node }],
        };
        let bound = registry_bind(&chain, &Registry::builtin(), &layouts(&chain, ParallelLayout::new(1, 1))).unwrap();
        let topo = ClusterTopology::new(1, 1).unwrap();
        let mut st = WorkerState::new(0, topo, bound, params(), Box::new(Fixed(vec![SampleRecord::new(4)])));
        assert!(matches!(st.run_iteration(0), Err(WorkerError::Function { node, .. }) if node == "score"));
    }

    #[test]
    fn actor_version_counts_iterations() {
        let w = 1;
        let topo = ClusterTopology::new(1, w).unwrap();
        let chain = serialize_graph(&preset_dag(Algorithm::Grpo)).unwrap();
        let layout = ParallelLayout::new(1, 1);
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let store = Arc::new(BufferStore::new(0, hubs[0].endpoint(topo.store_endpoint(0)).unwrap()));
        let src = DataSource::Synthetic { size: 4, prompt_tokens: 1, bytes_per_token: 1, seed: 0 };
        let loader = ShardLoader::open(&src, layout, 0).unwrap();
        let bound = registry_bind(&chain, &Registry::builtin(), &layouts(&chain, layout)).unwrap();
        let mut st = WorkerState::new(0, topo, bound, params(), Box::new(DistributedFlow::new(0, 4, loader, store)));
        for it in 0..3 {
            st.run_iteration(it).unwrap();
        }
        assert_eq!(st.model_versions.get(&Role::Actor), Some(&3));
    }
}
