//! Launches a configured experiment on one fabric hub or on all of them.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central::{CentralFlow, Controller};
use crate::config::{ConfigError, Mode, RunConfig};
use crate::data::{BufferStore, ShardLoader};
use crate::planner::WorkerPlan;
use crate::topology::{ClusterTopology, EndpointId, Rank};
use crate::transport::{barrier, create_fabric, tags, Fabric, LedgerSnapshot, TrafficReport, TransportError, SETUP_ITERATION};
use crate::worker::{aggregate_metrics, registry_bind, Dataflow, DistributedFlow, Registry, RunMetrics, WorkerError, WorkerState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("rank {rank}: {error}")]
    Rank { rank: Rank, error: WorkerError },
    #[error("controller: {0}")]
    Controller(WorkerError),
    #[error("hub {hub}: {error}")]
    Hub { hub: usize, error: TransportError },
    #[error("launch: {0}")]
    Launch(String),
    /// Failure reported by a hub running in another process.
    #[error("{message}")]
    Remote { hub: usize, message: String, secondary: bool },
}

impl RunError {
    pub fn is_secondary(&self) -> bool {
        match self {
            RunError::Rank { error, .. } | RunError::Controller(error) => error.is_secondary(),
            RunError::Hub { error, .. } => matches!(error, TransportError::Aborted(_) | TransportError::PeerClosed(_)),
            RunError::Remote { secondary, .. } => *secondary,
            _ => false,
        }
    }

    /// Picks the root cause out of several concurrent failures.
    pub fn primary(mut errors: Vec<RunError>) -> Option<RunError> {
        let pos = errors.iter().position(|e| !e.is_secondary()).unwrap_or(0);
        (!errors.is_empty()).then(|| errors.swap_remove(pos))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HubOptions {
    /// Ship per-record digests with every metrics report.
    pub digests: bool,
}

/// What the hub hosting rank 0 knows at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubReport {
    pub iterations: Vec<RunMetrics>,
    pub ledger: LedgerSnapshot,
}

const DONE_INDEX: u32 = 0x00FF_FFFF;

/// Endpoint the central-mode controller uses.
pub fn controller_endpoint(config: &RunConfig, topology: &ClusterTopology) -> EndpointId {
    if config.dedicated_controller() {
        topology.dedicated_controller_endpoint()
    } else {
        0
    }
}

fn worker_main(
    rank: Rank,
    config: &RunConfig,
    plan: &WorkerPlan,
    fabric: &Arc<Fabric>,
    store: Option<Arc<BufferStore>>,
    opts: HubOptions,
) -> Result<Vec<RunMetrics>, WorkerError> {
    let topo = plan.topology;
    let ep = fabric.endpoint(rank)?;
    let chain = registry_bind(plan.chain_for(rank), &Registry::builtin(), &plan.layouts)?;
    let first = chain.layouts()[0];
    let flow: Box<dyn Dataflow> = match config.mode {
        Mode::Distributed => {
            let loader = ShardLoader::open(&config.data_source(), first, first.dp_rank(rank))?.with_shuffle(config.shuffle_seed());
            Box::new(DistributedFlow::new(rank, config.global_batch, loader, store.expect("distributed mode has stores")))
        }
        Mode::Central => Box::new(CentralFlow::connect(
            ep.clone(),
            controller_endpoint(config, &topo),
            first,
            config.global_batch,
            config.shuffle_seed(),
        )?),
    };
    let mut state = WorkerState::new(rank, topo, chain, Arc::new(config.function_params()), flow).with_digests(opts.digests);
    let everyone: Vec<EndpointId> = (0..topo.world_size()).collect();
    let mut out = Vec::new();
    for it in 0..config.warmup + config.iterations {
        barrier(&ep, &everyone, 0, it, it)?;
        let m = state.run_iteration(it)?;
        if let Some(all) = aggregate_metrics(&ep, topo.world_size(), m)? {
            debug!("iteration {it}: {} tokens in {:.4}s", all.tokens(), all.iteration_time_s());
            out.push(all);
        }
    }
    Ok(out)
}

/// Runs every endpoint hosted by `fabric`: the workers and stores of its
/// nodes and, in central mode, the controller if it lives here. Returns the
/// report on the hub that hosts rank 0.
pub fn run_hub(config: &RunConfig, fabric: Arc<Fabric>, opts: HubOptions) -> Result<Option<HubReport>, RunError> {
    let plan = Arc::new(config.validate()?);
    let topo = plan.topology;
    let hubs = fabric.hub_layout().clone();
    let hub = fabric.hub_index();
    let nodes: Vec<u32> = hubs.nodes_of_hub(hub).into_iter().filter(|&n| n < topo.nodes()).collect();

    let mut stores: BTreeMap<u32, Arc<BufferStore>> = BTreeMap::new();
    if config.mode == Mode::Distributed {
        for &n in &nodes {
            let ep = fabric.endpoint(topo.store_endpoint(n)).map_err(|error| RunError::Hub { hub, error })?;
            stores.insert(n, Arc::new(BufferStore::new(n, ep)));
        }
    }

    let mut handles: Vec<thread::JoinHandle<Result<Option<Vec<RunMetrics>>, RunError>>> = Vec::new();
    for &n in &nodes {
        for rank in topo.ranks_on_node(n) {
            let (config, plan, fabric) = (config.clone(), Arc::clone(&plan), Arc::clone(&fabric));
            let store = stores.get(&n).cloned();
            handles.push(
                thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn(move || {
                        worker_main(rank, &config, &plan, &fabric, store, opts)
                            .map(|m| (rank == 0).then_some(m))
                            .map_err(|error| {
                                fabric.abort(&format!("rank {rank}: {error}"));
                                RunError::Rank { rank, error }
                            })
                    })
                    .expect("spawn worker thread"),
            );
        }
    }
    let ctl = controller_endpoint(config, &topo);
    if config.mode == Mode::Central && fabric.hosts(ctl) {
        let (config, plan, fabric) = (config.clone(), Arc::clone(&plan), Arc::clone(&fabric));
        handles.push(
            thread::Builder::new()
                .name("controller".into())
                .spawn(move || {
                    let run = || -> Result<(), WorkerError> {
                        let chain = plan.chain_for(0);
                        let layouts = chain.node_ids().iter().map(|id| plan.layout(id)).collect();
                        let c = Controller::new(fabric.endpoint(ctl)?, layouts, config.controller_capacity_bytes);
                        c.setup(&config.data_source())?;
                        c.run(0..config.warmup + config.iterations)
                    };
                    run().map(|_| None).map_err(|error| {
                        fabric.abort(&format!("controller: {error}"));
                        RunError::Controller(error)
                    })
                })
                .expect("spawn controller thread"),
        );
    }

    let mut iterations = None;
    let mut errors = Vec::new();
    for h in handles {
        match h.join().unwrap_or_else(|_| Err(RunError::Launch("worker thread panicked".into()))) {
            Ok(Some(m)) => iterations = Some(m),
            Ok(None) => {}
            Err(e) => errors.push(e),
        }
    }
    if let Some(e) = RunError::primary(errors) {
        return Err(e);
    }

    // Hub leaders ship their ledgers to rank 0, which releases them once it
    // has everything.
    let hub_err = |error| RunError::Hub { hub, error };
    let traffic_tag = tags::make(tags::TRAFFIC, 0);
    let done_tag = tags::make(tags::RELEASE, DONE_INDEX);
    let leaders: Vec<EndpointId> = (0..hubs.hub_count()).map(|h| hubs.leader(&topo, h)).collect();
    let me = fabric.endpoint(leaders[hub]).map_err(hub_err)?;
    if fabric.hosts(0) {
        let mut snaps = vec![fabric.ledger_snapshot()];
        for (h, &l) in leaders.iter().enumerate() {
            if h != hub {
                let env = me.recv_from(l, traffic_tag, SETUP_ITERATION).map_err(hub_err)?;
                snaps.push(bincode::deserialize(&env.payload).map_err(|e| RunError::Launch(format!("ledger from hub {h}: {e}")))?);
            }
        }
        for (h, &l) in leaders.iter().enumerate() {
            if h != hub {
                me.send(l, done_tag, SETUP_ITERATION, Vec::new()).map_err(hub_err)?;
            }
        }
        info!("run complete on {} hubs", hubs.hub_count());
        Ok(Some(HubReport {
            iterations: iterations.ok_or_else(|| RunError::Launch("rank 0 produced no metrics".into()))?,
            ledger: LedgerSnapshot::merge(snaps),
        }))
    } else {
        let snap = bincode::serialize(&fabric.ledger_snapshot()).expect("ledger serializes");
        me.send(0, traffic_tag, SETUP_ITERATION, snap).map_err(hub_err)?;
        me.recv_from(0, done_tag, SETUP_ITERATION).map_err(hub_err)?;
        Ok(None)
    }
}

/// A finished run as seen from rank 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub topology: ClusterTopology,
    /// Warmup iterations first.
    pub iterations: Vec<RunMetrics>,
    pub ledger: LedgerSnapshot,
}

impl RunOutcome {
    pub fn from_report(config: &RunConfig, report: HubReport) -> Result<Self, RunError> {
        Ok(Self { config: config.clone(), topology: config.topology()?, iterations: report.iterations, ledger: report.ledger })
    }

    pub fn measured(&self) -> &[RunMetrics] {
        &self.iterations[self.config.warmup as usize..]
    }

    pub fn mean_iteration_time_s(&self) -> f64 {
        let m = self.measured();
        m.iter().map(RunMetrics::iteration_time_s).sum::<f64>() / m.len() as f64
    }

    /// Data-class traffic of one iteration.
    pub fn traffic(&self, iteration: u32) -> TrafficReport {
        self.ledger.data_report(&self.topology, iteration)
    }

    pub fn controller_endpoint(&self) -> Option<EndpointId> {
        (self.config.mode == Mode::Central).then(|| controller_endpoint(&self.config, &self.topology))
    }

    /// Bytes per stage transition (chain position of the producer) in one iteration.
    pub fn stage_bytes(&self, iteration: u32) -> BTreeMap<u32, u64> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.ledger.egress {
            if k.iteration == iteration && matches!(tags::kind(k.tag), tags::REDISTRIBUTE | tags::COLLECT | tags::DISPATCH) {
                *out.entry(k.tag & 0x00FF_FFFF).or_insert(0) += v;
            }
        }
        out
    }
}

/// Runs a whole experiment inside this process: one thread per worker,
/// and for TCP one loopback hub per node.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome, RunError> {
    run_experiment_with(config, HubOptions::default())
}

pub fn run_experiment_with(config: &RunConfig, opts: HubOptions) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let topo = config.topology()?;
    info!("{} {:?} run on {} ({})", config.mode, config.algorithm, config.scale(), config.backend);
    let hubs = create_fabric(topo, config.backend, config.fabric_options()).map_err(|error| RunError::Hub { hub: 0, error })?;
    let handles: Vec<_> = hubs
        .iter()
        .map(|h| {
            let (config, h) = (config.clone(), Arc::clone(h));
            thread::spawn(move || run_hub(&config, h, opts))
        })
        .collect();
    let mut report = None;
    let mut errors = Vec::new();
    for h in handles {
        match h.join().unwrap_or_else(|_| Err(RunError::Launch("hub thread panicked".into()))) {
            Ok(Some(r)) => report = Some(r),
            Ok(None) => {}
            Err(e) => errors.push(e),
        }
    }
    for h in &hubs {
        h.close();
    }
    if let Some(e) = RunError::primary(errors) {
        return Err(e);
    }
    RunOutcome::from_report(config, report.ok_or_else(|| RunError::Launch("no hub hosted rank 0".into()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ControllerPlacement, DatasetConfig};
    use crate::planner::StageLayouts;
    use crate::topology::ParallelLayout;
    use crate::transport::Backend;
    use crate::worker::{CostModel, GenerationParams, TokenDist};

    fn base(b: u32, w: u32) -> RunConfig {
        let mut c = RunConfig::from_json(&format!(
            r#"{{"nodes": {b}, "workers_per_node": {w}, "global_batch": 16, "iterations": 2, "warmup": 1,
                "dataset": {{"synthetic": {{"size": 64, "prompt_tokens": 4}}}}}}"#
        ))
        .unwrap();
        c.cost = CostModel::zero();
        c.generation = GenerationParams { rollouts: 2, response_tokens: TokenDist::Uniform { min: 2, max: 6 }, bytes_per_token: 2 };
        c
    }

    #[test]
    fn grpo_smoke_inproc() {
        let out = run_experiment(&base(1, 4)).unwrap();
        assert_eq!(out.iterations.len(), 3);
        assert_eq!(out.measured().len(), 2);
        for m in out.measured() {
            assert_eq!(m.records(), 16);
            assert!(m.tokens_per_sec() > 0.0);
        }
    }

    #[test]
    fn modes_and_backends_agree_on_tokens() {
        let mut c = base(2, 2);
        c.layouts = StageLayouts::uniform(ParallelLayout::new(4, 1)).with("actor_train", ParallelLayout::new(2, 2));
        let tokens = |c: &RunConfig| run_experiment(c).unwrap().measured().iter().map(RunMetrics::tokens).collect::<Vec<_>>();
        let reference = tokens(&c);
        for (mode, backend, placement) in [
            (Mode::Distributed, Backend::Tcp, ControllerPlacement::Hybrid),
            (Mode::Central, Backend::Inproc, ControllerPlacement::Hybrid),
            (Mode::Central, Backend::Tcp, ControllerPlacement::Dedicated),
        ] {
            let mut v = c.clone();
            v.mode = mode;
            v.backend = backend;
            v.controller_placement = placement;
            assert_eq!(tokens(&v), reference, "{mode} {backend} {placement:?}");
        }
    }

    #[test]
    fn distributed_traffic_identical_across_backends() {
        let mut c = base(2, 2);
        c.layouts = StageLayouts::uniform(ParallelLayout::new(4, 1)).with("actor_train", ParallelLayout::new(2, 2));
        let a = run_experiment(&c).unwrap();
        c.backend = Backend::Tcp;
        let b = run_experiment(&c).unwrap();
        for it in 0..3 {
            assert_eq!(a.traffic(it), b.traffic(it));
        }
        assert!(a.traffic(1).internode_bytes() > 0);
        assert!(a.stage_bytes(1).contains_key(&3));
    }

    #[test]
    fn capacity_failure_names_controller() {
        let mut c = base(1, 4);
        c.mode = Mode::Central;
        c.controller_capacity_bytes = Some(64);
        let err = run_experiment(&c).unwrap_err();
        assert!(matches!(err, RunError::Controller(WorkerError::CapacityExceeded { .. })), "{err}");
    }

    #[test]
    fn invalid_layout_rejected_before_launch() {
        let mut c = base(2, 2);
        c.layouts = StageLayouts::uniform(ParallelLayout::new(1, 4));
        assert!(matches!(run_experiment(&c), Err(RunError::Config(_))));
    }

    #[test]
    fn jsonl_dataset_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let lines: String = (0..16).map(|i| format!("{{\"id\": {}, \"prompt\": \"p\"}}\n", 500 + i)).collect();
        std::fs::write(&path, lines).unwrap();
        let mut c = base(1, 2);
        c.dataset = DatasetConfig::Jsonl { path };
        c.global_batch = 8;
        let out = run_experiment_with(&c, HubOptions { digests: true }).unwrap();
        let ids: Vec<u64> = out.measured()[0].digests().iter().map(|d| d.sample_id).collect();
        assert_eq!(ids, vec![504, 505, 506, 507, 512, 513, 514, 515]);
    }
}
