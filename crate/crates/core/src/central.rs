//! Single-controller baseline: the dataset and every stage transition pass
//! through one controller endpoint.

use std::ops::Range;

use log::debug;

use crate::data::{decode_records, encode_records, shard_dataset, DataError, DataSource, SampleBatch, SampleRecord, ShardLoader, StageRef};
use crate::topology::{ClusterTopology, EndpointId, ParallelLayout, Rank};
use crate::transport::{tags, Endpoint, SETUP_ITERATION};
use crate::worker::{recv_each, Dataflow, WorkerError};

/// Whole dataset split into the shards of `layout`, in dp order.
pub fn central_load(source: &DataSource, layout: ParallelLayout) -> Result<Vec<Vec<SampleRecord>>, DataError> {
    let all = source.load(0..source.len()?)?;
    Ok(shard_dataset(all.len() as u64, layout)?
        .into_iter()
        .map(|r| all[r.start as usize..r.end as usize].to_vec())
        .collect())
}

/// Gathers the outputs of every TP-0 worker of `from` and concatenates them
/// in dp order. `capacity` bounds the staged bytes.
pub fn central_collect(
    ep: &Endpoint,
    from: ParallelLayout,
    index: u32,
    iteration: u32,
    capacity: Option<u64>,
) -> Result<Vec<SampleRecord>, WorkerError> {
    let leaders: Vec<Rank> = from.leaders().collect();
    let mut staged = 0u64;
    let mut out = Vec::new();
    for env in recv_each(ep, &leaders, tags::make(tags::COLLECT, index), iteration, "stage output")? {
        staged += env.payload.len() as u64;
        if let Some(cap) = capacity {
            if staged > cap {
                return Err(WorkerError::CapacityExceeded { staged, capacity: cap });
            }
        }
        out.extend(decode_records(&env.payload)?);
    }
    Ok(out)
}

/// Sends contiguous `G/d` slices to every rank of each group of `to`.
pub fn central_dispatch(
    ep: &Endpoint,
    records: &[SampleRecord],
    to: ParallelLayout,
    index: u32,
    iteration: u32,
) -> Result<(), WorkerError> {
    let g = records.len() as u64;
    if !g.is_multiple_of(to.dp as u64) {
        return Err(DataError::Indivisible { what: "global batch", n: g, d: to.dp as u64 }.into());
    }
    let per = (g / to.dp as u64) as usize;
    let tag = tags::make(tags::DISPATCH, index);
    for group in 0..to.dp {
        let bytes = encode_records(&records[group as usize * per..(group as usize + 1) * per]);
        for rank in to.group_ranks(group) {
            ep.send(rank, tag, iteration, bytes.clone())?;
        }
    }
    Ok(())
}

/// Controller loop. Runs on its own thread, either sharing rank 0's
/// endpoint or on the dedicated controller endpoint.
pub struct Controller {
    ep: Endpoint,
    topology: ClusterTopology,
    layouts: Vec<ParallelLayout>,
    capacity: Option<u64>,
}

impl Controller {
    /// `layouts` holds one entry per chain node, in chain order.
    pub fn new(ep: Endpoint, layouts: Vec<ParallelLayout>, capacity: Option<u64>) -> Self {
        let topology = *ep.fabric().topology();
        Self { ep, topology, layouts, capacity }
    }

    pub fn endpoint_id(&self) -> EndpointId {
        self.ep.id()
    }

    /// Loads the full dataset and sends each rank its group's shard.
    pub fn setup(&self, source: &DataSource) -> Result<(), WorkerError> {
        let first = *self.layouts.first().expect("chain is not empty");
        let shards = central_load(source, first)?;
        let encoded: Vec<Vec<u8>> = shards.iter().map(|s| encode_records(s)).collect();
        for rank in 0..self.topology.world_size() {
            let shard = &encoded[first.dp_rank(rank) as usize];
            self.ep.send(rank, tags::make(tags::LOAD, 0), SETUP_ITERATION, shard.clone())?;
        }
        Ok(())
    }

    /// Routes every stage transition of each iteration.
    pub fn run(&self, iterations: Range<u32>) -> Result<(), WorkerError> {
        for it in iterations {
            for (i, pair) in self.layouts.windows(2).enumerate() {
                let staged = central_collect(&self.ep, pair[0], i as u32, it, self.capacity)?;
                debug!("controller staged {} records for transition {i} iteration {it}", staged.len());
                central_dispatch(&self.ep, &staged, pair[1], i as u32, it)?;
            }
        }
        Ok(())
    }
}

/// Worker side of the central mode.
pub struct CentralFlow {
    rank: Rank,
    controller: EndpointId,
    ep: Endpoint,
    global_batch: u64,
    loader: ShardLoader,
    suppressed: u64,
}

impl CentralFlow {
    /// Blocks until the controller has delivered this rank's shard.
    pub fn connect(
        ep: Endpoint,
        controller: EndpointId,
        first: ParallelLayout,
        global_batch: u64,
        shuffle: Option<u64>,
    ) -> Result<Self, WorkerError> {
        let rank = ep.id();
        let env = ep.recv_from(controller, tags::make(tags::LOAD, 0), SETUP_ITERATION)?;
        let loader = ShardLoader::from_records(first, first.dp_rank(rank), decode_records(&env.payload)?).with_shuffle(shuffle);
        Ok(Self { rank, controller, ep, global_batch, loader, suppressed: 0 })
    }
}

impl Dataflow for CentralFlow {
    fn load(&mut self, iteration: u32, _layout: ParallelLayout) -> Result<SampleBatch, WorkerError> {
        Ok(self.loader.next_batch(iteration, self.global_batch)?)
    }

    fn handoff(
        &mut self,
        stage: StageRef<'_>,
        iteration: u32,
        from: ParallelLayout,
        _to: ParallelLayout,
        batch: SampleBatch,
    ) -> Result<SampleBatch, WorkerError> {
        if from.tp_rank(self.rank) == 0 {
            self.ep.send(self.controller, tags::make(tags::COLLECT, stage.index), iteration, encode_records(&batch.records))?;
        } else {
            self.suppressed += 1;
        }
        let env = self.ep.recv_from(self.controller, tags::make(tags::DISPATCH, stage.index), iteration)?;
        Ok(SampleBatch::new(stage.id, iteration, decode_records(&env.payload)?))
    }

    fn suppressed(&self) -> u64 {
        self.suppressed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rollout;
    use crate::transport::{create_fabric, Backend, Fabric, FabricOptions, LedgerSnapshot};
    use std::sync::Arc;
    use std::thread;

    fn record(id: u64, bytes: usize) -> SampleRecord {
        let mut r = SampleRecord::new(id);
        r.group.push(Rollout { payload: vec![1; bytes], token_count: bytes as u32, channels: Default::default() });
        r
    }

    fn endpoint(hubs: &[Arc<Fabric>], id: EndpointId) -> Endpoint {
        hubs.iter().find(|h| h.hosts(id)).unwrap().endpoint(id).unwrap()
    }

    /// Every leader of `from` sends `per_group` records, the controller at
    /// endpoint 0 collects and dispatches to `to`. Returns per-rank batches.
    fn transition(
        topo: ClusterTopology,
        from: ParallelLayout,
        to: ParallelLayout,
        per_group: usize,
        bytes: usize,
        capacity: Option<u64>,
    ) -> (Result<Vec<SampleRecord>, WorkerError>, Vec<Vec<u64>>, LedgerSnapshot) {
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let ctl_ep = endpoint(&hubs, 0);
        let workers: Vec<_> = (0..topo.world_size())
            .map(|rank| {
                let ep = endpoint(&hubs, rank);
                thread::spawn(move || -> Vec<u64> {
                    if from.tp_rank(rank) == 0 {
                        let g = from.dp_rank(rank) as u64;
                        let recs: Vec<_> = (0..per_group as u64).map(|i| record(g * 1000 + i, bytes)).collect();
                        ep.send(0, tags::make(tags::COLLECT, 0), 0, encode_records(&recs)).unwrap();
                    }
                    match ep.recv_from(0, tags::make(tags::DISPATCH, 0), 0) {
                        Ok(env) => decode_records(&env.payload).unwrap().iter().map(|r| r.sample_id).collect(),
                        Err(_) => Vec::new(),
                    }
                })
            })
            .collect();
        let staged = central_collect(&ctl_ep, from, 0, 0, capacity);
        match &staged {
            Ok(recs) => central_dispatch(&ctl_ep, recs, to, 0, 0).unwrap(),
            Err(e) => hubs[0].abort(&e.to_string()),
        }
        let got = workers.into_iter().map(|h| h.join().unwrap()).collect();
        (staged, got, LedgerSnapshot::merge(hubs.iter().map(|h| h.ledger_snapshot())))
    }

    #[test]
    fn collect_ingress_excludes_local_rank() {
        let topo = ClusterTopology::new(1, 8).unwrap();
        let l = ParallelLayout::new(8, 1);
        let (staged, _, ledger) = transition(topo, l, l, 1, 1024, None);
        let staged = staged.unwrap();
        assert_eq!(staged.iter().map(|r| r.sample_id).collect::<Vec<_>>(), (0..8).map(|g| g * 1000).collect::<Vec<_>>());
        let one = encode_records(&staged[..1]).len() as u64;
        let collect_ingress: u64 = ledger
            .ingress
            .iter()
            .filter(|(k, _)| k.dst == 0 && tags::kind(k.tag) == tags::COLLECT)
            .map(|(_, v)| v)
            .sum();
        assert_eq!(collect_ingress, 7 * (one + 20));
        assert!(one > 1024 && one < 1100);
    }

    #[test]
    fn single_worker_moves_no_bytes() {
        let topo = ClusterTopology::new(1, 1).unwrap();
        let l = ParallelLayout::new(1, 1);
        let (_, got, ledger) = transition(topo, l, l, 4, 16, None);
        assert_eq!(got[0].len(), 4);
        assert_eq!(ledger.total_report(&topo).total_egress(), 0);
    }

    #[test]
    fn collect_traffic_doubles_with_workers() {
        let ingress = |w: u32| {
            let topo = ClusterTopology::new(1, w).unwrap();
            let l = ParallelLayout::new(w, 1);
            let (_, _, ledger) = transition(topo, l, l, 2, 256, None);
            ledger.total_report(&topo).endpoint_ingress(0) as f64
        };
        let (a, b) = (ingress(8), ingress(16));
        // Rank 0 is local, so the ratio is (16-1)/(8-1).
        assert!((b / a - 15.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn four_batches_of_sixteen() {
        let topo = ClusterTopology::new(1, 4).unwrap();
        let (_, got, _) = transition(topo, ParallelLayout::new(2, 2), ParallelLayout::new(4, 1), 32, 8, None);
        assert!(got.iter().all(|b| b.len() == 16));
    }

    #[test]
    fn single_group_gets_everything() {
        let topo = ClusterTopology::new(1, 2).unwrap();
        let (_, got, _) = transition(topo, ParallelLayout::new(2, 1), ParallelLayout::new(1, 2), 3, 8, None);
        assert_eq!(got[0].len(), 6);
        assert_eq!(got[0], got[1]);
    }

    #[test]
    fn capacity_exceeded() {
        let topo = ClusterTopology::new(1, 4).unwrap();
        let l = ParallelLayout::new(4, 1);
        let (staged, _, _) = transition(topo, l, l, 4, 256, Some(2048));
        assert!(matches!(staged, Err(WorkerError::CapacityExceeded { capacity: 2048, .. })));
    }

    #[test]
    fn setup_matches_sharded_loader() {
        let topo = ClusterTopology::new(1, 2).unwrap();
        let layout = ParallelLayout::new(2, 1);
        let src = DataSource::Synthetic { size: 512, prompt_tokens: 4, bytes_per_token: 1, seed: 9 };
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let ctl = Controller::new(endpoint(&hubs, 0), vec![layout], None);
        ctl.setup(&src).unwrap();
        let flows: Vec<_> = (0..2).map(|r| CentralFlow::connect(endpoint(&hubs, r), 0, layout, 64, None).unwrap()).collect();
        for (r, f) in flows.iter().enumerate() {
            let own = ShardLoader::open(&src, layout, r as u32).unwrap();
            assert_eq!(f.loader.shard(), own.shard());
            assert_eq!(f.loader.next_batch(2, 64).unwrap(), own.next_batch(2, 64).unwrap());
        }
        assert_eq!(flows[0].loader.shard().first().unwrap().sample_id, 0);
        assert_eq!(flows[1].loader.shard().first().unwrap().sample_id, 256);
        let r = hubs[0].ledger_snapshot().total_report(&topo);
        let half = encode_records(flows[1].loader.shard()).len() as u64;
        assert_eq!(r.endpoint_egress(0), half + 20);
    }

    #[test]
    fn one_record_per_worker() {
        let src = DataSource::Synthetic { size: 4, prompt_tokens: 1, bytes_per_token: 1, seed: 0 };
        let shards = central_load(&src, ParallelLayout::new(4, 1)).unwrap();
        assert!(shards.iter().enumerate().all(|(i, s)| s.len() == 1 && s[0].sample_id == i as u64));
    }
}
