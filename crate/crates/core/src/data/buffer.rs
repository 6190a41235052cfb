//! Per-node databuffer.
//!
//! Local TP-0 workers put their stage output; the first local get triggers a
//! single redistribution for the `(stage, iteration)` slot, after which every
//! local worker reads the slice for its DP group under the next layout.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use log::debug;

use super::record::{decode_records, encode_records, SampleBatch, SampleRecord};
use super::DataError;
use crate::topology::{ClusterTopology, EndpointId, ParallelLayout};
use crate::transport::{all_to_all, tags, Endpoint};

const POLL: Duration = Duration::from_millis(20);

/// Producing stage: its node id and its position in the chain (used in tags).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRef<'a> {
    pub id: &'a str,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferStats {
    pub suppressed_puts: u64,
    pub fast_paths: u64,
    pub exchanges: u64,
    /// Total time spent inside redistribution, in microseconds.
    pub redistribute_micros: u64,
}

#[derive(Debug)]
enum Phase {
    Collecting,
    Redistributing,
    Ready(Vec<SampleRecord>),
    Failed(DataError),
}

#[derive(Debug)]
struct Slot {
    index: u32,
    from: ParallelLayout,
    puts: BTreeMap<u32, Vec<SampleRecord>>,
    phase: Phase,
    gets: u32,
}

#[derive(Debug, Default)]
struct State {
    current: u32,
    slots: HashMap<(String, u32), Slot>,
}

#[derive(Debug)]
pub struct BufferStore {
    node: u32,
    topology: ClusterTopology,
    endpoint: Endpoint,
    state: Mutex<State>,
    changed: Condvar,
    suppressed: AtomicU64,
    fast_paths: AtomicU64,
    exchanges: AtomicU64,
    redistribute_micros: AtomicU64,
}

impl BufferStore {
    /// `endpoint` must be the store endpoint of `node`.
    pub fn new(node: u32, endpoint: Endpoint) -> Self {
        let topology = *endpoint.fabric().topology();
        debug_assert_eq!(endpoint.id(), topology.store_endpoint(node));
        Self {
            node,
            topology,
            endpoint,
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
            suppressed: AtomicU64::new(0),
            fast_paths: AtomicU64::new(0),
            exchanges: AtomicU64::new(0),
            redistribute_micros: AtomicU64::new(0),
        }
    }

    pub fn node(&self) -> u32 {
        self.node
    }

    pub fn stats(&self) -> BufferStats {
        BufferStats {
            suppressed_puts: self.suppressed.load(Ordering::Relaxed),
            fast_paths: self.fast_paths.load(Ordering::Relaxed),
            exchanges: self.exchanges.load(Ordering::Relaxed),
            redistribute_micros: self.redistribute_micros.load(Ordering::Relaxed),
        }
    }

    /// Number of `(stage, iteration)` slots still held.
    pub fn held_slots(&self) -> usize {
        self.state.lock().unwrap().slots.len()
    }

    /// Stores the output of DP group `dp_rank` under layout `from`.
    /// Puts from tp ranks other than 0 are accepted and dropped.
    pub fn put(
        &self,
        stage: StageRef<'_>,
        iteration: u32,
        from: ParallelLayout,
        dp_rank: u32,
        tp_rank: u32,
        batch: SampleBatch,
    ) -> Result<(), DataError> {
        if tp_rank != 0 {
            self.suppressed.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        }
        if !self.topology.local_groups(self.node, from).contains(&dp_rank) {
            return Err(DataError::NotLocal { dp_rank, node: self.node });
        }
        let mut st = self.state.lock().unwrap();
        if iteration < st.current {
            return Err(DataError::StaleIteration { iteration, current: st.current });
        }
        st.current = iteration;
        let slot = st.slots.entry((stage.id.to_string(), iteration)).or_insert_with(|| Slot {
            index: stage.index,
            from,
            puts: BTreeMap::new(),
            phase: Phase::Collecting,
            gets: 0,
        });
        if slot.from != from {
            return Err(DataError::Layout(format!("stage {} put with {from:?}, slot has {:?}", stage.id, slot.from)));
        }
        if slot.puts.contains_key(&dp_rank) {
            return Err(DataError::DuplicatePut { stage: stage.id.to_string(), dp_rank });
        }
        slot.puts.insert(dp_rank, batch.records);
        self.changed.notify_all();
        Ok(())
    }

    /// Non-blocking read: `UnknownStage` if nothing was put, `NotReady` until
    /// redistribution has completed.
    pub fn try_get(&self, stage_id: &str, iteration: u32, dest_dp_rank: u32, to: ParallelLayout) -> Result<SampleBatch, DataError> {
        let mut st = self.state.lock().unwrap();
        let key = (stage_id.to_string(), iteration);
        let slot = st.slots.get(&key).ok_or_else(|| DataError::UnknownStage { stage: stage_id.to_string(), iteration })?;
        match &slot.phase {
            Phase::Ready(_) => self.take_slice(&mut st, key, dest_dp_rank, to),
            Phase::Failed(e) => Err(e.clone()),
            _ => Err(DataError::NotReady { stage: stage_id.to_string(), iteration }),
        }
    }

    /// Blocking read of the slice for `dest_dp_rank` under layout `to`.
    pub fn get(&self, stage_id: &str, iteration: u32, dest_dp_rank: u32, to: ParallelLayout) -> Result<SampleBatch, DataError> {
        if !self.topology.local_groups(self.node, to).contains(&dest_dp_rank) {
            return Err(DataError::NotLocal { dp_rank: dest_dp_rank, node: self.node });
        }
        let key = (stage_id.to_string(), iteration);
        let deadline = Instant::now() + self.endpoint.fabric().options().recv_timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            let mut run = None;
            if let Some(slot) = st.slots.get_mut(&key) {
                let expected_puts = self.topology.local_groups(self.node, slot.from).len();
                match &slot.phase {
                    Phase::Ready(_) => return self.take_slice(&mut st, key, dest_dp_rank, to),
                    Phase::Failed(e) => return Err(e.clone()),
                    Phase::Collecting if slot.puts.len() == expected_puts => {
                        slot.phase = Phase::Redistributing;
                        let records: Vec<SampleRecord> =
                            std::mem::take(&mut slot.puts).into_values().flatten().collect();
                        run = Some((slot.index, slot.from, records));
                    }
                    _ => {}
                }
            }
            if let Some((index, from, records)) = run {
                drop(st);
                let started = Instant::now();
                let result = self.redistribute(index, iteration, from, to, records);
                self.redistribute_micros.fetch_add(started.elapsed().as_micros() as u64, Ordering::Relaxed);
                st = self.state.lock().unwrap();
                let slot = st.slots.get_mut(&key).expect("slot held during redistribution");
                slot.phase = match result {
                    Ok(held) => Phase::Ready(held),
                    Err(e) => Phase::Failed(e),
                };
                self.changed.notify_all();
                continue;
            }
            self.endpoint.fabric().check_aborted()?;
            let now = Instant::now();
            if now >= deadline {
                return Err(DataError::Timeout(format!("stage {stage_id} iteration {iteration} on node {}", self.node)));
            }
            st = self.changed.wait_timeout(st, (deadline - now).min(POLL)).unwrap().0;
        }
    }

    fn take_slice(
        &self,
        st: &mut State,
        key: (String, u32),
        dest_dp_rank: u32,
        to: ParallelLayout,
    ) -> Result<SampleBatch, DataError> {
        let groups = self.topology.local_groups(self.node, to);
        let slot = st.slots.get_mut(&key).expect("caller checked slot");
        let Phase::Ready(held) = &slot.phase else { unreachable!() };
        let per = held.len() / groups.len();
        let i = (dest_dp_rank - groups.start) as usize;
        let records = held[i * per..(i + 1) * per].to_vec();
        slot.gets += 1;
        if slot.gets == self.topology.workers_per_node() {
            st.slots.remove(&key);
        }
        Ok(SampleBatch::new(key.0, key.1, records))
    }

    /// Moves this store's records so that every store ends with `G/B` records
    /// and each local group's share sits on its own node.
    fn redistribute(
        &self,
        index: u32,
        iteration: u32,
        from: ParallelLayout,
        to: ParallelLayout,
        records: Vec<SampleRecord>,
    ) -> Result<Vec<SampleRecord>, DataError> {
        let b = self.topology.nodes() as u64;
        let held = records.len() as u64;
        let global = held * b;
        if !global.is_multiple_of(to.dp as u64) {
            return Err(DataError::Indivisible { what: "global batch", n: global, d: to.dp as u64 });
        }
        if from.dp == to.dp {
            self.fast_paths.fetch_add(1, Ordering::Relaxed);
            return Ok(records);
        }
        if !held.is_multiple_of(b) {
            return Err(DataError::Indivisible { what: "per-store record count", n: held, d: b });
        }
        let part = (held / b) as usize;
        let stores: Vec<EndpointId> = (0..self.topology.nodes()).map(|n| self.topology.store_endpoint(n)).collect();
        let outgoing: Vec<Vec<u8>> = records.chunks(part.max(1)).map(encode_records).collect();
        let outgoing = if part == 0 { vec![encode_records(&[]); stores.len()] } else { outgoing };
        debug!("store {} exchanging {held} records for stage {index} iteration {iteration}", self.node);
        let received = all_to_all(&self.endpoint, &stores, outgoing, tags::make(tags::REDISTRIBUTE, index), iteration)?;
        self.exchanges.fetch_add(1, Ordering::Relaxed);
        let mut out = Vec::with_capacity(records.len());
        for bytes in received {
            out.extend(decode_records(&bytes)?);
        }
        Ok(out)
    }
}
