//! Byte accounting per iteration, traffic class and endpoint pair.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::topology::{ClusterTopology, EndpointId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficClass {
    /// Samples moving between stages or out of the loader.
    Data,
    /// Metrics, barriers and run bookkeeping.
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CounterKey {
    pub iteration: u32,
    pub class: TrafficClass,
    pub tag: u32,
    pub src: EndpointId,
    pub dst: EndpointId,
}

#[derive(Debug, Default)]
struct Counters {
    egress: BTreeMap<CounterKey, u64>,
    ingress: BTreeMap<CounterKey, u64>,
}

/// Concurrent counter sink owned by one fabric hub.
///
/// Egress is charged where a message is sent and ingress where it is
/// delivered, so ledgers from separate hubs can simply be summed.
#[derive(Debug, Default)]
pub struct TrafficLedger {
    inner: Mutex<Counters>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_egress(&self, key: CounterKey, bytes: u64) {
        *self.inner.lock().unwrap().egress.entry(key).or_insert(0) += bytes;
    }

    pub fn record_ingress(&self, key: CounterKey, bytes: u64) {
        *self.inner.lock().unwrap().ingress.entry(key).or_insert(0) += bytes;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let c = self.inner.lock().unwrap();
        LedgerSnapshot {
            egress: c.egress.iter().map(|(k, v)| (*k, *v)).collect(),
            ingress: c.ingress.iter().map(|(k, v)| (*k, *v)).collect(),
        }
    }
}

/// Serializable copy of a ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub egress: Vec<(CounterKey, u64)>,
    pub ingress: Vec<(CounterKey, u64)>,
}

impl LedgerSnapshot {
    pub fn merge(snapshots: impl IntoIterator<Item = LedgerSnapshot>) -> LedgerSnapshot {
        let mut egress: BTreeMap<CounterKey, u64> = BTreeMap::new();
        let mut ingress: BTreeMap<CounterKey, u64> = BTreeMap::new();
        for s in snapshots {
            for (k, v) in s.egress {
                *egress.entry(k).or_insert(0) += v;
            }
            for (k, v) in s.ingress {
                *ingress.entry(k).or_insert(0) += v;
            }
        }
        LedgerSnapshot { egress: egress.into_iter().collect(), ingress: ingress.into_iter().collect() }
    }

    /// Report over entries accepted by `filter`.
    pub fn report(&self, topology: &ClusterTopology, filter: impl Fn(&CounterKey) -> bool) -> TrafficReport {
        let mut r = TrafficReport::empty(topology);
        for (k, v) in self.egress.iter().filter(|(k, _)| filter(k)) {
            let (sn, dn) = (topology.endpoint_node(k.src), topology.endpoint_node(k.dst));
            *r.pair_bytes.entry((sn, dn)).or_insert(0) += v;
            r.node_egress[sn as usize] += v;
            *r.endpoint_egress.entry(k.src).or_insert(0) += v;
        }
        for (k, v) in self.ingress.iter().filter(|(k, _)| filter(k)) {
            let dn = topology.endpoint_node(k.dst);
            r.node_ingress[dn as usize] += v;
            *r.endpoint_ingress.entry(k.dst).or_insert(0) += v;
        }
        r
    }

    pub fn data_report(&self, topology: &ClusterTopology, iteration: u32) -> TrafficReport {
        self.report(topology, |k| k.class == TrafficClass::Data && k.iteration == iteration)
    }

    pub fn total_report(&self, topology: &ClusterTopology) -> TrafficReport {
        self.report(topology, |_| true)
    }
}

/// Per node-pair, node and endpoint byte totals.
///
/// Node index `topology.nodes()` stands for a dedicated controller node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficReport {
    pub pair_bytes: BTreeMap<(u32, u32), u64>,
    pub node_ingress: Vec<u64>,
    pub node_egress: Vec<u64>,
    pub endpoint_ingress: BTreeMap<EndpointId, u64>,
    pub endpoint_egress: BTreeMap<EndpointId, u64>,
}

impl TrafficReport {
    fn empty(topology: &ClusterTopology) -> Self {
        let n = topology.nodes() as usize + 1;
        Self {
            pair_bytes: BTreeMap::new(),
            node_ingress: vec![0; n],
            node_egress: vec![0; n],
            endpoint_ingress: BTreeMap::new(),
            endpoint_egress: BTreeMap::new(),
        }
    }

    pub fn total_egress(&self) -> u64 {
        self.node_egress.iter().sum()
    }

    pub fn total_ingress(&self) -> u64 {
        self.node_ingress.iter().sum()
    }

    pub fn max_node_ingress(&self) -> u64 {
        self.node_ingress.iter().copied().max().unwrap_or(0)
    }

    pub fn max_node_egress(&self) -> u64 {
        self.node_egress.iter().copied().max().unwrap_or(0)
    }

    /// Bytes that crossed a node boundary.
    pub fn internode_bytes(&self) -> u64 {
        self.pair_bytes.iter().filter(|((s, d), _)| s != d).map(|(_, v)| v).sum()
    }

    /// Largest per-node inter-node ingress + egress.
    pub fn max_node_internode(&self) -> u64 {
        let n = self.node_ingress.len();
        let mut per_node = vec![0u64; n];
        for (&(s, d), &v) in &self.pair_bytes {
            if s != d {
                per_node[s as usize] += v;
                per_node[d as usize] += v;
            }
        }
        per_node.into_iter().max().unwrap_or(0)
    }

    pub fn endpoint_ingress(&self, ep: EndpointId) -> u64 {
        self.endpoint_ingress.get(&ep).copied().unwrap_or(0)
    }

    pub fn endpoint_egress(&self, ep: EndpointId) -> u64 {
        self.endpoint_egress.get(&ep).copied().unwrap_or(0)
    }

    /// Ingress + egress of a node, intra-node transfers included.
    pub fn node_total(&self, node: u32) -> u64 {
        self.node_ingress[node as usize] + self.node_egress[node as usize]
    }
}
