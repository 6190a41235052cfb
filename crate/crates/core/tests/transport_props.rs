use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;

use distflow::transport::{create_fabric, Endpoint, Fabric, FabricOptions, LedgerSnapshot};
use distflow::{Backend, ClusterTopology};
use proptest::prelude::*;

fn endpoint(hubs: &[Arc<Fabric>], id: u32) -> Endpoint {
    hubs.iter().find(|h| h.hosts(id)).unwrap().endpoint(id).unwrap()
}

/// (src, dst, tag, payload) in per-sender program order.
type Plan = Vec<(u32, u32, u32, Vec<u8>)>;

fn plan() -> impl Strategy<Value = Plan> {
    proptest::collection::vec((0u32..4, 0u32..4, 1u32..3, proptest::collection::vec(any::<u8>(), 0..300)), 1..40)
}

/// Every sender runs on its own thread, so sends from different sources
/// interleave freely. Receivers drain each (src, tag) stream in order.
fn deliver(backend: Backend, plan: &Plan) -> (BTreeMap<(u32, u32, u32), Vec<Vec<u8>>>, LedgerSnapshot) {
    let topo = ClusterTopology::new(2, 2).unwrap();
    let opts = FabricOptions { max_frame: 128, ..Default::default() };
    let hubs = create_fabric(topo, backend, opts).unwrap();
    let senders: Vec<_> = (0..4u32)
        .map(|src| {
            let ep = endpoint(&hubs, src);
            let mine: Plan = plan.iter().filter(|m| m.0 == src).cloned().collect();
            thread::spawn(move || {
                for (_, dst, tag, payload) in mine {
                    ep.send(dst, tag, 0, payload).unwrap();
                }
            })
        })
        .collect();
    let mut expected: BTreeMap<(u32, u32, u32), usize> = BTreeMap::new();
    for (s, d, t, _) in plan {
        *expected.entry((*s, *d, *t)).or_default() += 1;
    }
    let mut got = BTreeMap::new();
    for (&(s, d, t), &n) in &expected {
        let ep = endpoint(&hubs, d);
        let v: Vec<Vec<u8>> = (0..n).map(|_| ep.recv_from(s, t, 0).unwrap().payload).collect();
        got.insert((s, d, t), v);
    }
    for h in senders {
        h.join().unwrap();
    }
    let ledger = LedgerSnapshot::merge(hubs.iter().map(|h| h.ledger_snapshot()));
    for h in &hubs {
        h.close();
    }
    (got, ledger)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fifo_and_backend_equivalence(plan in plan()) {
        let mut want: BTreeMap<(u32, u32, u32), Vec<Vec<u8>>> = BTreeMap::new();
        for (s, d, t, p) in &plan {
            want.entry((*s, *d, *t)).or_default().push(p.clone());
        }
        let (inproc, l_in) = deliver(Backend::Inproc, &plan);
        let (tcp, l_tcp) = deliver(Backend::Tcp, &plan);
        prop_assert_eq!(&inproc, &want);
        prop_assert_eq!(&tcp, &want);
        let topo = ClusterTopology::new(2, 2).unwrap();
        prop_assert_eq!(l_in.total_report(&topo), l_tcp.total_report(&topo));
    }
}
