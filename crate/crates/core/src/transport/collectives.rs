use super::fabric::Endpoint;
use super::{tags, TransportError};
use crate::topology::EndpointId;

fn position(participants: &[EndpointId], me: EndpointId) -> Result<usize, TransportError> {
    participants
        .iter()
        .position(|&p| p == me)
        .ok_or_else(|| TransportError::Collective(format!("endpoint {me} is not a participant")))
}

/// Personalized exchange: `outgoing[j]` goes to `participants[j]`; the result
/// holds one payload per source, in participant order. The self-payload never
/// touches the fabric.
pub fn all_to_all(
    ep: &Endpoint,
    participants: &[EndpointId],
    mut outgoing: Vec<Vec<u8>>,
    tag: u32,
    iteration: u32,
) -> Result<Vec<Vec<u8>>, TransportError> {
    let me = position(participants, ep.id())?;
    if outgoing.len() != participants.len() {
        return Err(TransportError::Collective(format!(
            "{} payloads for {} participants",
            outgoing.len(),
            participants.len()
        )));
    }
    let own = std::mem::take(&mut outgoing[me]);
    for (j, payload) in outgoing.into_iter().enumerate() {
        if j != me {
            ep.send(participants[j], tag, iteration, payload)?;
        }
    }
    let mut own = Some(own);
    participants
        .iter()
        .enumerate()
        .map(|(i, &src)| {
            if i == me {
                Ok(own.take().unwrap())
            } else {
                ep.recv_from(src, tag, iteration).map(|e| e.payload)
            }
        })
        .collect()
}

/// All-to-one. The root gets every payload in participant order; others get `None`.
pub fn gather_to(
    ep: &Endpoint,
    participants: &[EndpointId],
    root: EndpointId,
    payload: Vec<u8>,
    tag: u32,
    iteration: u32,
) -> Result<Option<Vec<Vec<u8>>>, TransportError> {
    position(participants, ep.id())?;
    position(participants, root)?;
    if ep.id() != root {
        ep.send(root, tag, iteration, payload)?;
        return Ok(None);
    }
    let mut own = Some(payload);
    participants
        .iter()
        .map(|&src| {
            if src == root {
                Ok(own.take().unwrap())
            } else {
                ep.recv_from(src, tag, iteration).map(|e| e.payload)
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// One-to-all. `parts` is required at the root (one per participant) and ignored elsewhere.
pub fn scatter_from(
    ep: &Endpoint,
    participants: &[EndpointId],
    root: EndpointId,
    parts: Option<Vec<Vec<u8>>>,
    tag: u32,
    iteration: u32,
) -> Result<Vec<u8>, TransportError> {
    let me = position(participants, ep.id())?;
    position(participants, root)?;
    if ep.id() != root {
        return ep.recv_from(root, tag, iteration).map(|e| e.payload);
    }
    let mut parts = parts.ok_or_else(|| TransportError::Collective("root must supply parts".into()))?;
    if parts.len() != participants.len() {
        return Err(TransportError::Collective(format!(
            "{} parts for {} participants",
            parts.len(),
            participants.len()
        )));
    }
    let own = std::mem::take(&mut parts[me]);
    for (j, part) in parts.into_iter().enumerate() {
        if j != me {
            ep.send(participants[j], tag, iteration, part)?;
        }
    }
    Ok(own)
}

/// Gather-then-release barrier through `root`.
pub fn barrier(ep: &Endpoint, participants: &[EndpointId], root: EndpointId, index: u32, iteration: u32) -> Result<(), TransportError> {
    gather_to(ep, participants, root, Vec::new(), tags::make(tags::BARRIER, index), iteration)?;
    let parts = (ep.id() == root).then(|| vec![Vec::new(); participants.len()]);
    scatter_from(ep, participants, root, parts, tags::make(tags::RELEASE, index), iteration)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::ClusterTopology;
    use crate::transport::{create_fabric, Backend, Fabric, FabricOptions, LedgerSnapshot};
    use std::sync::Arc;
    use std::thread;

    fn endpoints(hubs: &[Arc<Fabric>], ids: &[EndpointId]) -> Vec<Endpoint> {
        ids.iter()
            .map(|&id| hubs.iter().find(|f| f.hosts(id)).unwrap().endpoint(id).unwrap())
            .collect()
    }

    fn run_all<T: Send + 'static>(eps: Vec<Endpoint>, f: impl Fn(usize, Endpoint) -> T + Send + Sync + 'static) -> Vec<T> {
        let f = Arc::new(f);
        let handles: Vec<_> = eps
            .into_iter()
            .enumerate()
            .map(|(i, ep)| {
                let f = Arc::clone(&f);
                thread::spawn(move || f(i, ep))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    #[test]
    fn single_participant_identity() {
        let topo = ClusterTopology::new(1, 1).unwrap();
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let ep = hubs[0].endpoint(0).unwrap();
        let out = all_to_all(&ep, &[0], vec![vec![7, 7]], 1, 0).unwrap();
        assert_eq!(out, vec![vec![7, 7]]);
        assert_eq!(gather_to(&ep, &[0], 0, vec![1], 2, 0).unwrap(), Some(vec![vec![1]]));
        assert_eq!(hubs[0].ledger_snapshot().total_report(&topo).total_egress(), 0);
    }

    #[test]
    fn four_way_exchange_enumeration() {
        for backend in [Backend::Inproc, Backend::Tcp] {
            let topo = ClusterTopology::new(2, 2).unwrap();
            let hubs = create_fabric(topo, backend, FabricOptions::default()).unwrap();
            let parts: Vec<EndpointId> = vec![0, 1, 2, 3];
            let results = run_all(endpoints(&hubs, &parts), move |i, ep| {
                let outgoing = (0..4).map(|j| vec![(10 * i + j) as u8]).collect();
                all_to_all(&ep, &[0, 1, 2, 3], outgoing, 3, 0).unwrap()
            });
            for (j, held) in results.iter().enumerate() {
                let flat: Vec<u8> = held.iter().map(|p| p[0]).collect();
                let expected: Vec<u8> = (0..4).map(|i| (10 * i + j) as u8).collect();
                assert_eq!(flat, expected, "{backend} participant {j}");
            }
        }
    }

    #[test]
    fn pairwise_kib_exchange_counters() {
        let topo = ClusterTopology::new(2, 1).unwrap();
        let hubs = create_fabric(topo, Backend::Tcp, FabricOptions::default()).unwrap();
        run_all(endpoints(&hubs, &[0, 1]), |i, ep| {
            let mut outgoing = vec![Vec::new(), Vec::new()];
            outgoing[1 - i] = vec![0u8; 1024];
            all_to_all(&ep, &[0, 1], outgoing, 1, 0).unwrap()
        });
        let r = LedgerSnapshot::merge(hubs.iter().map(|h| h.ledger_snapshot())).total_report(&topo);
        assert_eq!(r.node_egress[0], 1024 + 20);
        assert_eq!(r.node_egress[1], 1024 + 20);
    }

    #[test]
    fn gather_root_ingress() {
        let topo = ClusterTopology::new(1, 8).unwrap();
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let ids: Vec<EndpointId> = (0..8).collect();
        let res = run_all(endpoints(&hubs, &ids), |i, ep| {
            let ids: Vec<EndpointId> = (0..8).collect();
            gather_to(&ep, &ids, 0, vec![i as u8; 1024], 4, 0).unwrap()
        });
        let at_root = res[0].as_ref().unwrap();
        assert_eq!(at_root.len(), 8);
        assert!(at_root.iter().enumerate().all(|(i, p)| p[0] == i as u8));
        assert!(res[1..].iter().all(Option::is_none));
        let r = hubs[0].ledger_snapshot().total_report(&topo);
        assert_eq!(r.endpoint_ingress(0), 7 * 1024 + 7 * 20);
    }

    #[test]
    fn scatter_sizes() {
        let topo = ClusterTopology::new(1, 4).unwrap();
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let res = run_all(endpoints(&hubs, &[0, 1, 2, 3]), |i, ep| {
            let parts = (i == 0).then(|| (1..=4).map(|n| vec![0u8; n]).collect());
            scatter_from(&ep, &[0, 1, 2, 3], 0, parts, 5, 0).unwrap()
        });
        for (r, part) in res.iter().enumerate() {
            assert_eq!(part.len(), r + 1);
        }
    }

    #[test]
    fn barrier_releases_everyone() {
        let topo = ClusterTopology::new(1, 3).unwrap();
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let done = run_all(endpoints(&hubs, &[0, 1, 2]), |_, ep| barrier(&ep, &[0, 1, 2], 0, 0, 0).is_ok());
        assert!(done.into_iter().all(|d| d));
    }

    #[test]
    fn non_participant_rejected() {
        let topo = ClusterTopology::new(1, 2).unwrap();
        let hubs = create_fabric(topo, Backend::Inproc, FabricOptions::default()).unwrap();
        let ep = hubs[0].endpoint(1).unwrap();
        assert!(matches!(all_to_all(&ep, &[0], vec![vec![]], 1, 0), Err(TransportError::Collective(_))));
    }
}
