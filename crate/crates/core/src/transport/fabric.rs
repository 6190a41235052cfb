use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufReader, BufWriter, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::traffic::{CounterKey, LedgerSnapshot, TrafficLedger};
use super::wire::{self, FrameHeader, HEADER_LEN, TAG_HANDSHAKE};
use super::{tags, Backend, Envelope, TransportError};
use crate::topology::{ClusterTopology, EndpointId};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone)]
pub struct FabricOptions {
    /// Largest payload carried by a single frame; bigger messages are chunked.
    pub max_frame: usize,
    pub recv_timeout: Duration,
    pub handshake_timeout: Duration,
    /// Host a controller endpoint on its own node.
    pub dedicated_controller: bool,
}

impl Default for FabricOptions {
    fn default() -> Self {
        Self {
            max_frame: wire::DEFAULT_MAX_FRAME,
            recv_timeout: Duration::from_secs(120),
            handshake_timeout: Duration::from_secs(10),
            dedicated_controller: false,
        }
    }
}

/// Which hub (process or in-process fabric instance) hosts each node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HubLayout {
    /// Indexed by node; the last slot is the dedicated-controller node.
    hub_of_node: Vec<Option<usize>>,
    hubs: usize,
}

impl HubLayout {
    /// Everything in one hub.
    pub fn single(topology: &ClusterTopology, dedicated_controller: bool) -> Self {
        let mut hub_of_node = vec![Some(0); topology.nodes() as usize];
        hub_of_node.push(dedicated_controller.then_some(0));
        Self { hub_of_node, hubs: 1 }
    }

    /// One hub per node, plus one for a dedicated controller.
    pub fn per_node(topology: &ClusterTopology, dedicated_controller: bool) -> Self {
        let n = topology.nodes() as usize;
        let mut hub_of_node: Vec<Option<usize>> = (0..n).map(Some).collect();
        hub_of_node.push(dedicated_controller.then_some(n));
        Self { hub_of_node, hubs: n + dedicated_controller as usize }
    }

    pub fn hub_count(&self) -> usize {
        self.hubs
    }

    pub fn hub_of_node(&self, node: u32) -> Option<usize> {
        self.hub_of_node.get(node as usize).copied().flatten()
    }

    pub fn hub_of_endpoint(&self, topology: &ClusterTopology, ep: EndpointId) -> Option<usize> {
        if ep >= topology.endpoint_count() {
            return None;
        }
        self.hub_of_node(topology.endpoint_node(ep))
    }

    pub fn nodes_of_hub(&self, hub: usize) -> Vec<u32> {
        (0..self.hub_of_node.len() as u32).filter(|&n| self.hub_of_node(n) == Some(hub)).collect()
    }

    /// Endpoints hosted by `hub`, ascending.
    pub fn endpoints_of_hub(&self, topology: &ClusterTopology, hub: usize) -> Vec<EndpointId> {
        (0..topology.endpoint_count())
            .filter(|&ep| self.hub_of_endpoint(topology, ep) == Some(hub))
            .collect()
    }

    /// Identity a hub announces in its handshake: its lowest endpoint id.
    pub fn leader(&self, topology: &ClusterTopology, hub: usize) -> EndpointId {
        self.endpoints_of_hub(topology, hub)[0]
    }
}

struct Mailbox {
    queue: Mutex<VecDeque<Envelope>>,
    ready: Condvar,
}

impl Mailbox {
    fn new() -> Self {
        Self { queue: Mutex::new(VecDeque::new()), ready: Condvar::new() }
    }

    fn push(&self, env: Envelope) {
        self.queue.lock().unwrap().push_back(env);
        self.ready.notify_all();
    }
}

struct Core {
    topology: ClusterTopology,
    hubs: HubLayout,
    hub: usize,
    opts: FabricOptions,
    mailboxes: HashMap<EndpointId, Mailbox>,
    ledger: TrafficLedger,
    aborted: AtomicBool,
    abort_reason: Mutex<Option<String>>,
    closed_hubs: Mutex<HashSet<usize>>,
    closing: AtomicBool,
}

impl Core {
    fn deliver(&self, env: Envelope) -> Result<(), TransportError> {
        let mb = self.mailboxes.get(&env.dst).ok_or(TransportError::UnknownEndpoint(env.dst))?;
        mb.push(env);
        Ok(())
    }

    fn abort(&self, reason: &str) {
        {
            let mut r = self.abort_reason.lock().unwrap();
            if r.is_none() {
                *r = Some(reason.to_string());
            }
        }
        self.aborted.store(true, Ordering::SeqCst);
        self.wake_all();
    }

    fn abort_error(&self) -> TransportError {
        TransportError::Aborted(self.abort_reason.lock().unwrap().clone().unwrap_or_default())
    }

    fn mark_closed(&self, hub: usize) {
        self.closed_hubs.lock().unwrap().insert(hub);
        self.wake_all();
    }

    fn wake_all(&self) {
        for mb in self.mailboxes.values() {
            mb.ready.notify_all();
        }
    }
}

struct Link {
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
}

/// One hub of the message fabric: the set of endpoints living in this
/// process (all of them for the in-process backend, one node's worth for TCP).
pub struct Fabric {
    core: Arc<Core>,
    backend: Backend,
    links: HashMap<usize, Link>,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Fabric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fabric")
            .field("backend", &self.backend)
            .field("hub", &self.core.hub)
            .field("endpoints", &self.core.mailboxes.len())
            .finish()
    }
}

impl Fabric {
    fn build(topology: ClusterTopology, hubs: HubLayout, hub: usize, opts: FabricOptions) -> Core {
        let mailboxes = hubs
            .endpoints_of_hub(&topology, hub)
            .into_iter()
            .map(|ep| (ep, Mailbox::new()))
            .collect();
        Core {
            topology,
            hubs,
            hub,
            opts,
            mailboxes,
            ledger: TrafficLedger::new(),
            aborted: AtomicBool::new(false),
            abort_reason: Mutex::new(None),
            closed_hubs: Mutex::new(HashSet::new()),
            closing: AtomicBool::new(false),
        }
    }

    /// All endpoints in one process.
    pub fn inproc(topology: ClusterTopology, opts: FabricOptions) -> Arc<Fabric> {
        let hubs = HubLayout::single(&topology, opts.dedicated_controller);
        let core = Self::build(topology, hubs, 0, opts);
        debug!("inproc fabric hosts {} endpoints", core.mailboxes.len());
        Arc::new(Fabric { core: Arc::new(core), backend: Backend::Inproc, links: HashMap::new(), readers: Mutex::new(Vec::new()) })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.core.topology
    }

    pub fn hub_layout(&self) -> &HubLayout {
        &self.core.hubs
    }

    pub fn hub_index(&self) -> usize {
        self.core.hub
    }

    pub fn options(&self) -> &FabricOptions {
        &self.core.opts
    }

    pub fn hosts(&self, ep: EndpointId) -> bool {
        self.core.mailboxes.contains_key(&ep)
    }

    pub fn endpoint(self: &Arc<Self>, id: EndpointId) -> Result<Endpoint, TransportError> {
        if !self.hosts(id) {
            return Err(TransportError::UnknownEndpoint(id));
        }
        Ok(Endpoint { fabric: Arc::clone(self), id })
    }

    pub fn ledger_snapshot(&self) -> LedgerSnapshot {
        self.core.ledger.snapshot()
    }

    pub fn is_aborted(&self) -> bool {
        self.core.aborted.load(Ordering::SeqCst)
    }

    pub fn check_aborted(&self) -> Result<(), TransportError> {
        if self.is_aborted() {
            Err(self.core.abort_error())
        } else {
            Ok(())
        }
    }

    /// Fails every pending and future receive on this hub and tells peer hubs.
    pub fn abort(&self, reason: &str) {
        if self.is_aborted() {
            return;
        }
        self.core.abort(reason);
        let tag = tags::make(tags::ABORT, 0);
        for link in self.links.values() {
            let mut w = link.writer.lock().unwrap();
            let _ = wire::write_message(&mut *w, 0, 0, tag, 0, reason.as_bytes(), self.core.opts.max_frame);
        }
    }

    pub fn send(&self, env: Envelope) -> Result<(), TransportError> {
        self.check_aborted()?;
        let core = &self.core;
        if !self.hosts(env.src) {
            return Err(TransportError::UnknownEndpoint(env.src));
        }
        let dst_hub = core
            .hubs
            .hub_of_endpoint(&core.topology, env.dst)
            .ok_or(TransportError::UnknownEndpoint(env.dst))?;
        wire::chunk_count(env.payload.len(), core.opts.max_frame)?;
        if env.src == env.dst {
            return core.deliver(env);
        }
        let bytes = wire::framed_len(env.payload.len(), core.opts.max_frame);
        let key = CounterKey { iteration: env.iteration, class: tags::class(env.tag), tag: env.tag, src: env.src, dst: env.dst };
        if dst_hub == core.hub {
            core.ledger.record_egress(key, bytes);
            core.ledger.record_ingress(key, bytes);
            return core.deliver(env);
        }
        let link = self.links.get(&dst_hub).ok_or(TransportError::PeerClosed(env.dst))?;
        if core.closed_hubs.lock().unwrap().contains(&dst_hub) {
            return Err(TransportError::PeerClosed(env.dst));
        }
        let mut w = link.writer.lock().unwrap();
        wire::write_message(&mut *w, env.src, env.dst, env.tag, env.iteration, &env.payload, core.opts.max_frame)
            .map_err(|_| TransportError::PeerClosed(env.dst))?;
        core.ledger.record_egress(key, bytes);
        Ok(())
    }

    /// Blocks until an envelope for `me` matching `(src, tag, iteration)` arrives.
    /// `src = None` accepts any sender.
    pub fn recv(
        &self,
        me: EndpointId,
        src: Option<EndpointId>,
        tag: u32,
        iteration: u32,
        timeout: Option<Duration>,
    ) -> Result<Envelope, TransportError> {
        let core = &self.core;
        let mb = core.mailboxes.get(&me).ok_or(TransportError::UnknownEndpoint(me))?;
        let timeout = timeout.unwrap_or(core.opts.recv_timeout);
        let deadline = Instant::now() + timeout;
        let src_hub = src.and_then(|s| core.hubs.hub_of_endpoint(&core.topology, s));
        let mut queue = mb.queue.lock().unwrap();
        loop {
            if let Some(pos) = queue
                .iter()
                .position(|e| e.tag == tag && e.iteration == iteration && src.is_none_or(|s| e.src == s))
            {
                return Ok(queue.remove(pos).unwrap());
            }
            if self.is_aborted() {
                return Err(core.abort_error());
            }
            if let Some(h) = src_hub {
                if h != core.hub && core.closed_hubs.lock().unwrap().contains(&h) {
                    return Err(TransportError::PeerClosed(src.unwrap()));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout { me, src, tag, iteration });
            }
            queue = mb.ready.wait_timeout(queue, (deadline - now).min(POLL)).unwrap().0;
        }
    }

    /// Closes TCP links and joins reader threads. Idempotent.
    pub fn close(&self) {
        self.core.closing.store(true, Ordering::SeqCst);
        for link in self.links.values() {
            let _ = link.stream.shutdown(Shutdown::Both);
        }
        let handles: Vec<_> = self.readers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for Fabric {
    fn drop(&mut self) {
        self.close();
    }
}

/// Handle bound to one endpoint of a fabric hub.
#[derive(Clone, Debug)]
pub struct Endpoint {
    fabric: Arc<Fabric>,
    id: EndpointId,
}

impl Endpoint {
    pub fn id(&self) -> EndpointId {
        self.id
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    pub fn send(&self, dst: EndpointId, tag: u32, iteration: u32, payload: Vec<u8>) -> Result<(), TransportError> {
        self.fabric.send(Envelope { src: self.id, dst, tag, iteration, payload })
    }

    pub fn recv_from(&self, src: EndpointId, tag: u32, iteration: u32) -> Result<Envelope, TransportError> {
        self.fabric.recv(self.id, Some(src), tag, iteration, None)
    }

    pub fn recv_any(&self, tag: u32, iteration: u32) -> Result<Envelope, TransportError> {
        self.fabric.recv(self.id, None, tag, iteration, None)
    }

    pub fn recv_timeout(
        &self,
        src: Option<EndpointId>,
        tag: u32,
        iteration: u32,
        timeout: Duration,
    ) -> Result<Envelope, TransportError> {
        self.fabric.recv(self.id, src, tag, iteration, Some(timeout))
    }
}

/// A bound but not yet connected TCP hub.
pub struct TcpBinding {
    listener: TcpListener,
    pub addr: SocketAddr,
}

pub fn bind_tcp(addr: &str) -> Result<TcpBinding, TransportError> {
    let listener = TcpListener::bind(addr).map_err(|e| TransportError::Bind(format!("{addr}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| TransportError::Bind(e.to_string()))?;
    Ok(TcpBinding { listener, addr })
}

fn read_handshake(stream: &mut TcpStream, timeout: Duration) -> Result<(u32, u32), TransportError> {
    stream.set_read_timeout(Some(timeout))?;
    let frame = wire::read_frame(stream, 64).map_err(|e| match e {
        TransportError::Io(msg) if msg == super::IO_TIMED_OUT => TransportError::HandshakeTimeout,
        TransportError::Io(msg) => TransportError::Handshake(msg),
        other => other,
    })?;
    let (header, payload) = frame.ok_or_else(|| TransportError::Handshake("peer closed during handshake".into()))?;
    if header.tag != TAG_HANDSHAKE {
        return Err(TransportError::Handshake(format!("expected handshake frame, got tag {:#x}", header.tag)));
    }
    wire::parse_handshake(&payload)
}

fn write_handshake(stream: &mut TcpStream, me: u32, peer: u32, world: u32) -> Result<(), TransportError> {
    let payload = wire::handshake_payload(me, world);
    wire::write_message(stream, me, peer, TAG_HANDSHAKE, 0, &payload, 64)?;
    Ok(())
}

/// Connects hub `hub` to every other hub. Lower-indexed hubs accept,
/// higher-indexed hubs dial; each link starts with a handshake exchanging
/// `(leader rank, world_size)`.
pub fn connect_tcp(
    binding: TcpBinding,
    topology: ClusterTopology,
    hubs: HubLayout,
    hub: usize,
    peers: &[SocketAddr],
    opts: FabricOptions,
) -> Result<Arc<Fabric>, TransportError> {
    let world = topology.world_size();
    let n_hubs = hubs.hub_count();
    if peers.len() != n_hubs {
        return Err(TransportError::Handshake(format!("expected {n_hubs} peer addresses, got {}", peers.len())));
    }
    let leaders: Vec<EndpointId> = (0..n_hubs).map(|h| hubs.leader(&topology, h)).collect();
    let me = leaders[hub];
    let hs_timeout = opts.handshake_timeout;

    let listener = binding.listener;
    let accept_leaders = leaders.clone();
    let acceptor = thread::spawn(move || -> Result<Vec<(usize, TcpStream)>, TransportError> {
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + hs_timeout;
        let mut got = Vec::new();
        while got.len() < hub {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let (rank, peer_world) = read_handshake(&mut stream, hs_timeout)?;
                    if peer_world != world {
                        return Err(TransportError::Handshake(format!(
                            "world size mismatch: local {world}, peer {peer_world}"
                        )));
                    }
                    let peer_hub = accept_leaders[..hub]
                        .iter()
                        .position(|&l| l == rank)
                        .ok_or_else(|| TransportError::Handshake(format!("unexpected peer rank {rank}")))?;
                    if got.iter().any(|(h, _)| *h == peer_hub) {
                        return Err(TransportError::Handshake(format!("duplicate connection from rank {rank}")));
                    }
                    write_handshake(&mut stream, me, rank, world)?;
                    got.push((peer_hub, stream));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::HandshakeTimeout);
                    }
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(got)
    });

    let mut streams: Vec<(usize, TcpStream)> = Vec::new();
    let mut dial_err = None;
    for (peer_hub, addr) in peers.iter().enumerate().skip(hub + 1) {
        let res = (|| {
            let mut stream = TcpStream::connect_timeout(addr, hs_timeout)?;
            write_handshake(&mut stream, me, leaders[peer_hub], world)?;
            let (rank, peer_world) = read_handshake(&mut stream, hs_timeout)?;
            if peer_world != world {
                return Err(TransportError::Handshake(format!("world size mismatch: local {world}, peer {peer_world}")));
            }
            if rank != leaders[peer_hub] {
                return Err(TransportError::Handshake(format!(
                    "expected rank {} at {addr}, peer reports {rank}",
                    leaders[peer_hub]
                )));
            }
            Ok(stream)
        })();
        match res {
            Ok(s) => streams.push((peer_hub, s)),
            Err(e) => {
                dial_err = Some(e);
                break;
            }
        }
    }
    let accepted = acceptor.join().map_err(|_| TransportError::Handshake("acceptor panicked".into()))?;
    if let Some(e) = dial_err {
        return Err(e);
    }
    streams.extend(accepted?);

    let core = Arc::new(Fabric::build(topology, hubs, hub, opts));
    let mut links = HashMap::new();
    let mut readers = Vec::new();
    for (peer_hub, stream) in streams {
        stream.set_read_timeout(None)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let writer = BufWriter::with_capacity(1 << 16, stream.try_clone()?);
        links.insert(peer_hub, Link { writer: Mutex::new(writer), stream });
        let core = Arc::clone(&core);
        readers.push(
            thread::Builder::new()
                .name(format!("fabric-rx-{hub}-{peer_hub}"))
                .spawn(move || reader_loop(core, peer_hub, reader))?,
        );
    }
    Ok(Arc::new(Fabric { core, backend: Backend::Tcp, links, readers: Mutex::new(readers) }))
}

fn reader_loop(core: Arc<Core>, peer_hub: usize, stream: TcpStream) {
    let mut r = BufReader::with_capacity(1 << 18, stream);
    let max_frame = core.opts.max_frame;
    let mut pending: HashMap<(u32, u32, u32, u32), Vec<u8>> = HashMap::new();
    loop {
        match wire::read_frame(&mut r, max_frame) {
            Ok(Some((h, payload))) => {
                if tags::kind(h.tag) == tags::ABORT && h.tag != TAG_HANDSHAKE {
                    core.abort(&format!("peer hub {peer_hub}: {}", String::from_utf8_lossy(&payload)));
                    continue;
                }
                let key = CounterKey { iteration: h.iteration, class: tags::class(h.tag), tag: h.tag, src: h.src, dst: h.dst };
                core.ledger.record_ingress(key, (HEADER_LEN + payload.len()) as u64);
                if let Some(env) = reassemble(&mut pending, h, payload) {
                    if let Err(e) = core.deliver(env) {
                        warn!("dropping frame from hub {peer_hub}: {e}");
                    }
                }
            }
            Ok(None) | Err(_) => {
                if !core.closing.load(Ordering::SeqCst) {
                    debug!("hub {} lost link to hub {peer_hub}", core.hub);
                }
                core.mark_closed(peer_hub);
                return;
            }
        }
    }
}

fn reassemble(
    pending: &mut HashMap<(u32, u32, u32, u32), Vec<u8>>,
    h: FrameHeader,
    payload: Vec<u8>,
) -> Option<Envelope> {
    let envelope = |payload| Envelope { src: h.src, dst: h.dst, tag: h.tag, iteration: h.iteration, payload };
    if h.chunk_count == 1 {
        return Some(envelope(payload));
    }
    let key = (h.src, h.dst, h.tag, h.iteration);
    let buf = pending.entry(key).or_default();
    buf.extend_from_slice(&payload);
    if h.chunk_index + 1 == h.chunk_count {
        let full = pending.remove(&key).unwrap();
        Some(envelope(full))
    } else {
        None
    }
}

/// Builds every hub of a fabric inside this process.
pub fn create_fabric(
    topology: ClusterTopology,
    backend: Backend,
    opts: FabricOptions,
) -> Result<Vec<Arc<Fabric>>, TransportError> {
    match backend {
        Backend::Inproc => Ok(vec![Fabric::inproc(topology, opts)]),
        Backend::Tcp => {
            let hubs = HubLayout::per_node(&topology, opts.dedicated_controller);
            let bindings: Vec<TcpBinding> =
                (0..hubs.hub_count()).map(|_| bind_tcp("127.0.0.1:0")).collect::<Result<_, _>>()?;
            let addrs: Vec<SocketAddr> = bindings.iter().map(|b| b.addr).collect();
            let handles: Vec<_> = bindings
                .into_iter()
                .enumerate()
                .map(|(i, b)| {
                    let (hubs, addrs, opts) = (hubs.clone(), addrs.clone(), opts.clone());
                    thread::spawn(move || connect_tcp(b, topology, hubs, i, &addrs, opts))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| TransportError::Handshake("connect thread panicked".into()))?)
                .collect()
        }
    }
}
