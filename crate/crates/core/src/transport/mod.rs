//! Tagged point-to-point transport.
//!
//! A [`Worker`] owns a matching engine and a set of endpoints. Messages up to
//! the eager threshold travel in a single frame. Larger ones use a
//! rendezvous: the sender announces the message with a ready-to-send frame
//! that sits in the receiver's unexpected queue (visible to
//! [`Worker::tag_probe`]); once a receive matches it, the receiver pulls the
//! payload. Matching behaves identically on both sides of the threshold.
//!
//! All completions fire from [`Worker::progress`] on the owning thread.

pub mod activity;
pub mod frame;
pub mod inbox;
pub mod loopback;
pub mod matching;
pub mod tcp;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::config::Config;
use crate::tag::{MessageKind, Tag, TagLayout, KIND_MASK};
use crate::time::{LinkModel, Nanos, PeClock};

use activity::{Activity, ActivityToken};
use frame::{Frame, FrameBody, FrameKind};
use inbox::{FrameSink, Inbound, Inbox, InboxSink};
use matching::MatchingEngine;

pub use loopback::LoopbackFabric;
pub use tcp::TcpFabric;

/// Index of a worker (one per PE).
pub type PeId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("worker id {0} is already in use in this group")]
    DuplicateWorker(PeId),
    #[error("cannot reach {peer}: {reason}")]
    Unreachable { peer: String, reason: String },
    #[error("tag layout digest mismatch: local {local:#018x}, remote {remote:#018x}")]
    LayoutMismatch { local: u64, remote: u64 },
    #[error("no endpoint to worker {0}")]
    NotConnected(PeId),
    #[error("peer {0} disconnected")]
    Disconnected(PeId),
    #[error("message of {len} bytes exceeds receive capacity {capacity}")]
    Truncated { len: usize, capacity: usize },
    #[error("message of {len} bytes exceeds the maximum of {max}")]
    TooLarge { len: usize, max: u64 },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Outcome of one send or receive.
#[derive(Debug)]
pub struct TransferEvent {
    pub status: Result<(), TransportError>,
    /// The message's tag (the sender's tag for receives).
    pub tag: Tag,
    /// Actual message length.
    pub len: usize,
    /// Received bytes; empty for sends and failed receives.
    pub data: Vec<u8>,
    pub source: Option<PeId>,
    /// Virtual time at which the operation completed.
    pub timestamp: Nanos,
}

pub type CompletionFn = Box<dyn FnOnce(TransferEvent)>;

/// A completion that became ready during `poll`. Holds one unit of activity
/// until it is dropped.
pub struct ReadyEvent {
    pub callback: CompletionFn,
    pub event: TransferEvent,
    _token: Option<ActivityToken>,
}

impl ReadyEvent {
    pub fn fire(self) {
        let ReadyEvent { callback, event, _token } = self;
        callback(event);
    }
}

/// A host message delivered into one of the pre-posted eager receives.
#[derive(Debug)]
pub struct EagerArrival {
    pub from: PeId,
    pub tag: Tag,
    pub data: Vec<u8>,
    pub timestamp: Nanos,
    pub token: Option<ActivityToken>,
}

/// Link models keyed by node placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkTable {
    pub ranks_per_node: usize,
    pub intra: LinkModel,
    pub inter: LinkModel,
}

impl Default for LinkTable {
    fn default() -> Self {
        let c = Config::default();
        LinkTable {
            ranks_per_node: c.ranks_per_node,
            intra: c.link.intra.model(),
            inter: c.link.inter.model(),
        }
    }
}

impl LinkTable {
    pub fn uniform(model: LinkModel) -> Self {
        LinkTable {
            ranks_per_node: usize::MAX,
            intra: model,
            inter: model,
        }
    }

    pub fn between(&self, a: PeId, b: PeId) -> LinkModel {
        if a as usize / self.ranks_per_node == b as usize / self.ranks_per_node {
            self.intra
        } else {
            self.inter
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub layout: TagLayout,
    pub eager_threshold: usize,
    pub eager_prepost: usize,
    pub max_message_size: u64,
    pub connect_timeout: Duration,
    pub links: LinkTable,
    /// TCP bind address (`host:port`, port 0 for ephemeral).
    pub bind: Option<String>,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig::from_config(&Config::default())
    }
}

impl WorkerConfig {
    pub fn from_config(c: &Config) -> Self {
        WorkerConfig {
            layout: c.tags,
            eager_threshold: c.eager_threshold,
            eager_prepost: c.eager_prepost,
            max_message_size: c.max_message_size,
            connect_timeout: Duration::from_millis(c.connect_timeout_ms),
            links: LinkTable {
                ranks_per_node: c.ranks_per_node,
                intra: c.link.intra.model(),
                inter: c.link.inter.model(),
            },
            bind: None,
        }
    }
}

/// Which backend a worker joins.
#[derive(Clone)]
pub enum Fabric {
    Loopback(LoopbackFabric),
    Tcp(TcpFabric),
}

impl Fabric {
    pub fn activity(&self) -> &Activity {
        match self {
            Fabric::Loopback(f) => f.activity(),
            Fabric::Tcp(f) => f.activity(),
        }
    }
}

/// How to reach a peer in [`Worker::connect`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerSpec {
    Loopback(PeId),
    Tcp(String),
}

struct Endpoint {
    sink: Arc<dyn FrameSink>,
    link: LinkModel,
    link_free: Nanos,
    failed: bool,
}

enum RecvTarget {
    EagerSlot,
    User(CompletionFn),
}

enum Pending {
    Eager(Vec<u8>),
    Rendezvous { rndv_id: u64 },
}

struct OutgoingRndv {
    peer: PeId,
    tag: Tag,
    data: Vec<u8>,
    completion: Option<CompletionFn>,
    requested_at: Nanos,
}

struct PendingPull {
    target: RecvTarget,
    tag: Tag,
    len: usize,
    capacity: usize,
    post_ts: Nanos,
}

/// Per-worker frame counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub frames_sent: [u64; 4],
    pub frames_received: [u64; 4],
    pub bytes_sent: u64,
    pub eager_sends: u64,
    pub rendezvous_sends: u64,
    pub completions: u64,
}

impl TransportStats {
    pub fn sent(&self, kind: FrameKind) -> u64 {
        self.frames_sent[kind as usize]
    }

    pub fn received(&self, kind: FrameKind) -> u64 {
        self.frames_received[kind as usize]
    }
}

/// Handle of a posted receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReceiveRequest(pub u64);

pub struct Worker {
    id: PeId,
    config: WorkerConfig,
    fabric: Fabric,
    inbox: Arc<Inbox>,
    clock: PeClock,
    endpoints: HashMap<PeId, Endpoint>,
    engine: MatchingEngine<RecvTarget, Pending>,
    rndv_out: HashMap<u64, OutgoingRndv>,
    rndv_in: HashMap<(PeId, u64), PendingPull>,
    next_rndv: u64,
    ready: Vec<ReadyEvent>,
    eager: VecDeque<EagerArrival>,
    stats: TransportStats,
    listener: Option<tcp::TcpListenerHandle>,
}

impl fmt::Debug for Worker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Worker")
            .field("id", &self.id)
            .field("endpoints", &self.endpoints.len())
            .field("posted", &self.engine.posted_len())
            .field("unexpected", &self.engine.unexpected_len())
            .finish()
    }
}

impl Worker {
    /// Creates a worker, registers it with the fabric and pre-posts the
    /// eager wildcard receives.
    pub fn create(
        id: PeId,
        config: WorkerConfig,
        fabric: &Fabric,
        clock: PeClock,
    ) -> Result<Worker, TransportError> {
        let inbox = Inbox::new();
        let digest = config.layout.digest();
        let mut listener = None;
        match fabric {
            Fabric::Loopback(f) => f.register(id, inbox.clone(), digest)?,
            Fabric::Tcp(f) => {
                f.claim(id)?;
                let bind = config.bind.clone().unwrap_or_else(|| "127.0.0.1:0".into());
                match tcp::listen(&bind, id, digest, inbox.clone(), f.activity().clone()) {
                    Ok(l) => listener = Some(l),
                    Err(e) => {
                        f.release(id);
                        return Err(e);
                    }
                }
            }
        }
        let mut w = Worker {
            id,
            config,
            fabric: fabric.clone(),
            inbox,
            clock,
            endpoints: HashMap::new(),
            engine: MatchingEngine::new(),
            rndv_out: HashMap::new(),
            rndv_in: HashMap::new(),
            next_rndv: 0,
            ready: Vec::new(),
            eager: VecDeque::new(),
            stats: TransportStats::default(),
            listener,
        };
        for _ in 0..w.config.eager_prepost {
            w.post_eager_slot();
        }
        Ok(w)
    }

    pub fn id(&self) -> PeId {
        self.id
    }

    pub fn layout(&self) -> &TagLayout {
        &self.config.layout
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    pub fn clock(&self) -> &PeClock {
        &self.clock
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    pub fn activity(&self) -> &Activity {
        self.fabric.activity()
    }

    /// Local address of the TCP listener, if any.
    pub fn listen_addr(&self) -> Option<std::net::SocketAddr> {
        self.listener.as_ref().map(|l| l.local_addr)
    }

    pub fn posted_eager_count(&self) -> usize {
        self.engine
            .posted()
            .filter(|r| matches!(r.target, RecvTarget::EagerSlot))
            .count()
    }

    pub fn posted_count(&self) -> usize {
        self.engine.posted_len()
    }

    pub fn unexpected_count(&self) -> usize {
        self.engine.unexpected_len()
    }

    pub fn is_connected(&self, peer: PeId) -> bool {
        self.endpoints.get(&peer).is_some_and(|e| !e.failed)
    }

    pub fn inbox_is_empty(&self) -> bool {
        self.inbox.is_empty()
    }

    /// Parks the calling thread until inbound traffic arrives or `timeout`.
    pub fn wait_for_traffic(&self, timeout: Duration) {
        self.inbox.wait(timeout);
    }

    /// A handle other threads can use to wake this worker.
    pub fn waker(&self) -> WorkerWaker {
        WorkerWaker(self.inbox.clone())
    }

    fn post_eager_slot(&mut self) {
        let tag = MessageKind::Eager.wildcard_tag();
        // Pre-posted receives are always ready: they impose no receiver-side
        // delay, so their post time is zero.
        if let Ok((recv, msg)) = self.engine.post(tag, KIND_MASK, usize::MAX, 0, RecvTarget::EagerSlot) {
            self.complete_match(recv, msg);
        }
    }

    /// Establishes an endpoint to `peer`.
    pub fn connect(&mut self, peer: PeerSpec) -> Result<PeId, TransportError> {
        let digest = self.config.layout.digest();
        match (&self.fabric, peer) {
            (Fabric::Loopback(f), PeerSpec::Loopback(p)) => {
                if self.endpoints.contains_key(&p) {
                    return Ok(p);
                }
                let (inbox, theirs) = f.lookup(p, self.config.connect_timeout)?;
                if theirs != digest {
                    return Err(TransportError::LayoutMismatch {
                        local: digest,
                        remote: theirs,
                    });
                }
                self.install_loopback(p, inbox);
                Ok(p)
            }
            (Fabric::Tcp(f), PeerSpec::Tcp(addr)) => {
                let (p, sink) = tcp::connect(
                    &addr,
                    self.id,
                    digest,
                    self.config.connect_timeout,
                    self.inbox.clone(),
                    f.activity().clone(),
                )?;
                self.install(p, sink);
                Ok(p)
            }
            (_, PeerSpec::Loopback(p)) if p == self.id => {
                self.ensure_self_endpoint();
                Ok(p)
            }
            (_, spec) => Err(TransportError::Unreachable {
                peer: format!("{spec:?}"),
                reason: "peer spec does not match this worker's backend".into(),
            }),
        }
    }

    fn install(&mut self, peer: PeId, sink: Arc<dyn FrameSink>) {
        let link = self.config.links.between(self.id, peer);
        self.endpoints.insert(
            peer,
            Endpoint {
                sink,
                link,
                link_free: 0,
                failed: false,
            },
        );
    }

    fn install_loopback(&mut self, peer: PeId, inbox: Arc<Inbox>) {
        let sink = Arc::new(InboxSink {
            from: self.id,
            target: inbox.clone(),
        });
        self.install(peer, sink);
        if peer != self.id {
            inbox.push(Inbound::Connected {
                peer: self.id,
                sink: Arc::new(InboxSink {
                    from: peer,
                    target: self.inbox.clone(),
                }),
            });
        }
    }

    fn ensure_self_endpoint(&mut self) {
        if !self.endpoints.contains_key(&self.id) {
            let inbox = self.inbox.clone();
            self.install_loopback(self.id, inbox);
        }
    }

    fn endpoint(&mut self, peer: PeId) -> Result<&mut Endpoint, TransportError> {
        if !self.endpoints.contains_key(&peer) {
            if peer == self.id {
                self.ensure_self_endpoint();
            } else if let Fabric::Loopback(f) = &self.fabric {
                let (inbox, theirs) = f.lookup(peer, Duration::ZERO)?;
                let digest = self.config.layout.digest();
                if theirs != digest {
                    return Err(TransportError::LayoutMismatch {
                        local: digest,
                        remote: theirs,
                    });
                }
                self.install_loopback(peer, inbox);
            } else {
                return Err(TransportError::NotConnected(peer));
            }
        }
        Ok(self.endpoints.get_mut(&peer).unwrap())
    }

    fn push_ready(&mut self, callback: CompletionFn, event: TransferEvent) {
        let token = Some(self.fabric.activity().token());
        self.ready.push(ReadyEvent {
            callback,
            event,
            _token: token,
        });
    }

    fn send_frame(&mut self, peer: PeId, mut frame: Frame) -> Result<(), TransportError> {
        let kind = frame.body.kind();
        let bytes = frame.body.data_len();
        frame.token = Some(self.fabric.activity().token());
        let ep = self.endpoint(peer)?;
        if ep.failed {
            return Err(TransportError::Disconnected(peer));
        }
        if let Err(e) = ep.sink.deliver(frame) {
            ep.failed = true;
            return Err(e);
        }
        self.stats.frames_sent[kind as usize] += 1;
        self.stats.bytes_sent += bytes;
        Ok(())
    }

    /// Non-blocking tagged send. `completion` fires once `payload` would be
    /// reusable; transport failures are reported through it.
    pub fn tag_send(
        &mut self,
        peer: PeId,
        tag: Tag,
        payload: Vec<u8>,
        completion: Option<CompletionFn>,
    ) -> Result<(), TransportError> {
        if payload.len() as u64 > self.config.max_message_size {
            return Err(TransportError::TooLarge {
                len: payload.len(),
                max: self.config.max_message_size,
            });
        }
        let now = self.clock.now();
        let len = payload.len();
        let threshold = self.config.eager_threshold;
        let ep = self.endpoint(peer)?;
        if ep.failed {
            if let Some(cb) = completion {
                let ev = failed_event(tag, len, peer, now, TransportError::Disconnected(peer));
                self.push_ready(cb, ev);
            }
            return Ok(());
        }
        let link = ep.link;
        if len <= threshold {
            let injected = now.max(ep.link_free);
            ep.link_free = injected + link.occupancy(len as u64);
            let done = ep.link_free;
            let mut frame = Frame::new(tag, FrameBody::Eager(payload));
            frame.send_ts = injected;
            frame.arrival = link.arrival(injected, len as u64);
            let result = self.send_frame(peer, frame);
            self.stats.eager_sends += 1;
            if let Some(cb) = completion {
                let ev = TransferEvent {
                    status: result.map_err(|_| TransportError::Disconnected(peer)),
                    tag,
                    len,
                    data: Vec::new(),
                    source: Some(peer),
                    timestamp: done,
                };
                self.push_ready(cb, ev);
            }
        } else {
            let rndv_id = self.next_rndv;
            self.next_rndv += 1;
            let mut frame = Frame::new(
                tag,
                FrameBody::Rts {
                    rndv_id,
                    len: len as u64,
                },
            );
            frame.send_ts = now;
            frame.arrival = link.arrival(now, 0);
            self.stats.rendezvous_sends += 1;
            match self.send_frame(peer, frame) {
                Ok(()) => {
                    self.rndv_out.insert(
                        rndv_id,
                        OutgoingRndv {
                            peer,
                            tag,
                            data: payload,
                            completion,
                            requested_at: now,
                        },
                    );
                }
                Err(e) => {
                    if let Some(cb) = completion {
                        self.push_ready(cb, failed_event(tag, len, peer, now, e));
                    }
                }
            }
        }
        Ok(())
    }

    /// Non-blocking tagged receive of up to `capacity` bytes.
    pub fn tag_recv(
        &mut self,
        tag: Tag,
        mask: u64,
        capacity: usize,
        completion: CompletionFn,
    ) -> ReceiveRequest {
        let now = self.clock.now();
        self.tag_recv_at(tag, mask, capacity, now, completion)
    }

    /// [`Worker::tag_recv`] with an explicit posting time, used for
    /// receives the runtime posts on behalf of a message already announced.
    pub fn tag_recv_at(
        &mut self,
        tag: Tag,
        mask: u64,
        capacity: usize,
        post_ts: Nanos,
        completion: CompletionFn,
    ) -> ReceiveRequest {
        match self
            .engine
            .post(tag, mask, capacity, post_ts, RecvTarget::User(completion))
        {
            Ok((recv, msg)) => {
                let seq = recv.seq;
                self.complete_match(recv, msg);
                ReceiveRequest(seq)
            }
            Err(seq) => ReceiveRequest(seq),
        }
    }

    /// Reports the earliest matching unexpected message without consuming it.
    pub fn tag_probe(&self, tag: Tag, mask: u64) -> Option<(Tag, usize)> {
        self.engine.probe(tag, mask).map(|u| (u.tag, u.len))
    }

    /// Takes host messages delivered into the pre-posted eager receives.
    pub fn take_eager(&mut self) -> VecDeque<EagerArrival> {
        std::mem::take(&mut self.eager)
    }

    /// Drains inbound traffic and runs matching; returns ready completions
    /// without firing them.
    pub fn poll(&mut self) -> Vec<ReadyEvent> {
        for item in self.inbox.drain() {
            self.handle_inbound(item);
        }
        let out = std::mem::take(&mut self.ready);
        self.stats.completions += out.len() as u64;
        out
    }

    /// Drains inbound traffic, runs matching and fires completions. Returns
    /// the number of completions fired (including eager deliveries).
    pub fn progress(&mut self) -> usize {
        let before = self.eager.len();
        let events = self.poll();
        let n = events.len() + self.eager.len().saturating_sub(before);
        for e in events {
            e.fire();
        }
        n
    }

    fn handle_inbound(&mut self, item: Inbound) {
        match item {
            Inbound::Connected { peer, sink } => {
                if !self.endpoints.contains_key(&peer) {
                    self.install(peer, sink);
                }
            }
            Inbound::Disconnected { peer, .. } => self.fail_peer(peer),
            Inbound::Frame { from, frame } => self.handle_frame(from, frame),
        }
    }

    fn handle_frame(&mut self, from: PeId, frame: Frame) {
        let Frame {
            tag,
            body,
            arrival,
            token,
            ..
        } = frame;
        self.stats.frames_received[body.kind() as usize] += 1;
        match body {
            FrameBody::Eager(data) => {
                let len = data.len();
                if let Some((recv, msg)) = self.engine.arrive(from, tag, len, arrival, Pending::Eager(data)) {
                    self.complete_match(recv, msg);
                }
            }
            FrameBody::Rts { rndv_id, len } => {
                if let Some((recv, msg)) =
                    self.engine
                        .arrive(from, tag, len as usize, arrival, Pending::Rendezvous { rndv_id })
                {
                    self.complete_match(recv, msg);
                }
            }
            FrameBody::Pull { rndv_id } => self.serve_pull(from, rndv_id, arrival),
            FrameBody::Payload { rndv_id, data } => {
                if let Some(p) = self.rndv_in.remove(&(from, rndv_id)) {
                    let ts = p.post_ts.max(arrival);
                    let status = if p.len > p.capacity {
                        Err(TransportError::Truncated {
                            len: p.len,
                            capacity: p.capacity,
                        })
                    } else {
                        Ok(())
                    };
                    self.deliver(p.target, from, p.tag, data, status, ts);
                }
            }
        }
        drop(token);
    }

    fn serve_pull(&mut self, from: PeId, rndv_id: u64, arrival: Nanos) {
        let Some(out) = self.rndv_out.remove(&rndv_id) else {
            return;
        };
        debug_assert_eq!(out.peer, from);
        let len = out.data.len();
        let result = match self.endpoint(out.peer) {
            Ok(ep) if !ep.failed => {
                let injected = ep.link_free.max(arrival).max(out.requested_at);
                ep.link_free = injected + ep.link.occupancy(len as u64);
                let done = ep.link_free;
                let mut frame = Frame::new(
                    out.tag,
                    FrameBody::Payload {
                        rndv_id,
                        data: out.data,
                    },
                );
                frame.send_ts = injected;
                frame.arrival = ep.link.arrival(injected, len as u64);
                self.send_frame(out.peer, frame).map(|_| done)
            }
            Ok(_) => Err(TransportError::Disconnected(out.peer)),
            Err(e) => Err(e),
        };
        if let Some(cb) = out.completion {
            let ev = match result {
                Ok(done) => TransferEvent {
                    status: Ok(()),
                    tag: out.tag,
                    len,
                    data: Vec::new(),
                    source: Some(out.peer),
                    timestamp: done,
                },
                Err(e) => failed_event(out.tag, len, out.peer, arrival, e),
            };
            self.push_ready(cb, ev);
        }
    }

    fn complete_match(&mut self, recv: matching::PostedRecv<RecvTarget>, msg: matching::Unexpected<Pending>) {
        let is_slot = matches!(recv.target, RecvTarget::EagerSlot);
        match msg.msg {
            Pending::Eager(data) => {
                let ts = recv.post_ts.max(msg.arrival);
                let status = if data.len() > recv.capacity {
                    Err(TransportError::Truncated {
                        len: data.len(),
                        capacity: recv.capacity,
                    })
                } else {
                    Ok(())
                };
                self.deliver(recv.target, msg.from, msg.tag, data, status, ts);
            }
            Pending::Rendezvous { rndv_id } => {
                // Pull is issued once both the announcement and the receive
                // exist; control frames do not occupy the link.
                let issued = recv.post_ts.max(msg.arrival);
                let peer = msg.from;
                let mut pull = Frame::new(msg.tag, FrameBody::Pull { rndv_id });
                let link = self.config.links.between(self.id, peer);
                pull.send_ts = issued;
                pull.arrival = link.arrival(issued, 0);
                let sent = self.send_frame(peer, pull);
                let pending = PendingPull {
                    target: recv.target,
                    tag: msg.tag,
                    len: msg.len,
                    capacity: recv.capacity,
                    post_ts: recv.post_ts,
                };
                match sent {
                    Ok(()) => {
                        self.rndv_in.insert((peer, rndv_id), pending);
                    }
                    Err(e) => self.deliver(pending.target, peer, msg.tag, Vec::new(), Err(e), issued),
                }
            }
        }
        if is_slot {
            self.post_eager_slot();
        }
    }

    fn deliver(
        &mut self,
        target: RecvTarget,
        from: PeId,
        tag: Tag,
        data: Vec<u8>,
        status: Result<(), TransportError>,
        timestamp: Nanos,
    ) {
        match target {
            RecvTarget::EagerSlot => {
                if status.is_ok() {
                    let token = Some(self.fabric.activity().token());
                    self.eager.push_back(EagerArrival {
                        from,
                        tag,
                        data,
                        timestamp,
                        token,
                    });
                }
            }
            RecvTarget::User(cb) => {
                let len = data.len();
                let (len, data) = match &status {
                    Ok(()) => (len, data),
                    Err(TransportError::Truncated { len, .. }) => (*len, Vec::new()),
                    Err(_) => (len, Vec::new()),
                };
                self.push_ready(
                    cb,
                    TransferEvent {
                        status,
                        tag,
                        len,
                        data,
                        source: Some(from),
                        timestamp,
                    },
                );
            }
        }
    }

    fn fail_peer(&mut self, peer: PeId) {
        if let Some(ep) = self.endpoints.get_mut(&peer) {
            ep.failed = true;
        }
        let now = self.clock.now();
        let dead: Vec<u64> = self
            .rndv_out
            .iter()
            .filter(|(_, o)| o.peer == peer)
            .map(|(id, _)| *id)
            .collect();
        for id in dead {
            let out = self.rndv_out.remove(&id).unwrap();
            if let Some(cb) = out.completion {
                let ev = failed_event(out.tag, out.data.len(), peer, now, TransportError::Disconnected(peer));
                self.push_ready(cb, ev);
            }
        }
        let dead: Vec<(PeId, u64)> = self.rndv_in.keys().filter(|(p, _)| *p == peer).copied().collect();
        for key in dead {
            let p = self.rndv_in.remove(&key).unwrap();
            self.deliver(p.target, peer, p.tag, Vec::new(), Err(TransportError::Disconnected(peer)), now);
        }
    }
}

fn failed_event(tag: Tag, len: usize, peer: PeId, ts: Nanos, err: TransportError) -> TransferEvent {
    TransferEvent {
        status: Err(err),
        tag,
        len,
        data: Vec::new(),
        source: Some(peer),
        timestamp: ts,
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        // Peers that connected but were never progressed still need notice.
        for item in self.inbox.drain() {
            if let Inbound::Connected { peer, sink } = item {
                self.endpoints.entry(peer).or_insert(Endpoint {
                    sink,
                    link: self.config.links.between(self.id, peer),
                    link_free: 0,
                    failed: false,
                });
            }
        }
        for (peer, ep) in self.endpoints.drain() {
            if peer != self.id {
                // Loopback peers learn about the disconnect through their
                // inbox; TCP peers see EOF.
                if let Fabric::Loopback(f) = &self.fabric {
                    if let Ok((inbox, _)) = f.lookup(peer, Duration::ZERO) {
                        inbox.push(Inbound::Disconnected {
                            peer: self.id,
                            reason: "worker dropped".into(),
                        });
                    }
                }
                ep.sink.close();
            }
        }
        match &self.fabric {
            Fabric::Loopback(f) => f.unregister(self.id),
            Fabric::Tcp(f) => f.release(self.id),
        }
    }
}

/// Thread-safe wake handle for a worker parked in `wait_for_traffic`.
#[derive(Clone)]
pub struct WorkerWaker(Arc<Inbox>);

impl WorkerWaker {
    pub fn wake(&self) {
        self.0.notify();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag::FULL_MASK;
    use std::cell::RefCell;
    use std::rc::Rc;

    fn pair(threshold: usize) -> (Worker, Worker) {
        let fabric = Fabric::Loopback(LoopbackFabric::new());
        let cfg = WorkerConfig {
            eager_threshold: threshold,
            ..WorkerConfig::default()
        };
        let a = Worker::create(0, cfg.clone(), &fabric, PeClock::virtual_at(0)).unwrap();
        let b = Worker::create(1, cfg, &fabric, PeClock::virtual_at(0)).unwrap();
        (a, b)
    }

    /// Tags outside the eager kind, which the pre-posted slots would take.
    fn t(n: u64) -> Tag {
        Tag((MessageKind::Probe.code() as u64) << 60 | n)
    }

    type Log = Rc<RefCell<Vec<TransferEvent>>>;

    fn recorder(log: &Log) -> CompletionFn {
        let log = log.clone();
        Box::new(move |ev| log.borrow_mut().push(ev))
    }

    #[test]
    fn default_prepost_count() {
        let (a, _) = pair(8192);
        assert_eq!(a.posted_eager_count(), 64);
    }

    #[test]
    fn prepost_is_configurable() {
        let fabric = Fabric::Loopback(LoopbackFabric::new());
        let cfg = WorkerConfig {
            eager_prepost: 1,
            ..WorkerConfig::default()
        };
        let w = Worker::create(1, cfg, &fabric, PeClock::virtual_at(0)).unwrap();
        assert_eq!(w.posted_eager_count(), 1);
    }

    #[test]
    fn duplicate_id_rejected() {
        let fabric = Fabric::Loopback(LoopbackFabric::new());
        let _a = Worker::create(0, WorkerConfig::default(), &fabric, PeClock::virtual_at(0)).unwrap();
        let err = Worker::create(0, WorkerConfig::default(), &fabric, PeClock::virtual_at(0)).unwrap_err();
        assert_eq!(err, TransportError::DuplicateWorker(0));
    }

    #[test]
    fn zero_byte_send() {
        let (mut a, mut b) = pair(8192);
        let log: Log = Rc::default();
        a.tag_send(1, t(7), vec![], Some(recorder(&log))).unwrap();
        b.tag_recv(t(7), FULL_MASK, 0, recorder(&log));
        assert_eq!(a.progress(), 1);
        assert_eq!(b.progress(), 1);
        assert_eq!(log.borrow().len(), 2);
        assert_eq!(log.borrow()[1].len, 0);
        assert!(log.borrow()[1].status.is_ok());
    }

    #[test]
    fn eager_slots_repost_on_consumption() {
        let (mut a, mut b) = pair(8192);
        for i in 0..100u8 {
            a.tag_send(1, MessageKind::Eager.wildcard_tag(), vec![i], None).unwrap();
        }
        b.progress();
        let got: Vec<u8> = b.take_eager().into_iter().map(|e| e.data[0]).collect();
        assert_eq!(got, (0..100).collect::<Vec<_>>());
        assert_eq!(b.posted_eager_count(), 64);
    }

    #[test]
    fn rendezvous_probe_and_receive() {
        let (mut a, mut b) = pair(16);
        let data: Vec<u8> = (0..1000u32).map(|i| i as u8).collect();
        let log: Log = Rc::default();
        a.tag_send(1, t(9), data.clone(), Some(recorder(&log))).unwrap();
        assert_eq!(b.tag_probe(t(9), FULL_MASK), None);
        b.progress();
        assert_eq!(b.tag_probe(t(9), FULL_MASK), Some((t(9), 1000)));
        b.tag_recv(t(9), FULL_MASK, 1000, recorder(&log));
        a.progress();
        b.progress();
        let log = log.borrow();
        assert_eq!(log.len(), 2);
        let recv = log.iter().find(|e| !e.data.is_empty()).unwrap();
        assert_eq!(recv.data, data);
        assert_eq!(a.stats().sent(FrameKind::Payload), 1);
    }

    #[test]
    fn truncation_is_an_error() {
        for threshold in [8192, 4] {
            let (mut a, mut b) = pair(threshold);
            let log: Log = Rc::default();
            a.tag_send(1, t(1), vec![0; 10], None).unwrap();
            b.progress();
            b.tag_recv(t(1), FULL_MASK, 5, recorder(&log));
            a.progress();
            b.progress();
            let log = log.borrow();
            assert!(matches!(
                log[0].status,
                Err(TransportError::Truncated { len: 10, capacity: 5 })
            ));
            assert_eq!(b.unexpected_count(), 0);
        }
    }

    #[test]
    fn virtual_completion_time() {
        let (mut a, mut b) = pair(8192);
        let link = a.config().links.between(0, 1);
        a.clock().merge(1_000);
        let log: Log = Rc::default();
        a.tag_send(1, t(3), vec![0; 4096], None).unwrap();
        b.clock().merge(500);
        b.tag_recv(t(3), FULL_MASK, 4096, recorder(&log));
        b.progress();
        let expected = 500u64.max(1_000 + link.latency + link.occupancy(4096));
        assert_eq!(log.borrow()[0].timestamp, expected);
    }

    #[test]
    fn disconnect_fails_pending_rendezvous() {
        let (mut a, b) = pair(4);
        let log: Log = Rc::default();
        a.tag_send(1, t(1), vec![0; 64], Some(recorder(&log))).unwrap();
        drop(b);
        a.progress();
        assert!(matches!(log.borrow()[0].status, Err(TransportError::Disconnected(1))));
        a.tag_send(1, t(1), vec![0; 2], Some(recorder(&log))).unwrap();
        a.progress();
        assert!(log.borrow()[1].status.is_err());
    }

    #[test]
    fn loopback_connect_unknown_peer_times_out() {
        let fabric = Fabric::Loopback(LoopbackFabric::new());
        let cfg = WorkerConfig {
            connect_timeout: Duration::from_millis(50),
            ..WorkerConfig::default()
        };
        let mut w = Worker::create(0, cfg, &fabric, PeClock::virtual_at(0)).unwrap();
        assert!(matches!(
            w.connect(PeerSpec::Loopback(9)),
            Err(TransportError::Unreachable { .. })
        ));
    }

    #[test]
    fn loopback_layout_mismatch_names_both_digests() {
        let fabric = Fabric::Loopback(LoopbackFabric::new());
        let other = TagLayout::new(20, 40, 28, 32).unwrap();
        let mut a = Worker::create(0, WorkerConfig::default(), &fabric, PeClock::virtual_at(0)).unwrap();
        let _b = Worker::create(
            1,
            WorkerConfig {
                layout: other,
                ..WorkerConfig::default()
            },
            &fabric,
            PeClock::virtual_at(0),
        )
        .unwrap();
        let err = a.connect(PeerSpec::Loopback(1)).unwrap_err();
        assert_eq!(
            err,
            TransportError::LayoutMismatch {
                local: TagLayout::default().digest(),
                remote: other.digest()
            }
        );
        let msg = err.to_string();
        assert!(msg.contains(&format!("{:#018x}", other.digest())));
    }

    #[test]
    fn activity_returns_to_zero() {
        let (mut a, mut b) = pair(16);
        let act = a.activity().clone();
        a.tag_send(1, t(1), vec![1; 100], Some(Box::new(|_| {}))).unwrap();
        b.tag_recv(t(1), FULL_MASK, 100, Box::new(|_| {}));
        for _ in 0..3 {
            a.progress();
            b.progress();
        }
        assert!(act.is_quiescent(), "activity {}", act.get());
    }
}
