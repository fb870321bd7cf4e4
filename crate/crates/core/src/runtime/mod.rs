//! Message-driven runtime: chares addressed by [`ChareId`], one scheduler
//! thread per PE, entry-method dispatch, callbacks, futures and suspended
//! tasks.
//!
//! Every message, including a self-send and a remote future fulfillment,
//! travels through the transport, so an entry method never runs inline in
//! its sender's stack frame. Envelopes carry a per (source, destination PE)
//! sequence number; the receiver reorders them, which keeps per-source FIFO
//! order even when small envelopes overtake large ones on the wire.

pub mod args;
pub mod envelope;
pub(crate) mod executor;
pub mod future;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::future::Future;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::{Rc, Weak};
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{Backend, Config, PayloadOrder};
use crate::device::{DeviceError, DeviceRegion, DeviceSpace};
use crate::devmsg::{self, DeviceOp, DeviceSend};
use crate::tag::{encode_messaging_tag, MessageKind, Tag, TagError, TagLayout, KIND_MASK};
use crate::time::{Nanos, PeClock};
use crate::transport::activity::{Activity, ActivityToken};
use crate::transport::{
    CompletionFn, Fabric, LoopbackFabric, PeId, PeerSpec, TcpFabric, TransferEvent, TransportError,
    TransportStats, Worker, WorkerConfig, WorkerWaker,
};

pub use args::{ArgError, ArgReader, Args};
pub use envelope::{ChareId, DeviceDescriptor, Envelope, EnvelopeKind};
pub use future::{
    Callback, CompletionHandle, FutureHandle, FutureValue, Transfer, TransferInfo, TransferResult,
};

use executor::Executor;
use future::{oneshot, FutureTable};

pub type EntryId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("startup failed on PE {pe}: {reason}")]
    Startup { pe: PeId, reason: String },
    #[error("PE {pe}: dispatch of entry {entry} to chare {chare} failed: {reason}")]
    Dispatch {
        pe: PeId,
        chare: ChareId,
        entry: EntryId,
        reason: String,
    },
    #[error("PE {pe}: entry {entry} ({name}) of chare {chare} panicked: {message}")]
    EntryPanic {
        pe: PeId,
        chare: ChareId,
        entry: EntryId,
        name: String,
        message: String,
    },
    #[error("PE {pe}: post entry of entry {entry} ({name}) left device slot {slot} unbound")]
    UnboundDeviceSlot {
        pe: PeId,
        entry: EntryId,
        name: String,
        slot: usize,
    },
    #[error("PE {pe}: task failed: {reason}")]
    Task { pe: PeId, reason: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Args(#[from] ArgError),
    #[error(transparent)]
    Tag(#[from] TagError),
}

/// An entry-method invocation as seen by the receiving chare.
#[derive(Debug, Clone)]
pub struct Message {
    pub entry: EntryId,
    pub source_pe: PeId,
    /// Encoded host arguments (see [`Args`]).
    pub args: Vec<u8>,
    /// Device arguments; empty for host-only messages.
    pub device: Vec<DeviceArg>,
    pub timestamp: Nanos,
}

impl Message {
    pub fn reader(&self) -> ArgReader<'_> {
        ArgReader::new(&self.args)
    }
}

/// A device argument after delivery: the buffer the post entry bound and
/// the outcome of the payload transfer into it.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceArg {
    pub region: DeviceRegion,
    pub size: u64,
    pub tag: Tag,
    pub status: Result<(), RuntimeError>,
}

/// Destination binding requested from a post entry, one per device argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSlot {
    /// Size announced by the sender.
    pub size: u64,
    pub tag: Tag,
    dest: Option<DeviceRegion>,
}

impl DeviceSlot {
    pub(crate) fn new(size: u64, tag: Tag) -> Self {
        DeviceSlot {
            size,
            tag,
            dest: None,
        }
    }

    /// Binds the destination buffer. Its length is the receive capacity.
    pub fn bind(&mut self, region: impl Into<DeviceRegion>) {
        self.dest = Some(region.into());
    }

    pub fn bound(&self) -> Option<DeviceRegion> {
        self.dest
    }
}

/// An object whose entry methods are invoked by messages.
pub trait Chare: 'static {
    fn entry(&mut self, pe: &Pe, msg: Message) -> Result<(), RuntimeError>;

    /// Binds destination buffers for the device arguments of `msg` before
    /// their payloads are received. Only called for entries registered with
    /// [`ChareType::entry_with_post`].
    fn post_entry(&mut self, _pe: &Pe, _msg: &Message, _slots: &mut [DeviceSlot]) -> Result<(), RuntimeError> {
        Ok(())
    }
}

type Factory = Arc<dyn Fn(&Pe, u32) -> Box<dyn Chare> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntrySpec {
    pub name: String,
    pub has_post: bool,
}

/// Dispatch table of a chare type. Entry ids are dense from 0 in
/// declaration order.
#[derive(Clone)]
pub struct ChareType {
    name: String,
    entries: Vec<EntrySpec>,
    factory: Factory,
}

impl fmt::Debug for ChareType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChareType")
            .field("name", &self.name)
            .field("entries", &self.entries)
            .finish()
    }
}

impl ChareType {
    pub fn new<C, F>(name: impl Into<String>, factory: F) -> Self
    where
        C: Chare,
        F: Fn(&Pe, u32) -> C + Send + Sync + 'static,
    {
        ChareType {
            name: name.into(),
            entries: Vec::new(),
            factory: Arc::new(move |pe, i| Box::new(factory(pe, i))),
        }
    }

    pub fn entry(mut self, name: impl Into<String>) -> Self {
        self.entries.push(EntrySpec {
            name: name.into(),
            has_post: false,
        });
        self
    }

    /// Declares an entry with a companion post entry for device arguments.
    pub fn entry_with_post(mut self, name: impl Into<String>) -> Self {
        self.entries.push(EntrySpec {
            name: name.into(),
            has_post: true,
        });
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn entries(&self) -> &[EntrySpec] {
        &self.entries
    }

    pub fn entry_id(&self, name: &str) -> Option<EntryId> {
        self.entries.iter().position(|e| e.name == name).map(|i| i as EntryId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChareTypeId(pub u32);

/// Handle to a chare array: one element per index, each fixed to a home PE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayProxy {
    id: u32,
    homes: Arc<[PeId]>,
}

impl ArrayProxy {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.homes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.homes.is_empty()
    }

    pub fn element(&self, index: u32) -> ChareId {
        ChareId {
            collection: self.id,
            index,
            home_pe: self.homes[index as usize],
        }
    }

    pub fn elements(&self) -> impl Iterator<Item = ChareId> + '_ {
        (0..self.homes.len() as u32).map(|i| self.element(i))
    }
}

struct ArrayInfo {
    type_id: ChareTypeId,
    homes: Arc<[PeId]>,
}

#[derive(Default)]
struct Registry {
    types: Vec<Arc<ChareType>>,
    arrays: Vec<ArrayInfo>,
}

/// Counters kept by each PE's scheduler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RuntimeStats {
    /// Regular entry invocations (including those after device payloads).
    pub dispatches: u64,
    pub post_dispatches: u64,
    /// Envelopes sent, indexed by [`EnvelopeKind`].
    pub envelopes_sent: [u64; 4],
    pub envelopes_received: [u64; 4],
    pub device_sends: u64,
    pub device_receives: u64,
    /// Device receives whose posted tag was compared with the sender's.
    pub tag_checks: u64,
    pub tag_mismatches: u64,
    pub channel_sends: u64,
    pub channel_receives: u64,
}

impl RuntimeStats {
    pub fn total_envelopes_sent(&self) -> u64 {
        self.envelopes_sent.iter().sum()
    }

    fn add(&mut self, o: &RuntimeStats) {
        self.dispatches += o.dispatches;
        self.post_dispatches += o.post_dispatches;
        for i in 0..4 {
            self.envelopes_sent[i] += o.envelopes_sent[i];
            self.envelopes_received[i] += o.envelopes_received[i];
        }
        self.device_sends += o.device_sends;
        self.device_receives += o.device_receives;
        self.tag_checks += o.tag_checks;
        self.tag_mismatches += o.tag_mismatches;
        self.channel_sends += o.channel_sends;
        self.channel_receives += o.channel_receives;
    }
}

/// When a started runtime stops on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopPolicy {
    /// Stop once no PE has work and nothing is in flight.
    Quiescence,
    /// Run until [`RunningRuntime::shutdown`] or [`Pe::exit`].
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    Quiescence,
    Exit,
    Shutdown,
    Abort,
}

const END_NONE: u8 = 0;

impl EndReason {
    fn code(self) -> u8 {
        match self {
            EndReason::Quiescence => 1,
            EndReason::Exit => 2,
            EndReason::Shutdown => 3,
            EndReason::Abort => 4,
        }
    }

    fn from_code(c: u8) -> Self {
        match c {
            1 => EndReason::Quiescence,
            2 => EndReason::Exit,
            3 => EndReason::Shutdown,
            _ => EndReason::Abort,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeReport {
    pub pe: PeId,
    pub stats: RuntimeStats,
    pub transport: TransportStats,
    /// PE clock at the end of the run.
    pub final_time: Nanos,
    /// Tasks still suspended when the run ended.
    pub suspended_tasks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub pes: Vec<PeReport>,
    pub ended: EndReason,
    pub elapsed: Duration,
}

impl RunReport {
    pub fn stats(&self) -> RuntimeStats {
        let mut s = RuntimeStats::default();
        for p in &self.pes {
            s.add(&p.stats);
        }
        s
    }

    pub fn suspended_tasks(&self) -> usize {
        self.pes.iter().map(|p| p.suspended_tasks).sum()
    }

    pub fn max_time(&self) -> Nanos {
        self.pes.iter().map(|p| p.final_time).max().unwrap_or(0)
    }
}

type Submitted = Box<dyn FnOnce(&Pe) + Send>;

struct Shared {
    config: Config,
    types: Vec<Arc<ChareType>>,
    arrays: Vec<ArrayInfo>,
    device: DeviceSpace,
    activity: Activity,
    policy: StopPolicy,
    epoch: Instant,
    stop: AtomicBool,
    end: AtomicU8,
    error: Mutex<Option<RuntimeError>>,
    submits: Vec<Mutex<VecDeque<(Submitted, ActivityToken)>>>,
    wakers: Mutex<Vec<Option<WorkerWaker>>>,
    addrs: Mutex<Vec<Option<std::net::SocketAddr>>>,
    barrier: Barrier,
}

impl Shared {
    fn finish(&self, reason: EndReason) {
        let _ = self
            .end
            .compare_exchange(END_NONE, reason.code(), Ordering::SeqCst, Ordering::SeqCst);
        self.stop.store(true, Ordering::SeqCst);
        for w in self.wakers.lock().unwrap().iter().flatten() {
            w.wake();
        }
    }

    fn fail(&self, err: RuntimeError) {
        {
            let mut slot = self.error.lock().unwrap();
            if slot.is_none() {
                *slot = Some(err);
            }
        }
        self.finish(EndReason::Abort);
    }

    fn failed(&self) -> bool {
        self.error.lock().unwrap().is_some()
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

/// Entry point: registers chare types and arrays, then starts the PEs.
pub struct Runtime {
    config: Config,
    device: DeviceSpace,
    registry: Mutex<Registry>,
    started: AtomicBool,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("workers", &self.config.workers)
            .field("started", &self.started.load(Ordering::SeqCst))
            .finish()
    }
}

impl Runtime {
    pub fn new(config: Config) -> Result<Self, RuntimeError> {
        config.validate().map_err(|e| RuntimeError::Config(e.to_string()))?;
        let device = DeviceSpace::new(config.device.cost_model(), config.device.capacity());
        Ok(Runtime {
            config,
            device,
            registry: Mutex::default(),
            started: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn num_pes(&self) -> usize {
        self.config.workers
    }

    /// The device address space shared by all PEs of this runtime.
    pub fn device(&self) -> &DeviceSpace {
        &self.device
    }

    fn check_not_started(&self, what: &str) -> Result<(), RuntimeError> {
        if self.started.load(Ordering::SeqCst) {
            return Err(RuntimeError::Usage(format!("{what} after the runtime started")));
        }
        Ok(())
    }

    pub fn register(&self, ty: ChareType) -> Result<ChareTypeId, RuntimeError> {
        self.check_not_started("chare type registration")?;
        let mut reg = self.registry.lock().unwrap();
        if reg.types.iter().any(|t| t.name == ty.name) {
            return Err(RuntimeError::Usage(format!(
                "chare type '{}' registered twice",
                ty.name
            )));
        }
        reg.types.push(Arc::new(ty));
        Ok(ChareTypeId(reg.types.len() as u32 - 1))
    }

    /// Creates an array of `n` elements placed round-robin over the PEs.
    pub fn create_array(&self, ty: ChareTypeId, n: u32) -> Result<ArrayProxy, RuntimeError> {
        let pes = self.config.workers as u32;
        self.create_array_on(ty, (0..n).map(|i| i % pes).collect())
    }

    /// Creates an array whose element `i` lives on `homes[i]`.
    pub fn create_array_on(&self, ty: ChareTypeId, homes: Vec<PeId>) -> Result<ArrayProxy, RuntimeError> {
        self.check_not_started("array creation")?;
        let mut reg = self.registry.lock().unwrap();
        if ty.0 as usize >= reg.types.len() {
            return Err(RuntimeError::Usage(format!("unknown chare type {}", ty.0)));
        }
        if let Some(&bad) = homes.iter().find(|&&h| h as usize >= self.config.workers) {
            return Err(RuntimeError::Usage(format!("home PE {bad} out of range")));
        }
        let homes: Arc<[PeId]> = homes.into();
        reg.arrays.push(ArrayInfo {
            type_id: ty,
            homes: homes.clone(),
        });
        Ok(ArrayProxy {
            id: reg.arrays.len() as u32 - 1,
            homes,
        })
    }

    /// Starts every PE on its own thread. `init` runs once per PE after the
    /// local chares are constructed.
    pub fn start(
        &self,
        policy: StopPolicy,
        init: impl Fn(&Pe) + Send + Sync + 'static,
    ) -> Result<RunningRuntime, RuntimeError> {
        if self.started.swap(true, Ordering::SeqCst) {
            return Err(RuntimeError::Usage("runtime already started".into()));
        }
        let n = self.config.workers;
        let reg = std::mem::take(&mut *self.registry.lock().unwrap());
        let activity = Activity::new();
        let shared = Arc::new(Shared {
            config: self.config.clone(),
            types: reg.types,
            arrays: reg.arrays,
            device: self.device.clone(),
            activity: activity.clone(),
            policy,
            epoch: Instant::now(),
            stop: AtomicBool::new(false),
            end: AtomicU8::new(END_NONE),
            error: Mutex::new(None),
            submits: (0..n).map(|_| Mutex::default()).collect(),
            wakers: Mutex::new(vec![None; n]),
            addrs: Mutex::new(vec![None; n]),
            barrier: Barrier::new(n),
        });
        let fabric = match self.config.backend {
            Backend::Loopback => Fabric::Loopback(LoopbackFabric::with_activity(activity.clone())),
            Backend::Tcp => Fabric::Tcp(TcpFabric::with_activity(activity.clone())),
        };
        let init: Arc<dyn Fn(&Pe) + Send + Sync> = Arc::new(init);
        let mut threads = Vec::with_capacity(n);
        for id in 0..n as PeId {
            let shared = shared.clone();
            let fabric = fabric.clone();
            let init = init.clone();
            // Held until this PE has run its init, so no PE can observe
            // quiescence before every PE has started.
            let token = activity.token();
            let t = std::thread::Builder::new()
                .name(format!("pe-{id}"))
                .spawn(move || pe_main(id, shared, fabric, token, init))
                .map_err(|e| RuntimeError::Startup {
                    pe: id,
                    reason: e.to_string(),
                })?;
            threads.push(t);
        }
        Ok(RunningRuntime { shared, threads })
    }

    /// Starts the PEs and waits until the program is quiescent or exits.
    pub fn run(&self, init: impl Fn(&Pe) + Send + Sync + 'static) -> Result<RunReport, RuntimeError> {
        self.start(StopPolicy::Quiescence, init)?.join()
    }
}

/// A started runtime.
pub struct RunningRuntime {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<Option<PeReport>>>,
}

impl fmt::Debug for RunningRuntime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunningRuntime")
            .field("pes", &self.threads.len())
            .field("stopped", &self.shared.stopped())
            .finish()
    }
}

impl RunningRuntime {
    pub fn num_pes(&self) -> usize {
        self.threads.len()
    }

    pub fn device(&self) -> &DeviceSpace {
        &self.shared.device
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stopped()
    }

    /// Runs `f` on PE `pe`'s scheduler thread.
    pub fn submit(&self, pe: PeId, f: impl FnOnce(&Pe) + Send + 'static) -> Result<(), RuntimeError> {
        if self.shared.stopped() {
            return Err(RuntimeError::Usage("runtime has stopped".into()));
        }
        let q = self
            .shared
            .submits
            .get(pe as usize)
            .ok_or_else(|| RuntimeError::Usage(format!("PE {pe} out of range")))?;
        let token = self.shared.activity.token();
        q.lock().unwrap().push_back((Box::new(f), token));
        if let Some(w) = &self.shared.wakers.lock().unwrap()[pe as usize] {
            w.wake();
        }
        Ok(())
    }

    /// Runs `f` on PE `pe` and waits for its result.
    pub fn call<R: Send + 'static>(
        &self,
        pe: PeId,
        f: impl FnOnce(&Pe) -> R + Send + 'static,
    ) -> Result<R, RuntimeError> {
        let (tx, rx) = std::sync::mpsc::channel();
        self.submit(pe, move |p| {
            let _ = tx.send(f(p));
        })?;
        rx.recv()
            .map_err(|_| RuntimeError::Usage("runtime stopped before the call ran".into()))
    }

    pub fn shutdown(&self) {
        self.shared.finish(EndReason::Shutdown);
    }

    pub fn join(self) -> Result<RunReport, RuntimeError> {
        let mut pes = Vec::new();
        let mut panicked = None;
        for (i, t) in self.threads.into_iter().enumerate() {
            match t.join() {
                Ok(Some(r)) => pes.push(r),
                Ok(None) => {}
                Err(_) => panicked = Some(i),
            }
        }
        if let Some(e) = self.shared.error.lock().unwrap().take() {
            return Err(e);
        }
        if let Some(i) = panicked {
            return Err(RuntimeError::Startup {
                pe: i as PeId,
                reason: "scheduler thread panicked".into(),
            });
        }
        Ok(RunReport {
            pes,
            ended: EndReason::from_code(self.shared.end.load(Ordering::SeqCst)),
            elapsed: self.shared.epoch.elapsed(),
        })
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

pub(crate) enum Item {
    Envelope(Envelope, Nanos),
    DeviceReady(Rc<RefCell<DeviceOp>>),
    Run(Box<dyn FnOnce(&Pe)>),
}

#[derive(Default)]
struct Lane {
    busy: bool,
    queue: VecDeque<(Envelope, Nanos)>,
}

#[derive(Default)]
struct Reorder {
    next: u64,
    held: BTreeMap<u64, (Envelope, Nanos)>,
}

pub(crate) struct PeInner {
    id: PeId,
    shared: Arc<Shared>,
    clock: PeClock,
    worker: RefCell<Worker>,
    queue: RefCell<VecDeque<(Item, ActivityToken)>>,
    chares: RefCell<HashMap<(u32, u32), Rc<RefCell<Box<dyn Chare>>>>>,
    lanes: RefCell<HashMap<(PeId, ChareId), Lane>>,
    seq_out: RefCell<HashMap<PeId, u64>>,
    reorder: RefCell<HashMap<PeId, Reorder>>,
    futures: RefCell<FutureTable>,
    executor: Executor,
    device_counter: Cell<u64>,
    probe_counter: Cell<u64>,
    pub(crate) channels: RefCell<HashSet<(u64, ChareId)>>,
    pub(crate) mpi: RefCell<crate::mpi::RankState>,
    pub(crate) stats: RefCell<RuntimeStats>,
}

/// Handle to the current PE, passed to entry methods and captured by tasks.
/// Confined to its PE's thread.
#[derive(Clone)]
pub struct Pe(pub(crate) Rc<PeInner>);

impl fmt::Debug for Pe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pe({})", self.0.id)
    }
}

impl Pe {
    pub fn id(&self) -> PeId {
        self.0.id
    }

    pub fn num_pes(&self) -> usize {
        self.0.shared.config.workers
    }

    pub fn config(&self) -> &Config {
        &self.0.shared.config
    }

    pub fn layout(&self) -> &TagLayout {
        &self.0.shared.config.tags
    }

    pub fn device(&self) -> &DeviceSpace {
        &self.0.shared.device
    }

    pub fn clock(&self) -> &PeClock {
        &self.0.clock
    }

    pub fn now(&self) -> Nanos {
        self.0.clock.now()
    }

    pub fn stats(&self) -> RuntimeStats {
        *self.0.stats.borrow()
    }

    pub fn transport_stats(&self) -> TransportStats {
        self.0.worker.borrow().stats()
    }

    pub(crate) fn weak(&self) -> Weak<PeInner> {
        Rc::downgrade(&self.0)
    }

    pub(crate) fn from_weak(w: &Weak<PeInner>) -> Option<Pe> {
        w.upgrade().map(Pe)
    }

    pub(crate) fn worker(&self) -> std::cell::RefMut<'_, Worker> {
        self.0.worker.borrow_mut()
    }

    pub fn is_stopped(&self) -> bool {
        self.0.shared.stopped()
    }

    fn check_live(&self) -> Result<(), RuntimeError> {
        if self.is_stopped() {
            return Err(RuntimeError::Usage("runtime is not running".into()));
        }
        Ok(())
    }

    pub(crate) fn check_pe(&self, pe: PeId) -> Result<(), RuntimeError> {
        if pe as usize >= self.num_pes() {
            return Err(RuntimeError::Usage(format!(
                "PE {pe} out of range (have {})",
                self.num_pes()
            )));
        }
        Ok(())
    }

    /// Stops the whole run.
    pub fn exit(&self) {
        self.0.shared.finish(EndReason::Exit);
    }

    /// Stops the whole run with an error.
    pub fn abort(&self, err: RuntimeError) {
        self.0.shared.fail(err);
    }

    /// Runs a task on this PE's executor.
    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        self.0.executor.spawn(fut);
    }

    /// Runs a task whose error aborts the run.
    pub fn spawn_fallible(&self, fut: impl Future<Output = Result<(), RuntimeError>> + 'static) {
        let weak = self.weak();
        self.0.executor.spawn(async move {
            if let Err(e) = fut.await {
                if let Some(pe) = Pe::from_weak(&weak) {
                    let err = match e {
                        e @ (RuntimeError::Dispatch { .. }
                        | RuntimeError::EntryPanic { .. }
                        | RuntimeError::UnboundDeviceSlot { .. }
                        | RuntimeError::Task { .. }) => e,
                        other => RuntimeError::Task {
                            pe: pe.id(),
                            reason: other.to_string(),
                        },
                    };
                    pe.abort(err);
                }
            }
        });
    }

    /// Defers `f` to a later scheduler turn on this PE.
    pub fn defer(&self, f: impl FnOnce(&Pe) + 'static) {
        self.enqueue(Item::Run(Box::new(f)));
    }

    pub(crate) fn enqueue(&self, item: Item) {
        let token = self.0.shared.activity.token();
        self.0.queue.borrow_mut().push_back((item, token));
    }

    /// Asynchronously invokes `entry` on `target` with host arguments.
    pub fn send(&self, target: ChareId, entry: EntryId, args: impl Into<Vec<u8>>) -> Result<(), RuntimeError> {
        self.send_entry(target, entry, args, Vec::new())
    }

    /// Asynchronously invokes `entry` on `target` with host and device
    /// arguments. Device payloads travel separately from the metadata
    /// envelope; the receiver's post entry chooses where they land.
    pub fn send_entry(
        &self,
        target: ChareId,
        entry: EntryId,
        args: impl Into<Vec<u8>>,
        device: Vec<DeviceSend>,
    ) -> Result<(), RuntimeError> {
        self.check_live()?;
        self.check_pe(target.home_pe)?;
        let mut env = Envelope {
            kind: EnvelopeKind::Regular,
            dest: target,
            entry,
            source_pe: self.id(),
            seq: 0,
            descriptors: Vec::new(),
            payload: args.into(),
        };
        if device.is_empty() {
            return self.send_envelope(target.home_pe, env, None);
        }
        env.kind = EnvelopeKind::DeviceMeta;
        let prepared = device
            .into_iter()
            .map(|d| devmsg::prepare_send(self, d))
            .collect::<Result<Vec<_>, _>>()?;
        env.descriptors = prepared.iter().map(|p| p.descriptor).collect();
        match self.config().payload_order {
            PayloadOrder::PayloadFirst => {
                for p in prepared {
                    devmsg::issue_send(self, target.home_pe, p)?;
                }
                self.send_envelope(target.home_pe, env, None)
            }
            PayloadOrder::MetadataFirst => {
                self.send_envelope(target.home_pe, env, None)?;
                for p in prepared {
                    devmsg::issue_send(self, target.home_pe, p)?;
                }
                Ok(())
            }
        }
    }

    /// Sends a runtime envelope, assigning its sequence number. Envelopes up
    /// to the eager threshold use the eager tag; larger ones use a probe tag
    /// and the rendezvous path.
    pub(crate) fn send_envelope(
        &self,
        dest_pe: PeId,
        mut env: Envelope,
        completion: Option<CompletionFn>,
    ) -> Result<(), RuntimeError> {
        self.check_pe(dest_pe)?;
        let seq = self.0.seq_out.borrow().get(&dest_pe).copied().unwrap_or(0);
        env.seq = seq;
        env.source_pe = self.id();
        let bytes = env.encode();
        let layout = *self.layout();
        let tag = if bytes.len() <= self.config().eager_threshold {
            encode_messaging_tag(MessageKind::Eager, self.id() as u64, 0, &layout)?
        } else {
            let c = self.0.probe_counter.get();
            self.0.probe_counter.set(c.wrapping_add(1));
            encode_messaging_tag(MessageKind::Probe, self.id() as u64, c % layout.counter_modulus(), &layout)?
        };
        self.worker().tag_send(dest_pe, tag, bytes, completion)?;
        self.0.seq_out.borrow_mut().insert(dest_pe, seq + 1);
        self.0.stats.borrow_mut().envelopes_sent[env.kind as usize] += 1;
        Ok(())
    }

    pub(crate) fn next_device_counter(&self) -> u64 {
        let c = self.0.device_counter.get();
        self.0.device_counter.set(c.wrapping_add(1));
        c % self.layout().counter_modulus()
    }

    /// Creates a future homed on this PE.
    pub fn create_future(&self) -> FutureHandle {
        FutureHandle {
            home_pe: self.id(),
            id: self.0.futures.borrow_mut().create(),
        }
    }

    /// Fulfills a future on any PE. Fulfilling a local future twice is a
    /// usage error; a remote double fulfillment aborts the run.
    pub fn fulfill(&self, handle: FutureHandle, data: impl Into<Vec<u8>>) -> Result<(), RuntimeError> {
        self.fulfill_at(handle, data.into(), self.now())
    }

    fn fulfill_at(&self, handle: FutureHandle, data: Vec<u8>, timestamp: Nanos) -> Result<(), RuntimeError> {
        if handle.home_pe == self.id() {
            return self
                .0
                .futures
                .borrow_mut()
                .fulfill(handle.id, FutureValue { data, timestamp });
        }
        self.check_live()?;
        let env = Envelope {
            kind: EnvelopeKind::Future,
            dest: ChareId {
                collection: u32::MAX,
                index: 0,
                home_pe: handle.home_pe,
            },
            entry: 0,
            source_pe: self.id(),
            seq: 0,
            descriptors: Vec::new(),
            payload: Args::new().u64(handle.id).bytes(&data).into_bytes(),
        };
        self.clock().merge(timestamp);
        self.send_envelope(handle.home_pe, env, None)
    }

    pub fn is_fulfilled(&self, handle: FutureHandle) -> bool {
        handle.home_pe == self.id() && self.0.futures.borrow().is_fulfilled(handle.id)
    }

    /// Waits for a future homed on this PE. Resolves to its payload and
    /// merges the clock with the fulfillment time.
    pub fn wait_future(&self, handle: FutureHandle) -> impl Future<Output = Result<Vec<u8>, RuntimeError>> {
        let pe = self.clone();
        std::future::poll_fn(move |cx| {
            if handle.home_pe != pe.id() {
                return std::task::Poll::Ready(Err(RuntimeError::Usage(format!(
                    "future homed on PE {} awaited on PE {}",
                    handle.home_pe,
                    pe.id()
                ))));
            }
            pe.0.futures.borrow_mut().poll(handle.id, cx).map(|r| {
                r.map(|v| {
                    pe.clock().merge(v.timestamp);
                    v.data
                })
            })
        })
    }

    /// Callback that invokes `entry` on `target` when fired.
    pub fn callback(&self, target: ChareId, entry: EntryId) -> CompletionHandle {
        CompletionHandle::Callback(Callback { target, entry })
    }

    /// Delivers a transfer outcome to a completion handle.
    pub fn complete(&self, handle: CompletionHandle, result: TransferResult) {
        let ts = result.as_ref().map(|i| i.timestamp).unwrap_or_else(|_| self.now());
        let outcome = match handle {
            CompletionHandle::Ignore => Ok(()),
            CompletionHandle::Future(h) => self.fulfill_at(h, future::encode_transfer(&result), ts),
            CompletionHandle::Callback(cb) => {
                self.clock().merge(ts);
                self.send(cb.target, cb.entry, future::encode_transfer(&result))
            }
        };
        if let Err(e) = outcome {
            if !self.is_stopped() {
                self.abort(e);
            }
        }
    }

    /// A local completion slot paired with the handle that fills it.
    pub(crate) fn transfer_slot(&self) -> (Box<dyn FnOnce(TransferResult)>, Transfer) {
        let (tx, rx) = oneshot();
        (Box::new(move |r| tx.complete(r)), Transfer::new(rx, self.clock().clone()))
    }

    /// Builds the transport completion for a transfer whose outcome goes to
    /// `sink`; receives into host memory keep the data.
    pub(crate) fn transport_completion(
        &self,
        sink: impl FnOnce(&Pe, TransferResult) + 'static,
    ) -> CompletionFn {
        let weak = self.weak();
        Box::new(move |ev: TransferEvent| {
            if let Some(pe) = Pe::from_weak(&weak) {
                let r = ev.status.map_err(RuntimeError::from).map(|()| TransferInfo {
                    len: ev.len,
                    tag: ev.tag,
                    timestamp: ev.timestamp,
                    data: Some(ev.data),
                });
                sink(&pe, r);
            }
        })
    }

    // ---- scheduler internals ----

    fn local_chare(&self, id: ChareId) -> Option<Rc<RefCell<Box<dyn Chare>>>> {
        self.0.chares.borrow().get(&(id.collection, id.index)).cloned()
    }

    fn entry_spec(&self, dest: ChareId, entry: EntryId) -> Result<EntrySpec, RuntimeError> {
        let dispatch_err = |reason: String| RuntimeError::Dispatch {
            pe: self.id(),
            chare: dest,
            entry,
            reason,
        };
        let info = self
            .0
            .shared
            .arrays
            .get(dest.collection as usize)
            .ok_or_else(|| dispatch_err(format!("unknown collection {}", dest.collection)))?;
        let ty = &self.0.shared.types[info.type_id.0 as usize];
        ty.entries
            .get(entry as usize)
            .cloned()
            .ok_or_else(|| dispatch_err(format!("unknown entry id for chare type '{}'", ty.name)))
    }

    fn invoke(
        &self,
        dest: ChareId,
        entry: EntryId,
        f: impl FnOnce(&mut dyn Chare, &Pe) -> Result<(), RuntimeError>,
    ) -> Result<(), RuntimeError> {
        let spec = self.entry_spec(dest, entry)?;
        let chare = self.local_chare(dest).ok_or_else(|| RuntimeError::Dispatch {
            pe: self.id(),
            chare: dest,
            entry,
            reason: "no such element on this PE".into(),
        })?;
        let r = catch_unwind(AssertUnwindSafe(|| {
            let mut c = chare.borrow_mut();
            f(&mut **c, self)
        }));
        match r {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e @ (RuntimeError::Dispatch { .. } | RuntimeError::EntryPanic { .. }))) => Err(e),
            Ok(Err(e)) => Err(RuntimeError::Dispatch {
                pe: self.id(),
                chare: dest,
                entry,
                reason: e.to_string(),
            }),
            Err(p) => Err(RuntimeError::EntryPanic {
                pe: self.id(),
                chare: dest,
                entry,
                name: spec.name,
                message: panic_message(p),
            }),
        }
    }

    fn run_entry(&self, dest: ChareId, msg: Message) -> Result<(), RuntimeError> {
        self.0.stats.borrow_mut().dispatches += 1;
        let entry = msg.entry;
        self.invoke(dest, entry, move |c, pe| c.entry(pe, msg))
    }

    /// Entry point for every envelope the transport hands up, in arrival
    /// order. Releases envelopes to the runtime in per-source send order.
    pub(crate) fn on_envelope(&self, env: Envelope, ts: Nanos) {
        let mut ready = Vec::new();
        {
            let mut all = self.0.reorder.borrow_mut();
            let st = all.entry(env.source_pe).or_default();
            if env.seq == st.next {
                ready.push((env, ts));
                st.next += 1;
                while let Some(x) = st.held.remove(&st.next) {
                    ready.push(x);
                    st.next += 1;
                }
            } else {
                st.held.insert(env.seq, (env, ts));
            }
        }
        for (env, ts) in ready {
            self.accept(env, ts);
        }
    }

    fn accept(&self, env: Envelope, ts: Nanos) {
        self.0.stats.borrow_mut().envelopes_received[env.kind as usize] += 1;
        match env.kind {
            EnvelopeKind::Regular | EnvelopeKind::DeviceMeta => self.enqueue(Item::Envelope(env, ts)),
            EnvelopeKind::Future => {
                let mut r = ArgReader::new(&env.payload);
                let res = r
                    .u64()
                    .and_then(|id| Ok((id, r.bytes()?.to_vec())))
                    .map_err(RuntimeError::from)
                    .and_then(|(id, data)| {
                        self.0
                            .futures
                            .borrow_mut()
                            .fulfill(id, FutureValue { data, timestamp: ts })
                    });
                if let Err(e) = res {
                    self.abort(e);
                }
            }
            EnvelopeKind::Mpi => crate::mpi::on_envelope(self, env, ts),
        }
    }

    fn dispatch(&self, item: Item) -> Result<(), RuntimeError> {
        match item {
            Item::Envelope(env, ts) => {
                let key = (env.source_pe, env.dest);
                if let Some(lane) = self.0.lanes.borrow_mut().get_mut(&key) {
                    if lane.busy {
                        lane.queue.push_back((env, ts));
                        return Ok(());
                    }
                }
                self.process(env, ts)
            }
            Item::DeviceReady(op) => {
                let (key, dest, msg) = devmsg::finish_op(&op);
                self.clock().merge(msg.timestamp);
                self.run_entry(dest, msg)?;
                self.release_lane(key)
            }
            Item::Run(f) => {
                f(self);
                Ok(())
            }
        }
    }

    fn process(&self, env: Envelope, ts: Nanos) -> Result<(), RuntimeError> {
        self.clock().merge(ts);
        match env.kind {
            EnvelopeKind::Regular => {
                let dest = env.dest;
                let msg = Message {
                    entry: env.entry,
                    source_pe: env.source_pe,
                    args: env.payload,
                    device: Vec::new(),
                    timestamp: ts,
                };
                self.run_entry(dest, msg)
            }
            EnvelopeKind::DeviceMeta => {
                let key = (env.source_pe, env.dest);
                let spec = self.entry_spec(env.dest, env.entry)?;
                if !spec.has_post {
                    return Err(RuntimeError::Dispatch {
                        pe: self.id(),
                        chare: env.dest,
                        entry: env.entry,
                        reason: format!("entry '{}' received device arguments but has no post entry", spec.name),
                    });
                }
                let dest = env.dest;
                let entry = env.entry;
                let msg = Message {
                    entry,
                    source_pe: env.source_pe,
                    args: env.payload,
                    device: Vec::new(),
                    timestamp: ts,
                };
                let mut slots: Vec<DeviceSlot> = env
                    .descriptors
                    .iter()
                    .map(|d| DeviceSlot::new(d.size, d.tag))
                    .collect();
                self.0.stats.borrow_mut().post_dispatches += 1;
                self.invoke(dest, entry, |c, pe| c.post_entry(pe, &msg, &mut slots))?;
                if let Some(i) = slots.iter().position(|s| s.dest.is_none()) {
                    return Err(RuntimeError::UnboundDeviceSlot {
                        pe: self.id(),
                        entry,
                        name: spec.name,
                        slot: i,
                    });
                }
                self.0.lanes.borrow_mut().entry(key).or_default().busy = true;
                devmsg::start_op(self, key, dest, msg, slots);
                Ok(())
            }
            EnvelopeKind::Future | EnvelopeKind::Mpi => unreachable!("handled on arrival"),
        }
    }

    fn release_lane(&self, key: (PeId, ChareId)) -> Result<(), RuntimeError> {
        if let Some(lane) = self.0.lanes.borrow_mut().get_mut(&key) {
            lane.busy = false;
        }
        loop {
            let next = {
                let mut lanes = self.0.lanes.borrow_mut();
                let Some(lane) = lanes.get_mut(&key) else {
                    return Ok(());
                };
                if lane.busy {
                    return Ok(());
                }
                match lane.queue.pop_front() {
                    Some(x) => x,
                    None => {
                        lanes.remove(&key);
                        return Ok(());
                    }
                }
            };
            self.process(next.0, next.1)?;
        }
    }

    /// Drains the transport: fires completions, hands up eager envelopes and
    /// posts receives for announced large envelopes.
    fn pump(&self) -> usize {
        let events = self.worker().poll();
        let mut n = events.len();
        for e in events {
            e.fire();
        }
        let arrivals = self.worker().take_eager();
        n += arrivals.len();
        for a in arrivals {
            match Envelope::decode(&a.data) {
                Ok(env) => self.on_envelope(env, a.timestamp),
                Err(e) => self.abort(RuntimeError::Usage(format!(
                    "malformed envelope from PE {}: {e}",
                    a.from
                ))),
            }
        }
        loop {
            let probe_tag = MessageKind::Probe.wildcard_tag();
            let Some((_, len)) = self.worker().tag_probe(probe_tag, KIND_MASK) else {
                break;
            };
            let weak = self.weak();
            let cb: CompletionFn = Box::new(move |ev: TransferEvent| {
                let Some(pe) = Pe::from_weak(&weak) else { return };
                let from = ev.source.unwrap_or(PeId::MAX);
                match ev.status.map_err(RuntimeError::from).and_then(|()| {
                    Envelope::decode(&ev.data).map_err(|e| RuntimeError::Usage(e.to_string()))
                }) {
                    Ok(env) => pe.on_envelope(env, ev.timestamp),
                    Err(e) => pe.abort(RuntimeError::Usage(format!(
                        "large envelope from PE {from} failed: {e}"
                    ))),
                }
            });
            // The runtime reacts to the announcement as soon as it arrives.
            self.worker().tag_recv_at(probe_tag, KIND_MASK, len, 0, cb);
            n += 1;
        }
        n
    }

    fn drain_submits(&self) -> usize {
        let batch = std::mem::take(&mut *self.0.shared.submits[self.id() as usize].lock().unwrap());
        let n = batch.len();
        for (f, token) in batch {
            self.enqueue(Item::Run(Box::new(move |pe: &Pe| f(pe))));
            drop(token);
        }
        n
    }

    fn dispatch_queue(&self) -> usize {
        let n = self.0.queue.borrow().len();
        let mut done = 0;
        for _ in 0..n {
            if self.is_stopped() {
                break;
            }
            let Some((item, _token)) = self.0.queue.borrow_mut().pop_front() else {
                break;
            };
            done += 1;
            if let Err(e) = self.dispatch(item) {
                self.abort(e);
                break;
            }
        }
        done
    }

    fn teardown(&self) -> PeReport {
        let suspended = self.0.executor.clear();
        self.0.queue.borrow_mut().clear();
        self.0.lanes.borrow_mut().clear();
        self.0.reorder.borrow_mut().clear();
        std::mem::take(&mut *self.0.mpi.borrow_mut());
        let chares = std::mem::take(&mut *self.0.chares.borrow_mut());
        drop(chares);
        PeReport {
            pe: self.id(),
            stats: self.stats(),
            transport: self.transport_stats(),
            final_time: self.now(),
            suspended_tasks: suspended,
        }
    }
}

fn pe_main(
    id: PeId,
    shared: Arc<Shared>,
    fabric: Fabric,
    start_token: ActivityToken,
    init: Arc<dyn Fn(&Pe) + Send + Sync>,
) -> Option<PeReport> {
    let config = &shared.config;
    let clock = PeClock::new(config.time_mode, shared.epoch);
    let mut wcfg = WorkerConfig::from_config(config);
    if config.backend == Backend::Tcp {
        wcfg.bind = Some(
            config
                .rank_address(id)
                .map(str::to_string)
                .unwrap_or_else(|| "127.0.0.1:0".into()),
        );
    }
    let worker = match Worker::create(id, wcfg, &fabric, clock.clone()) {
        Ok(w) => Some(w),
        Err(e) => {
            shared.fail(RuntimeError::Startup {
                pe: id,
                reason: e.to_string(),
            });
            None
        }
    };
    if let Some(w) = &worker {
        shared.wakers.lock().unwrap()[id as usize] = Some(w.waker());
        shared.addrs.lock().unwrap()[id as usize] = w.listen_addr();
    }
    shared.barrier.wait();
    let worker = match worker {
        Some(w) if !shared.failed() => w,
        _ => {
            shared.barrier.wait();
            return None;
        }
    };
    let inner = PeInner {
        id,
        shared: shared.clone(),
        clock,
        worker: RefCell::new(worker),
        queue: RefCell::default(),
        chares: RefCell::default(),
        lanes: RefCell::default(),
        seq_out: RefCell::default(),
        reorder: RefCell::default(),
        futures: RefCell::default(),
        executor: Executor::new(shared.activity.clone()),
        device_counter: Cell::new(0),
        probe_counter: Cell::new(0),
        channels: RefCell::default(),
        mpi: RefCell::default(),
        stats: RefCell::default(),
    };
    let pe = Pe(Rc::new(inner));
    pe.0.executor.set_waker(pe.0.worker.borrow().waker());
    if config.backend == Backend::Tcp {
        if let Err(e) = connect_all(&pe) {
            shared.fail(RuntimeError::Startup {
                pe: id,
                reason: e.to_string(),
            });
        }
    }
    shared.barrier.wait();
    if shared.failed() {
        return Some(pe.teardown());
    }
    // Construct local elements, then run the per-PE init.
    let constructed = catch_unwind(AssertUnwindSafe(|| {
        for (aid, info) in shared.arrays.iter().enumerate() {
            let ty = &shared.types[info.type_id.0 as usize];
            for (idx, &home) in info.homes.iter().enumerate() {
                if home == id {
                    let c = (ty.factory)(&pe, idx as u32);
                    pe.0
                        .chares
                        .borrow_mut()
                        .insert((aid as u32, idx as u32), Rc::new(RefCell::new(c)));
                }
            }
        }
        init(&pe);
    }));
    if let Err(p) = constructed {
        shared.fail(RuntimeError::Startup {
            pe: id,
            reason: format!("initialization panicked: {}", panic_message(p)),
        });
    }
    drop(start_token);
    scheduler_loop(&pe);
    let report = pe.teardown();
    Some(report)
}

fn connect_all(pe: &Pe) -> Result<(), RuntimeError> {
    let n = pe.num_pes() as PeId;
    let me = pe.id();
    let addrs = pe.0.shared.addrs.lock().unwrap().clone();
    for peer in me + 1..n {
        let addr = addrs[peer as usize].ok_or_else(|| RuntimeError::Startup {
            pe: me,
            reason: format!("PE {peer} has no listen address"),
        })?;
        let got = pe.worker().connect(PeerSpec::Tcp(addr.to_string()))?;
        if got != peer {
            return Err(RuntimeError::Startup {
                pe: me,
                reason: format!("address {addr} answered as PE {got}, expected {peer}"),
            });
        }
    }
    let deadline = Instant::now() + Duration::from_millis(pe.config().connect_timeout_ms);
    loop {
        pe.worker().progress();
        let missing = (0..me).find(|&p| !pe.worker().is_connected(p));
        match missing {
            None => return Ok(()),
            Some(p) if Instant::now() >= deadline => {
                return Err(TransportError::Unreachable {
                    peer: format!("PE {p}"),
                    reason: "no incoming connection".into(),
                }
                .into())
            }
            Some(_) => pe.worker().wait_for_traffic(Duration::from_millis(5)),
        }
    }
}

fn scheduler_loop(pe: &Pe) {
    let shared = pe.0.shared.clone();
    loop {
        if shared.stopped() {
            break;
        }
        let busy = shared.activity.token();
        let mut did = pe.pump();
        did += pe.drain_submits();
        did += pe.dispatch_queue();
        did += pe.0.executor.run_ready();
        drop(busy);
        if did == 0 {
            if shared.policy == StopPolicy::Quiescence && shared.activity.is_quiescent() {
                shared.finish(EndReason::Quiescence);
                break;
            }
            pe.0.worker.borrow().wait_for_traffic(Duration::from_micros(200));
        }
    }
}
