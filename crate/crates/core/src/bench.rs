//! Latency and bandwidth microbenchmarks between PEs 0 and 1.
//!
//! Latency is a ping-pong: one-way latency is half the mean round trip
//! measured on PE 0. Bandwidth sends a window of back-to-back messages and
//! waits for a small reply per window. In host-staging mode every device
//! payload is copied to host memory before it is sent and back to device
//! memory after it arrives; in device mode the device buffer is handed to
//! the communication layer directly.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::future::Future;
use std::path::Path;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Poll, Waker};

use serde::Serialize;
use thiserror::Error;

use crate::channel::{Channel, RecvBuf, SendBuf};
use crate::config::Config;
use crate::device::{DeviceBuffer, DeviceRegion};
use crate::devmsg::DeviceSend;
use crate::mpi::{self, Buffer, Datatype, Mpi};
use crate::runtime::{
    ArgReader, Args, ChareId, ChareType, Chare, DeviceSlot, Message, Pe, Runtime, RuntimeError,
};
use crate::time::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Latency,
    Bandwidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum Api {
    #[serde(rename = "charm-messaging")]
    CharmMessaging,
    #[serde(rename = "charm-channel")]
    CharmChannel,
    #[serde(rename = "mpi")]
    Mpi,
}

/// `Host` stages device data through host memory; `Device` sends device
/// buffers directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Host,
    Device,
}

impl Benchmark {
    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Latency => "latency",
            Benchmark::Bandwidth => "bandwidth",
        }
    }
}

impl Api {
    pub fn as_str(self) -> &'static str {
        match self {
            Api::CharmMessaging => "charm-messaging",
            Api::CharmChannel => "charm-channel",
            Api::Mpi => "mpi",
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Host => "host",
            Mode::Device => "device",
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid size list '{0}': expected START:END:xFACTOR, START:END:+STEP or a comma list")]
    Sizes(String),
    #[error("invalid benchmark setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("cannot write CSV: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub benchmark: Benchmark,
    pub api: Api,
    pub mode: Mode,
    /// Message sizes in bytes, ascending.
    pub sizes: Vec<usize>,
    /// Timed iterations per size; `None` picks by size.
    pub iterations: Option<usize>,
    /// Untimed iterations per size; `None` picks by size.
    pub warmup: Option<usize>,
    pub window: usize,
}

/// Sizes up to this use the small-message iteration defaults.
pub const SMALL_MESSAGE: usize = 8192;

impl BenchConfig {
    pub fn new(benchmark: Benchmark, api: Api, mode: Mode) -> Self {
        BenchConfig {
            benchmark,
            api,
            mode,
            sizes: default_sizes(),
            iterations: None,
            warmup: None,
            window: 64,
        }
    }

    /// (warmup, timed) iterations for one size.
    pub fn counts(&self, size: usize) -> (usize, usize) {
        let (w, i) = if size <= SMALL_MESSAGE { (100, 1000) } else { (10, 100) };
        (self.warmup.unwrap_or(w), self.iterations.unwrap_or(i))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.sizes.is_empty() {
            return Err(BenchError::Setup("no message sizes".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(BenchError::Setup("sizes must be ascending".into()));
        }
        if self.iterations == Some(0) {
            return Err(BenchError::Setup("iterations must be positive".into()));
        }
        if self.window == 0 {
            return Err(BenchError::Setup("window must be positive".into()));
        }
        Ok(())
    }
}

/// 1 B to 4 MiB, doubling.
pub fn default_sizes() -> Vec<usize> {
    (0..=22).map(|p| 1usize << p).collect()
}

/// Parses `START:END:xFACTOR`, `START:END:+STEP` or `a,b,c`.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, BenchError> {
    let bad = || BenchError::Sizes(s.to_string());
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let parts: Vec<&str> = s.split(':').collect();
    let sizes = match parts.as_slice() {
        [one] => one.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        [a, b] => range(num(a)?, num(b)?, |v| v.checked_mul(2)),
        [a, b, step] => {
            let (start, end) = (num(a)?, num(b)?);
            if let Some(f) = step.strip_prefix('x') {
                let f = num(f)?;
                if f < 2 || start == 0 {
                    return Err(bad());
                }
                range(start, end, |v| v.checked_mul(f))
            } else if let Some(d) = step.strip_prefix('+') {
                let d = num(d)?;
                if d == 0 {
                    return Err(bad());
                }
                range(start, end, |v| v.checked_add(d))
            } else {
                return Err(bad());
            }
        }
        _ => return Err(bad()),
    };
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad());
    }
    Ok(sizes)
}

fn range(start: usize, end: usize, next: impl Fn(usize) -> Option<usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut v = Some(start);
    while let Some(x) = v {
        if x > end {
            break;
        }
        out.push(x);
        v = next(x);
    }
    out
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub benchmark: String,
    pub api: String,
    pub mode: String,
    pub size_bytes: usize,
    pub metric: String,
    pub value: f64,
    pub unit: String,
    pub time_mode: String,
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Fill byte `j` of the payload sent by `role` for `size`.
fn pattern(seed: u64, role: u32, size: usize) -> Vec<u8> {
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ size as u64;
    let salt = (role as u8).wrapping_mul(0x5B);
    (0..size)
        .map(|j| (base.wrapping_add((j as u64).wrapping_mul(0x2545_F491)) >> 7) as u8 ^ salt)
        .collect()
}

/// Entry messages delivered to a bench chare, awaited by its driver.
#[derive(Default)]
struct Inbox {
    queue: VecDeque<Message>,
    waker: Option<Waker>,
}

type Pending = Pin<Box<dyn Future<Output = Result<Option<Vec<u8>>, RuntimeError>>>>;

enum Payload {
    Host(Vec<u8>),
    Device(DeviceRegion),
}

enum Dest {
    Host(usize),
    Device(DeviceRegion),
}

enum Port {
    Messaging { peer: ChareId },
    Channel(Channel),
    Mpi(Mpi, u32),
}

const DATA: u32 = 0;
const MPI_TAG: i32 = 1;
const ACK_LEN: usize = 4;

struct State {
    pe: Pe,
    role: u32,
    me: ChareId,
    peer: ChareId,
    send_buf: DeviceBuffer,
    recv_buf: DeviceBuffer,
    inbox: Rc<RefCell<Inbox>>,
    port: RefCell<Option<Rc<Port>>>,
}

impl State {
    fn port(&self) -> Rc<Port> {
        self.port.borrow().clone().expect("port opened")
    }

    fn send(&self, p: Payload) -> Result<Pending, RuntimeError> {
        match &*self.port() {
            Port::Messaging { peer } => {
                match p {
                    Payload::Host(data) => self.pe.send(*peer, DATA, Args::new().bytes(&data))?,
                    Payload::Device(region) => {
                        self.pe
                            .send_entry(*peer, DATA, Args::new(), vec![DeviceSend::new(region)])?
                    }
                }
                Ok(Box::pin(std::future::ready(Ok(None))))
            }
            Port::Channel(ch) => {
                let t = ch.send_async(match p {
                    Payload::Host(d) => SendBuf::Host(d),
                    Payload::Device(r) => SendBuf::Device(r),
                })?;
                Ok(Box::pin(async move { t.await.map(|_| None) }))
            }
            Port::Mpi(m, peer) => {
                let (buf, n) = match p {
                    Payload::Host(d) => {
                        let n = d.len();
                        (Buffer::Host(d), n)
                    }
                    Payload::Device(r) => (Buffer::Device(r), r.len as usize),
                };
                let req = m.isend(buf, n, Datatype::Byte, *peer, MPI_TAG)?;
                Ok(Box::pin(async move { status_result(req.wait().await).map(|()| None) }))
            }
        }
    }

    fn recv(&self, d: Dest) -> Result<Pending, RuntimeError> {
        match &*self.port() {
            Port::Messaging { .. } => {
                let pe = self.pe.clone();
                let me = self.me;
                let inbox = self.inbox.clone();
                Ok(Box::pin(async move {
                    let msg = next_message(&inbox).await;
                    pe.clock().merge(msg.timestamp);
                    if msg.device.is_empty() {
                        Ok(Some(ArgReader::new(&msg.args).bytes()?.to_vec()))
                    } else {
                        for a in &msg.device {
                            a.status.clone().map_err(|e| RuntimeError::Task {
                                pe: me.home_pe,
                                reason: format!("device payload failed: {e}"),
                            })?;
                        }
                        Ok(None)
                    }
                }))
            }
            Port::Channel(ch) => {
                let t = ch.recv_async(match d {
                    Dest::Host(capacity) => RecvBuf::Host { capacity },
                    Dest::Device(r) => RecvBuf::Device(r),
                })?;
                Ok(Box::pin(async move { t.await.map(|i| i.data) }))
            }
            Port::Mpi(m, peer) => {
                let (buf, n) = match d {
                    Dest::Host(c) => (Buffer::Host(Vec::new()), c),
                    Dest::Device(r) => (Buffer::Device(r), r.len as usize),
                };
                let req = m.irecv(buf, n, Datatype::Byte, *peer, MPI_TAG)?;
                Ok(Box::pin(async move {
                    let s = req.wait().await;
                    let data = s.data.clone();
                    status_result(s).map(|_| data)
                }))
            }
        }
    }

}

fn status_result(s: mpi::Status) -> Result<(), RuntimeError> {
    match s.error {
        None => Ok(()),
        Some(e) => Err(RuntimeError::Task {
            pe: s.source,
            reason: e,
        }),
    }
}

fn next_message(inbox: &RefCell<Inbox>) -> impl Future<Output = Message> + '_ {
    std::future::poll_fn(move |cx| {
        let mut inbox = inbox.borrow_mut();
        match inbox.queue.pop_front() {
            Some(m) => Poll::Ready(m),
            None => {
                inbox.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    })
}

struct BenchChare {
    state: Rc<State>,
}

impl Chare for BenchChare {
    fn entry(&mut self, _pe: &Pe, msg: Message) -> Result<(), RuntimeError> {
        let mut inbox = self.state.inbox.borrow_mut();
        inbox.queue.push_back(msg);
        if let Some(w) = inbox.waker.take() {
            w.wake();
        }
        Ok(())
    }

    fn post_entry(&mut self, _pe: &Pe, _msg: &Message, slots: &mut [DeviceSlot]) -> Result<(), RuntimeError> {
        for s in slots {
            let len = s.size.min(self.state.recv_buf.size());
            s.bind(self.state.recv_buf.slice(0, len));
        }
        Ok(())
    }
}

fn verify(state: &State, got: &[u8], size: usize, seed: u64) -> Result<(), RuntimeError> {
    if got != pattern(seed, 1 - state.role, size).as_slice() {
        return Err(RuntimeError::Task {
            pe: state.pe.id(),
            reason: format!("payload verification failed at {size} bytes"),
        });
    }
    Ok(())
}

/// Moves one data message from this side to the peer.
async fn send_one(state: &State, size: usize, mode: Mode) -> Result<Pending, RuntimeError> {
    let region = state.send_buf.slice(0, size as u64);
    match mode {
        Mode::Device => state.send(Payload::Device(region)),
        Mode::Host => {
            let mut host = vec![0u8; size];
            state.pe.device().copy_device_to_host(state.pe.clock(), &mut host, region)?;
            state.send(Payload::Host(host))
        }
    }
}

/// Receives one data message; returns the bytes now in the device buffer
/// when `check` is set.
async fn recv_one(state: &State, size: usize, mode: Mode, check: bool) -> Result<Option<Vec<u8>>, RuntimeError> {
    let region = state.recv_buf.slice(0, size as u64);
    match mode {
        Mode::Device => {
            state.recv(Dest::Device(region))?.await?;
        }
        Mode::Host => {
            let data = state.recv(Dest::Host(size))?.await?.unwrap_or_default();
            state.pe.device().copy_host_to_device(state.pe.clock(), region, &data)?;
        }
    }
    if check {
        Ok(Some(state.pe.device().read(region)?))
    } else {
        Ok(None)
    }
}

async fn latency(state: &State, cfg: &BenchConfig, size: usize, seed: u64) -> Result<Option<Nanos>, RuntimeError> {
    let (warm, iters) = cfg.counts(size);
    let total = warm + iters;
    let mut t0 = state.pe.now();
    for i in 0..total {
        if i == warm {
            t0 = state.pe.now();
        }
        let check = i == 0 || i == total - 1;
        if state.role == 0 {
            send_one(state, size, cfg.mode).await?.await?;
            if let Some(got) = recv_one(state, size, cfg.mode, check).await? {
                verify(state, &got, size, seed)?;
            }
        } else {
            if let Some(got) = recv_one(state, size, cfg.mode, check).await? {
                verify(state, &got, size, seed)?;
            }
            send_one(state, size, cfg.mode).await?.await?;
        }
    }
    let elapsed = state.pe.now() - t0;
    Ok((state.role == 0).then(|| elapsed / (2 * iters as u64)))
}

async fn bandwidth(state: &State, cfg: &BenchConfig, size: usize, seed: u64) -> Result<Option<Nanos>, RuntimeError> {
    let (warm, iters) = cfg.counts(size);
    let total = warm + iters;
    let w = cfg.window;
    let pe = &state.pe;
    let mut t0 = pe.now();
    for i in 0..total {
        if i == warm {
            t0 = pe.now();
        }
        let check = i == 0 || i == total - 1;
        if state.role == 0 {
            let region = state.send_buf.slice(0, size as u64);
            let mut sends = Vec::with_capacity(w);
            match cfg.mode {
                Mode::Device => {
                    for _ in 0..w {
                        sends.push(state.send(Payload::Device(region))?);
                    }
                }
                Mode::Host => {
                    let mut staged = Vec::with_capacity(w);
                    for _ in 0..w {
                        let mut host = vec![0u8; size];
                        pe.device().copy_device_to_host(pe.clock(), &mut host, region)?;
                        staged.push(host);
                    }
                    for host in staged {
                        sends.push(state.send(Payload::Host(host))?);
                    }
                }
            }
            for s in sends {
                s.await?;
            }
            state.recv(Dest::Host(ACK_LEN))?.await?;
        } else {
            let region = state.recv_buf.slice(0, size as u64);
            let mut recvs = Vec::with_capacity(w);
            for _ in 0..w {
                recvs.push(state.recv(match cfg.mode {
                    Mode::Device => Dest::Device(region),
                    Mode::Host => Dest::Host(size),
                })?);
            }
            let mut landed = Vec::with_capacity(w);
            for r in recvs {
                landed.push(r.await?);
            }
            if cfg.mode == Mode::Host {
                for data in landed {
                    pe.device().copy_host_to_device(pe.clock(), region, &data.unwrap_or_default())?;
                }
            }
            if check {
                verify(state, &pe.device().read(region)?, size, seed)?;
            }
            state.send(Payload::Host(vec![0; ACK_LEN]))?.await?;
        }
    }
    let elapsed = pe.now() - t0;
    Ok((state.role == 0).then(|| elapsed))
}

async fn drive(state: Rc<State>, cfg: Arc<BenchConfig>, seed: u64, out: Arc<Mutex<Vec<BenchRow>>>) -> Result<(), RuntimeError> {
    let pe = state.pe.clone();
    let port = match cfg.api {
        Api::CharmMessaging => Port::Messaging { peer: state.peer },
        Api::CharmChannel => Port::Channel(Channel::create(&pe, 0, state.me, state.peer)?),
        Api::Mpi => Port::Mpi(mpi::mpi_init(&pe, pe.num_pes())?, 1 - state.role),
    };
    *state.port.borrow_mut() = Some(Rc::new(port));
    let time_mode = pe.config().time_mode.as_str();
    for &size in &cfg.sizes {
        pe.device().write(state.send_buf.slice(0, size as u64), &pattern(seed, state.role, size))?;
        let row = match cfg.benchmark {
            Benchmark::Latency => latency(&state, &cfg, size, seed).await?.map(|ns| ("latency", ns as f64 / 1e3, "us")),
            Benchmark::Bandwidth => bandwidth(&state, &cfg, size, seed).await?.map(|ns| {
                let (_, iters) = cfg.counts(size);
                let bytes = (size * cfg.window * iters) as f64;
                // bytes per ns is GB/s; report decimal MB/s.
                ("bandwidth", if ns == 0 { f64::INFINITY } else { bytes / ns as f64 * 1e3 }, "MB/s")
            }),
        };
        if let Some((metric, value, unit)) = row {
            out.lock().unwrap().push(BenchRow {
                benchmark: cfg.benchmark.as_str().into(),
                api: cfg.api.as_str().into(),
                mode: cfg.mode.as_str().into(),
                size_bytes: size,
                metric: metric.into(),
                value,
                unit: unit.into(),
                time_mode: time_mode.into(),
            });
        }
    }
    Ok(())
}

/// Runs one benchmark over all sizes and returns one row per size.
pub fn run(config: &Config, cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    cfg.validate()?;
    if config.workers < 2 {
        return Err(BenchError::Setup(format!(
            "the benchmark needs 2 PEs, got {}",
            config.workers
        )));
    }
    let rt = Runtime::new(config.clone())?;
    let max = *cfg.sizes.last().expect("validated") as u64;
    let cfg = Arc::new(cfg.clone());
    let out = Arc::new(Mutex::new(Vec::new()));
    let seed = config.seed;
    let (c2, o2) = (cfg.clone(), out.clone());
    let ty = rt.register(
        ChareType::new("bench", move |pe: &Pe, index: u32| {
            let alloc = |n| pe.device().alloc(pe.id(), n).expect("bench buffers fit in device memory");
            let state = Rc::new(State {
                pe: pe.clone(),
                role: index,
                me: ChareId {
                    collection: 0,
                    index,
                    home_pe: index,
                },
                peer: ChareId {
                    collection: 0,
                    index: 1 - index,
                    home_pe: 1 - index,
                },
                send_buf: alloc(max),
                recv_buf: alloc(max),
                inbox: Rc::default(),
                port: RefCell::new(None),
            });
            pe.spawn_fallible(drive(state.clone(), c2.clone(), seed, o2.clone()));
            BenchChare { state }
        })
        .entry_with_post("data"),
    )?;
    let arr = rt.create_array_on(ty, vec![0, 1])?;
    debug_assert_eq!(arr.id(), 0);
    rt.run(|_| {})?;
    let rows = std::mem::take(&mut *out.lock().unwrap());
    Ok(rows)
}
