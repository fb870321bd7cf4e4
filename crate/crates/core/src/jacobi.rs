//! 3D Jacobi proxy: one block per PE, device-resident fields, halo exchange
//! with up to six neighbors through one of five communication modes.
//!
//! Update rule: each interior cell becomes the mean of its six face
//! neighbors, summed in the order x-, x+, y-, y+, z-, z+. The ghost layer
//! before x = 0 is held at 1.0; every other outer boundary is 0.0. Every
//! mode moves the same bytes, so all modes produce bitwise identical
//! fields.

use std::cell::{Cell, RefCell};
use std::future::Future;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Poll, Waker};

use serde::Serialize;
use thiserror::Error;

use crate::channel::{Channel, RecvBuf, SendBuf};
use crate::config::Config;
use crate::device::DeviceBuffer;
use crate::devmsg::DeviceSend;
use crate::mpi::{self, Buffer, Datatype, Mpi};
use crate::runtime::{
    ArgReader, Args, Chare, ChareId, ChareType, DeviceSlot, Message, Pe, Runtime, RuntimeError,
};
use crate::time::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobiMode {
    HostStaging,
    MessagingDevice,
    ChannelDevice,
    MpiHost,
    MpiDevice,
}

impl JacobiMode {
    pub const ALL: [JacobiMode; 5] = [
        JacobiMode::HostStaging,
        JacobiMode::MessagingDevice,
        JacobiMode::ChannelDevice,
        JacobiMode::MpiHost,
        JacobiMode::MpiDevice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JacobiMode::HostStaging => "host-staging",
            JacobiMode::MessagingDevice => "messaging-device",
            JacobiMode::ChannelDevice => "channel-device",
            JacobiMode::MpiHost => "mpi-host",
            JacobiMode::MpiDevice => "mpi-device",
        }
    }
}

#[derive(Debug, Error)]
pub enum JacobiError {
    #[error("no decomposition of {dims:?} into {blocks} blocks divides every dimension")]
    NoDecomposition { dims: [usize; 3], blocks: usize },
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("cannot write CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Block grid `(px, py, pz)` of a decomposition.
pub type Grid = [usize; 3];

/// Total area of the faces between blocks for `grid` over `dims`.
pub fn interface_area(dims: [usize; 3], grid: Grid) -> usize {
    let [nx, ny, nz] = dims;
    (grid[0] - 1) * ny * nz + (grid[1] - 1) * nx * nz + (grid[2] - 1) * nx * ny
}

/// Chooses the factorization of `blocks` with the least interface area
/// among those dividing every dimension; ties go to the smallest px, then
/// the smallest py.
pub fn decompose(dims: [usize; 3], blocks: usize) -> Result<Grid, JacobiError> {
    let none = || JacobiError::NoDecomposition { dims, blocks };
    if blocks == 0 || dims.contains(&0) {
        return Err(none());
    }
    let mut best: Option<(usize, Grid)> = None;
    for px in (1..=blocks).filter(|p| blocks % p == 0) {
        let rest = blocks / px;
        for py in (1..=rest).filter(|p| rest % p == 0) {
            let g = [px, py, rest / py];
            if (0..3).any(|a| dims[a] % g[a] != 0) {
                continue;
            }
            let area = interface_area(dims, g);
            if best.is_none_or(|(b, _)| area < b) {
                best = Some((area, g));
            }
        }
    }
    best.map(|(_, g)| g).ok_or_else(none)
}

/// Block geometry of one PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub grid: Grid,
    pub coords: [usize; 3],
    /// Interior cells per dimension.
    pub size: [usize; 3],
}

impl Block {
    pub fn new(dims: [usize; 3], grid: Grid, index: usize) -> Self {
        let coords = [
            index / (grid[1] * grid[2]),
            (index / grid[2]) % grid[1],
            index % grid[2],
        ];
        Block {
            grid,
            coords,
            size: [dims[0] / grid[0], dims[1] / grid[1], dims[2] / grid[2]],
        }
    }

    pub fn index_of(grid: Grid, c: [usize; 3]) -> usize {
        (c[0] * grid[1] + c[1]) * grid[2] + c[2]
    }

    /// Neighbor block index across face `dir` (x-, x+, y-, y+, z-, z+).
    pub fn neighbor(&self, dir: usize) -> Option<usize> {
        let axis = dir / 2;
        let mut c = self.coords;
        if dir % 2 == 0 {
            c[axis] = c[axis].checked_sub(1)?;
        } else {
            c[axis] += 1;
            if c[axis] >= self.grid[axis] {
                return None;
            }
        }
        Some(Self::index_of(self.grid, c))
    }

    pub fn neighbor_count(&self) -> usize {
        (0..6).filter(|&d| self.neighbor(d).is_some()).count()
    }

    /// Cells in the ghosted array.
    pub fn cells(&self) -> usize {
        self.size.iter().map(|s| s + 2).product()
    }

    pub fn face_len(&self, dir: usize) -> usize {
        let [bx, by, bz] = self.size;
        match dir / 2 {
            0 => by * bz,
            1 => bx * bz,
            _ => bx * by,
        }
    }
}

/// Offset of cell (i, j, k) in a ghosted array of interior size `s`.
#[inline]
fn at(s: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * (s[1] + 2) + j) * (s[2] + 2) + k
}

/// Visits the cells of the layer `layer` (0..=size+1 along the face axis)
/// on face axis `axis`, in a fixed order shared by sender and receiver.
fn for_face(s: [usize; 3], axis: usize, layer: usize, mut f: impl FnMut(usize)) {
    match axis {
        0 => {
            for j in 1..=s[1] {
                for k in 1..=s[2] {
                    f(at(s, layer, j, k));
                }
            }
        }
        1 => {
            for i in 1..=s[0] {
                for k in 1..=s[2] {
                    f(at(s, i, layer, k));
                }
            }
        }
        _ => {
            for i in 1..=s[0] {
                for j in 1..=s[1] {
                    f(at(s, i, j, layer));
                }
            }
        }
    }
}

/// Interior layer sent across face `dir`.
fn send_layer(s: [usize; 3], dir: usize) -> usize {
    if dir % 2 == 0 {
        1
    } else {
        s[dir / 2]
    }
}

/// Ghost layer filled from face `dir`.
fn ghost_layer(s: [usize; 3], dir: usize) -> usize {
    if dir % 2 == 0 {
        0
    } else {
        s[dir / 2] + 1
    }
}

pub fn pack_face(s: [usize; 3], field: &[f64], dir: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for_face(s, dir / 2, send_layer(s, dir), |o| out.push(field[o]));
    out
}

pub fn unpack_face(s: [usize; 3], field: &mut [f64], dir: usize, face: &[f64]) {
    let mut it = face.iter();
    for_face(s, dir / 2, ghost_layer(s, dir), |o| field[o] = *it.next().expect("face length"));
}

/// Sets the fixed boundary ghosts of a block: 1.0 before x = 0.
pub fn apply_boundary(b: &Block, field: &mut [f64]) {
    if b.coords[0] == 0 {
        for_face(b.size, 0, 0, |o| field[o] = 1.0);
    }
}

/// One Jacobi sweep over the interior of `cur` into `next`.
pub fn sweep(s: [usize; 3], cur: &[f64], next: &mut [f64]) {
    let sj = s[2] + 2;
    let si = (s[1] + 2) * sj;
    for i in 1..=s[0] {
        for j in 1..=s[1] {
            for k in 1..=s[2] {
                let o = at(s, i, j, k);
                let sum = cur[o - si] + cur[o + si] + cur[o - sj] + cur[o + sj] + cur[o - 1] + cur[o + 1];
                next[o] = sum / 6.0;
            }
        }
    }
}

/// Copies the interior of a ghosted block into its place in a global
/// `nx * ny * nz` array (x slowest).
pub fn scatter_interior(dims: [usize; 3], b: &Block, field: &[f64], global: &mut [f64]) {
    let s = b.size;
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let g = [b.coords[0] * s[0] + i, b.coords[1] * s[1] + j, b.coords[2] * s[2] + k];
                global[(g[0] * dims[1] + g[1]) * dims[2] + g[2]] = field[at(s, i + 1, j + 1, k + 1)];
            }
        }
    }
}

/// Single-block reference solution; returns the interior (x slowest).
pub fn sequential(dims: [usize; 3], iters: usize) -> Vec<f64> {
    let b = Block::new(dims, [1, 1, 1], 0);
    let mut cur = vec![0.0; b.cells()];
    apply_boundary(&b, &mut cur);
    let mut next = cur.clone();
    for _ in 0..iters {
        sweep(b.size, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    let mut out = vec![0.0; dims.iter().product()];
    scatter_interior(dims, &b, &cur, &mut out);
    out
}

pub fn max_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JacobiConfig {
    pub dims: [usize; 3],
    pub iters: usize,
    pub mode: JacobiMode,
    /// Collect the final field into [`JacobiResult::field`].
    pub gather: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobiResult {
    pub grid: Grid,
    /// Slowest PE's time for all iterations.
    pub total_time: Nanos,
    /// Slowest PE's time spent exchanging halos.
    pub comm_time: Nanos,
    /// Halo messages sent, summed over PEs.
    pub halo_sends: u64,
    pub field: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobiRow {
    pub mode: String,
    pub pes: usize,
    pub dims: String,
    pub iters: usize,
    pub total_time: f64,
    pub comm_time: f64,
    pub unit: String,
    pub time_mode: String,
}

impl JacobiRow {
    pub fn new(cfg: &JacobiConfig, pes: usize, r: &JacobiResult, time_mode: &str) -> Self {
        JacobiRow {
            mode: cfg.mode.as_str().into(),
            pes,
            dims: format!("{}x{}x{}", cfg.dims[0], cfg.dims[1], cfg.dims[2]),
            iters: cfg.iters,
            total_time: r.total_time as f64 / 1e3,
            comm_time: r.comm_time as f64 / 1e3,
            unit: "us".into(),
            time_mode: time_mode.into(),
        }
    }
}

pub fn write_csv(path: impl AsRef<std::path::Path>, rows: &[JacobiRow]) -> Result<(), JacobiError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Global dims for a weak-scaling run: each PE keeps a `base`-sized block.
pub fn weak_dims(base: [usize; 3], pes: usize) -> Result<[usize; 3], JacobiError> {
    let grid = decompose([base[0] * pes, base[1] * pes, base[2] * pes], pes)?;
    Ok([base[0] * grid[0], base[1] * grid[1], base[2] * grid[2]])
}

const HALO_HOST: u32 = 0;
const HALO_DEVICE: u32 = 1;

#[derive(Default)]
struct Arrivals {
    count: [usize; 2],
    waker: Option<Waker>,
}

enum Link {
    None,
    Channel(Channel),
}

struct BlockState {
    pe: Pe,
    block: Block,
    me: ChareId,
    cur: Cell<DeviceBuffer>,
    next: Cell<DeviceBuffer>,
    send_stage: Vec<Option<DeviceBuffer>>,
    /// Receive staging per iteration parity and face.
    recv_stage: [Vec<Option<DeviceBuffer>>; 2],
    arrivals: RefCell<Arrivals>,
}

impl BlockState {
    fn peer(&self, dir: usize) -> Option<ChareId> {
        self.block.neighbor(dir).map(|n| ChareId {
            collection: self.me.collection,
            index: n as u32,
            home_pe: n as u32,
        })
    }

    fn arrived(&self, parity: usize) {
        let mut a = self.arrivals.borrow_mut();
        a.count[parity] += 1;
        if let Some(w) = a.waker.take() {
            w.wake();
        }
    }

    fn all_arrived(&self, parity: usize) -> impl Future<Output = ()> + '_ {
        let want = self.block.neighbor_count();
        std::future::poll_fn(move |cx| {
            let mut a = self.arrivals.borrow_mut();
            if a.count[parity] >= want {
                a.count[parity] -= want;
                Poll::Ready(())
            } else {
                a.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        })
    }

    fn stage(&self, parity: usize, dir: usize) -> DeviceBuffer {
        self.recv_stage[parity][dir].expect("staging buffer for a neighbor face")
    }
}

struct BlockChare {
    state: Rc<BlockState>,
}

fn halo_header(msg: &Message) -> Result<(usize, usize), RuntimeError> {
    let mut r = ArgReader::new(&msg.args);
    let iter = r.u64()? as usize;
    let dir = r.u64()? as usize;
    if dir >= 6 {
        return Err(RuntimeError::Usage(format!("bad halo direction {dir}")));
    }
    Ok((iter, dir))
}

impl Chare for BlockChare {
    fn entry(&mut self, pe: &Pe, msg: Message) -> Result<(), RuntimeError> {
        let (iter, dir) = halo_header(&msg)?;
        let parity = iter % 2;
        let st = &self.state;
        match msg.entry {
            HALO_HOST => {
                let mut r = ArgReader::new(&msg.args);
                r.u64()?;
                r.u64()?;
                let bytes = r.bytes()?;
                pe.device()
                    .copy_host_to_device(pe.clock(), st.stage(parity, dir), bytes)?;
            }
            _ => {
                for a in &msg.device {
                    a.status.clone()?;
                }
            }
        }
        st.arrived(parity);
        Ok(())
    }

    fn post_entry(&mut self, _pe: &Pe, msg: &Message, slots: &mut [DeviceSlot]) -> Result<(), RuntimeError> {
        let (iter, dir) = halo_header(msg)?;
        for s in slots {
            s.bind(self.state.stage(iter % 2, dir));
        }
        Ok(())
    }
}

async fn exchange(st: &BlockState, mode: JacobiMode, iter: usize, links: &[Link], mpi: Option<&Mpi>) -> Result<(), RuntimeError> {
    let pe = &st.pe;
    let dev = pe.device();
    let s = st.block.size;
    let parity = iter % 2;
    let cur = st.cur.get();
    let dirs: Vec<usize> = (0..6).filter(|&d| st.block.neighbor(d).is_some()).collect();
    // Pack faces on the device.
    for &d in &dirs {
        let face = dev.with_f64(&cur, |f| pack_face(s, f, d))?;
        dev.write(st.send_stage[d].expect("send stage"), bytemuck::cast_slice(&face))?;
    }
    let mut pending = Vec::new();
    let mut host_recvs = Vec::new();
    match mode {
        JacobiMode::HostStaging | JacobiMode::MessagingDevice => {
            for &d in &dirs {
                let peer = st.peer(d).expect("neighbor");
                let header = Args::new().u64(iter as u64).u64((d ^ 1) as u64);
                let stage = st.send_stage[d].expect("send stage");
                if mode == JacobiMode::HostStaging {
                    let mut host = vec![0u8; stage.len()];
                    dev.copy_device_to_host(pe.clock(), &mut host, stage)?;
                    pe.send(peer, HALO_HOST, header.bytes(&host))?;
                } else {
                    pe.send_entry(peer, HALO_DEVICE, header, vec![DeviceSend::new(stage)])?;
                }
            }
            st.all_arrived(parity).await;
        }
        JacobiMode::ChannelDevice => {
            for &d in &dirs {
                let Link::Channel(ch) = &links[d] else { unreachable!("channel per neighbor") };
                pending.push(ch.recv_async(RecvBuf::Device(st.stage(parity, d).region()))?);
                pending.push(ch.send_async(SendBuf::Device(st.send_stage[d].expect("send stage").region()))?);
            }
            for t in pending.drain(..) {
                t.await?;
            }
        }
        JacobiMode::MpiHost | JacobiMode::MpiDevice => {
            let m = mpi.expect("mpi rank");
            let mut reqs = Vec::new();
            for &d in &dirs {
                let nb = st.block.neighbor(d).expect("neighbor") as u32;
                let stage = st.stage(parity, d);
                let n = st.block.face_len(d);
                // Tags name the receiver's ghost face.
                let tag = (d ^ 1) as i32;
                let from_tag = d as i32;
                if mode == JacobiMode::MpiHost {
                    host_recvs.push((reqs.len(), stage));
                    reqs.push(m.irecv(Buffer::Host(Vec::new()), n, Datatype::F64, nb, from_tag)?);
                    let mut host = vec![0u8; n * 8];
                    dev.copy_device_to_host(pe.clock(), &mut host, st.send_stage[d].expect("send stage"))?;
                    reqs.push(m.isend(Buffer::Host(host), n, Datatype::F64, nb, tag)?);
                } else {
                    reqs.push(m.irecv(Buffer::Device(stage.region()), n, Datatype::F64, nb, from_tag)?);
                    let src = st.send_stage[d].expect("send stage").region();
                    reqs.push(m.isend(Buffer::Device(src), n, Datatype::F64, nb, tag)?);
                }
            }
            let statuses = m.waitall(reqs).await;
            for s in &statuses {
                if let Some(e) = &s.error {
                    return Err(RuntimeError::Task {
                        pe: pe.id(),
                        reason: format!("halo transfer failed: {e}"),
                    });
                }
            }
            for (i, stage) in host_recvs {
                let data = statuses[i].data.as_deref().unwrap_or_default();
                dev.copy_host_to_device(pe.clock(), stage, data)?;
            }
        }
    }
    // Unpack ghosts on the device.
    for &d in &dirs {
        let stage = st.stage(parity, d);
        let face: Vec<f64> = dev
            .read(stage)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        dev.with_f64_mut(&cur, |f| unpack_face(s, f, d, &face))?;
    }
    Ok(())
}

struct Outcome {
    total: Vec<Nanos>,
    comm: Vec<Nanos>,
    field: Option<Vec<f64>>,
}

async fn drive(st: Rc<BlockState>, cfg: Arc<JacobiConfig>, out: Arc<Mutex<Outcome>>) -> Result<(), RuntimeError> {
    let pe = st.pe.clone();
    let dev = pe.device().clone();
    let mut links: Vec<Link> = (0..6).map(|_| Link::None).collect();
    if cfg.mode == JacobiMode::ChannelDevice {
        for (d, link) in links.iter_mut().enumerate() {
            if let Some(peer) = st.peer(d) {
                let lo = st.me.index.min(peer.index) as u64;
                *link = Link::Channel(Channel::create(&pe, lo * 3 + (d / 2) as u64, st.me, peer)?);
            }
        }
    }
    let mpi = match cfg.mode {
        JacobiMode::MpiHost | JacobiMode::MpiDevice => Some(mpi::mpi_init(&pe, pe.num_pes())?),
        _ => None,
    };
    let s = st.block.size;
    let start = pe.now();
    let mut comm: Nanos = 0;
    for iter in 0..cfg.iters {
        let t0 = pe.now();
        exchange(&st, cfg.mode, iter, &links, mpi.as_ref()).await?;
        comm += pe.now() - t0;
        let (cur, next) = (st.cur.get(), st.next.get());
        dev.with_f64(&cur, |c| dev.with_f64_mut(&next, |n| sweep(s, c, n)))??;
        st.cur.set(next);
        st.next.set(cur);
    }
    let total = pe.now() - start;
    let mut o = out.lock().unwrap();
    o.total.push(total);
    o.comm.push(comm);
    if let Some(global) = o.field.as_mut() {
        dev.with_f64(&st.cur.get(), |f| scatter_interior(cfg.dims, &st.block, f, global))?;
    }
    Ok(())
}

/// Runs the proxy on every PE of `config`.
pub fn run(config: &Config, cfg: &JacobiConfig) -> Result<JacobiResult, JacobiError> {
    let pes = config.workers;
    let grid = decompose(cfg.dims, pes)?;
    let rt = Runtime::new(config.clone())?;
    let cfg = Arc::new(cfg.clone());
    let out = Arc::new(Mutex::new(Outcome {
        total: Vec::new(),
        comm: Vec::new(),
        field: cfg.gather.then(|| vec![0.0; cfg.dims.iter().product()]),
    }));
    let (c2, o2) = (cfg.clone(), out.clone());
    let ty = rt.register(
        ChareType::new("jacobi-block", move |pe: &Pe, index: u32| {
            let block = Block::new(c2.dims, grid, index as usize);
            let dev = pe.device();
            let alloc = |bytes: usize| dev.alloc(pe.id(), bytes as u64).expect("block fits in device memory");
            let cur = alloc(block.cells() * 8);
            let next = alloc(block.cells() * 8);
            for b in [&cur, &next] {
                dev.with_f64_mut(b, |f| apply_boundary(&block, f)).expect("live buffer");
            }
            let faces = |_| -> Vec<Option<DeviceBuffer>> {
                (0..6)
                    .map(|d| block.neighbor(d).map(|_| alloc(block.face_len(d) * 8)))
                    .collect()
            };
            let state = Rc::new(BlockState {
                pe: pe.clone(),
                block,
                me: ChareId {
                    collection: 0,
                    index,
                    home_pe: pe.id(),
                },
                cur: Cell::new(cur),
                next: Cell::new(next),
                send_stage: faces(()),
                recv_stage: [faces(()), faces(())],
                arrivals: RefCell::default(),
            });
            pe.spawn_fallible(drive(state.clone(), c2.clone(), o2.clone()));
            BlockChare { state }
        })
        .entry("halo")
        .entry_with_post("halo_device"),
    )?;
    rt.create_array_on(ty, (0..pes as u32).collect())?;
    let report = rt.run(|_| {})?;
    let mut o = out.lock().unwrap();
    if o.total.len() != pes {
        return Err(JacobiError::Setup(format!("{} of {pes} blocks finished", o.total.len())));
    }
    let s = report.stats();
    let halo_sends = s.total_envelopes_sent() - s.envelopes_sent[2] + s.channel_sends;
    Ok(JacobiResult {
        grid,
        total_time: o.total.iter().copied().max().unwrap_or(0),
        comm_time: o.comm.iter().copied().max().unwrap_or(0),
        halo_sends,
        field: o.field.take(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_examples() {
        assert_eq!(decompose([64, 64, 64], 8).unwrap(), [2, 2, 2]);
        assert_eq!(decompose([64, 64, 64], 1).unwrap(), [1, 1, 1]);
        assert_eq!(decompose([64, 64, 64], 4).unwrap(), [1, 2, 2]);
        assert!(decompose([5, 5, 5], 2).is_err());
    }

    #[test]
    fn neighbors_of_corner_and_interior_blocks() {
        let corner = Block::new([12, 12, 12], [2, 2, 2], 0);
        assert_eq!(corner.neighbor_count(), 3);
        let mid = Block::new([12, 12, 12], [3, 3, 3], 13);
        assert_eq!(mid.coords, [1, 1, 1]);
        assert_eq!(mid.neighbor_count(), 6);
    }

    #[test]
    fn pack_then_unpack_moves_the_face() {
        let s = [2, 3, 4];
        let n = (s[0] + 2) * (s[1] + 2) * (s[2] + 2);
        let a: Vec<f64> = (0..n).map(|v| v as f64).collect();
        let mut b = vec![0.0; n];
        // a's x+ face lands in b's x- ghost.
        unpack_face(s, &mut b, 0, &pack_face(s, &a, 1));
        assert_eq!(b[at(s, 0, 1, 1)], a[at(s, 2, 1, 1)]);
        assert_eq!(b[at(s, 0, 3, 4)], a[at(s, 2, 3, 4)]);
    }

    #[test]
    fn zero_and_uniform_fields_are_fixed_points() {
        let s = [3, 3, 3];
        let n = 125;
        let zero = vec![0.0; n];
        let mut next = vec![0.0; n];
        sweep(s, &zero, &mut next);
        assert!(next.iter().all(|&v| v == 0.0));
        let one = vec![1.0; n];
        sweep(s, &one, &mut next);
        assert_eq!(next[at(s, 2, 2, 2)], 1.0);
    }
}
