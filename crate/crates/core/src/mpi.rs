//! Minimal MPI-style point-to-point layer: one rank per PE, matching on
//! (source, tag) with an unexpected queue and a request queue. Device
//! buffers are detected by address; their payloads move as tagged device
//! transfers whose receive is posted only after the host-side message has
//! matched.

use std::collections::VecDeque;
use std::fmt;

use crate::device::DeviceRegion;
use crate::devmsg::{self, ReceiverType};
use crate::runtime::future::{oneshot, Completer, Oneshot};
use crate::runtime::{
    ArgReader, Args, ChareId, DeviceDescriptor, Envelope, EnvelopeKind, Pe, RuntimeError, TransferResult,
};
use crate::time::{Nanos, PeClock};
use crate::transport::PeId;

/// Wildcard tag for receives.
pub const ANY_TAG: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Datatype {
    Byte,
    F64,
}

impl Datatype {
    pub fn size(self) -> usize {
        match self {
            Datatype::Byte => 1,
            Datatype::F64 => 8,
        }
    }

    fn code(self) -> u64 {
        match self {
            Datatype::Byte => 0,
            Datatype::F64 => 1,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(Datatype::Byte),
            1 => Some(Datatype::F64),
            _ => None,
        }
    }
}

/// A send or receive buffer. Device buffers are recognized by address.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    Host(Vec<u8>),
    Device(DeviceRegion),
}

impl Buffer {
    pub fn host_f64(values: &[f64]) -> Self {
        Buffer::Host(bytemuck::cast_slice(values).to_vec())
    }
}

/// Outcome of a completed request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Status {
    pub source: PeId,
    pub tag: i32,
    /// Elements received (or sent).
    pub count: usize,
    /// Received bytes for receives into a host buffer.
    pub data: Option<Vec<u8>>,
    /// Set when the request finished in error, e.g. on truncation.
    pub error: Option<String>,
    pub timestamp: Nanos,
}

/// A pending non-blocking operation.
pub struct Request {
    rx: Oneshot<Status>,
    clock: PeClock,
}

impl fmt::Debug for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Request").field("complete", &self.rx.is_ready()).finish()
    }
}

impl Request {
    pub fn is_complete(&self) -> bool {
        self.rx.is_ready()
    }

    pub async fn wait(self) -> Status {
        let s = self.rx.await;
        self.clock.merge(s.timestamp);
        s
    }
}

enum Payload {
    Host(Vec<u8>),
    Device(DeviceDescriptor),
}

struct Incoming {
    source: PeId,
    tag: i32,
    dtype: Datatype,
    payload: Payload,
    timestamp: Nanos,
}

struct Posted {
    source: PeId,
    tag: i32,
    capacity: usize,
    dtype: Datatype,
    dest: Option<DeviceRegion>,
    done: Completer<Status>,
}

impl Posted {
    fn matches(&self, source: PeId, tag: i32) -> bool {
        self.source == source && (self.tag == ANY_TAG || self.tag == tag)
    }
}

/// Per-PE rank state.
#[derive(Default)]
pub(crate) struct RankState {
    size: Option<usize>,
    unexpected: VecDeque<Incoming>,
    posted: VecDeque<Posted>,
}

/// The calling PE's rank in the world communicator.
#[derive(Clone)]
pub struct Mpi {
    pe: Pe,
}

impl fmt::Debug for Mpi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mpi(rank {})", self.pe.id())
    }
}

/// Joins the world communicator of `n_ranks` ranks; rank ids equal PE ids.
pub fn mpi_init(pe: &Pe, n_ranks: usize) -> Result<Mpi, RuntimeError> {
    if n_ranks != pe.num_pes() {
        return Err(RuntimeError::Startup {
            pe: pe.id(),
            reason: format!("{n_ranks} ranks requested on {} PEs", pe.num_pes()),
        });
    }
    pe.0.mpi.borrow_mut().size = Some(n_ranks);
    Ok(Mpi { pe: pe.clone() })
}

impl Mpi {
    pub fn rank(&self) -> PeId {
        self.pe.id()
    }

    pub fn size(&self) -> usize {
        self.pe.num_pes()
    }

    pub fn pe(&self) -> &Pe {
        &self.pe
    }

    fn check_rank(&self, r: PeId) -> Result<(), RuntimeError> {
        if r as usize >= self.size() {
            return Err(RuntimeError::Usage(format!("rank {r} out of range (size {})", self.size())));
        }
        Ok(())
    }

    fn check_device(&self, region: DeviceRegion) -> Result<(), RuntimeError> {
        if !self.pe.device().is_device_address(region.addr) {
            return Err(RuntimeError::Usage(format!("address {:#x} is not device memory", region.addr)));
        }
        Ok(())
    }

    fn request(&self) -> (Completer<Status>, Request) {
        let (tx, rx) = oneshot();
        (
            tx,
            Request {
                rx,
                clock: self.pe.clock().clone(),
            },
        )
    }

    /// Non-blocking send of `count` elements.
    pub fn isend(&self, buf: Buffer, count: usize, dtype: Datatype, dest: PeId, tag: i32) -> Result<Request, RuntimeError> {
        self.check_rank(dest)?;
        if tag < 0 {
            return Err(RuntimeError::Usage(format!("send tag {tag} must be non-negative")));
        }
        let bytes = count * dtype.size();
        let (tx, req) = self.request();
        let me = self.rank();
        let finish = move |_: &Pe, r: TransferResult| {
            tx.complete(match r {
                Ok(i) => Status {
                    source: me,
                    tag,
                    count,
                    data: None,
                    error: None,
                    timestamp: i.timestamp,
                },
                Err(e) => Status {
                    source: me,
                    tag,
                    count: 0,
                    data: None,
                    error: Some(e.to_string()),
                    timestamp: 0,
                },
            })
        };
        let mut env = Envelope {
            kind: EnvelopeKind::Mpi,
            dest: ChareId {
                collection: u32::MAX,
                index: dest,
                home_pe: dest,
            },
            entry: 0,
            source_pe: me,
            seq: 0,
            descriptors: Vec::new(),
            payload: Vec::new(),
        };
        let header = Args::new().i64(tag as i64).u64(dtype.code());
        match buf {
            Buffer::Host(mut data) => {
                if data.len() < bytes {
                    return Err(RuntimeError::Usage(format!(
                        "send buffer of {} bytes holds fewer than {count} elements",
                        data.len()
                    )));
                }
                data.truncate(bytes);
                env.payload = header.bytes(&data).into_bytes();
                let cb = self.pe.transport_completion(finish);
                self.pe.send_envelope(dest, env, Some(cb))?;
            }
            Buffer::Device(region) => {
                self.check_device(region)?;
                if region.len < bytes as u64 {
                    return Err(RuntimeError::Usage(format!(
                        "device buffer of {} bytes holds fewer than {count} elements",
                        region.len
                    )));
                }
                let region = DeviceRegion {
                    addr: region.addr,
                    len: bytes as u64,
                };
                let p = devmsg::prepare_send(&self.pe, devmsg::DeviceSend::new(region))?;
                env.descriptors.push(p.descriptor);
                env.payload = header.bytes(&[]).into_bytes();
                let tag = p.descriptor.tag;
                let cb = self.pe.transport_completion(finish);
                self.pe.0.stats.borrow_mut().device_sends += 1;
                self.pe.worker().tag_send(dest, tag, p.data, Some(cb))?;
                self.pe.send_envelope(dest, env, None)?;
            }
        }
        Ok(req)
    }

    /// Non-blocking receive of up to `count` elements from `source`.
    pub fn irecv(&self, buf: Buffer, count: usize, dtype: Datatype, source: PeId, tag: i32) -> Result<Request, RuntimeError> {
        self.check_rank(source)?;
        if tag < ANY_TAG {
            return Err(RuntimeError::Usage(format!("invalid receive tag {tag}")));
        }
        let capacity = count * dtype.size();
        let dest = match buf {
            Buffer::Host(_) => None,
            Buffer::Device(region) => {
                self.check_device(region)?;
                if region.len < capacity as u64 {
                    return Err(RuntimeError::Usage(format!(
                        "device buffer of {} bytes holds fewer than {count} elements",
                        region.len
                    )));
                }
                Some(DeviceRegion {
                    addr: region.addr,
                    len: capacity as u64,
                })
            }
        };
        let (done, req) = self.request();
        let posted = Posted {
            source,
            tag,
            capacity,
            dtype,
            dest,
            done,
        };
        let hit = {
            let mut st = self.pe.0.mpi.borrow_mut();
            match st.unexpected.iter().position(|m| posted.matches(m.source, m.tag)) {
                Some(i) => st.unexpected.remove(i),
                None => {
                    st.posted.push_back(posted);
                    return Ok(req);
                }
            }
        };
        deliver(&self.pe, hit.expect("position is in range"), posted);
        Ok(req)
    }

    pub async fn send(&self, buf: Buffer, count: usize, dtype: Datatype, dest: PeId, tag: i32) -> Result<Status, RuntimeError> {
        Ok(self.isend(buf, count, dtype, dest, tag)?.wait().await)
    }

    pub async fn recv(&self, buf: Buffer, count: usize, dtype: Datatype, source: PeId, tag: i32) -> Result<Status, RuntimeError> {
        Ok(self.irecv(buf, count, dtype, source, tag)?.wait().await)
    }

    pub async fn waitall(&self, reqs: Vec<Request>) -> Vec<Status> {
        let mut out = Vec::with_capacity(reqs.len());
        for r in reqs {
            out.push(r.wait().await);
        }
        out
    }

    /// True when no unexpected message matches any posted receive.
    pub fn queues_exclusive(&self) -> bool {
        let st = self.pe.0.mpi.borrow();
        !st.unexpected
            .iter()
            .any(|m| st.posted.iter().any(|p| p.matches(m.source, m.tag)))
    }

    pub fn unexpected_len(&self) -> usize {
        self.pe.0.mpi.borrow().unexpected.len()
    }

    pub fn posted_len(&self) -> usize {
        self.pe.0.mpi.borrow().posted.len()
    }
}

fn failed(posted: Posted, source: PeId, tag: i32, err: String, ts: Nanos) {
    posted.done.complete(Status {
        source,
        tag,
        count: 0,
        data: None,
        error: Some(err),
        timestamp: ts,
    });
}

fn deliver(pe: &Pe, m: Incoming, posted: Posted) {
    let (source, tag) = (m.source, m.tag);
    if m.dtype != posted.dtype {
        let err = format!("datatype mismatch: sent {:?}, receiving {:?}", m.dtype, posted.dtype);
        return failed(posted, source, tag, err, m.timestamp);
    }
    let elem = posted.dtype.size();
    match m.payload {
        Payload::Host(data) => {
            if data.len() > posted.capacity {
                let err = format!("message of {} bytes truncated to {}", data.len(), posted.capacity);
                return failed(posted, source, tag, err, m.timestamp);
            }
            let count = data.len() / elem;
            let data = match posted.dest {
                None => Some(data),
                Some(region) => {
                    let landed = DeviceRegion {
                        addr: region.addr,
                        len: data.len() as u64,
                    };
                    if let Err(e) = pe.device().write(landed, &data) {
                        return failed(posted, source, tag, e.to_string(), m.timestamp);
                    }
                    None
                }
            };
            posted.done.complete(Status {
                source,
                tag,
                count,
                data,
                error: None,
                timestamp: m.timestamp,
            });
        }
        Payload::Device(d) => {
            let to_host = posted.dest.is_none();
            let done = posted.done;
            let settle = move |_: &Pe, r: TransferResult| {
                done.complete(match r {
                    Ok(i) => Status {
                        source,
                        tag,
                        count: i.len / elem,
                        data: i.data,
                        error: None,
                        timestamp: i.timestamp,
                    },
                    Err(e) => Status {
                        source,
                        tag,
                        count: 0,
                        data: None,
                        error: Some(e.to_string()),
                        timestamp: 0,
                    },
                })
            };
            let r = if to_host {
                let cb = pe.transport_completion(settle);
                pe.worker()
                    .tag_recv(d.tag, crate::tag::FULL_MASK, posted.capacity, cb);
                Ok(())
            } else {
                let region = posted.dest.expect("device destination");
                devmsg::device_recv(pe, d.tag, region, ReceiverType::Mpi, settle)
            };
            if let Err(e) = r {
                pe.abort(e);
            }
        }
    }
}

/// Handles an MPI envelope released in per-source order.
pub(crate) fn on_envelope(pe: &Pe, env: Envelope, ts: Nanos) {
    let mut r = ArgReader::new(&env.payload);
    let parsed = (|| -> Result<_, RuntimeError> {
        let tag = r.i64()? as i32;
        let dtype = Datatype::from_code(r.u64()?)
            .ok_or_else(|| RuntimeError::Usage("unknown MPI datatype".into()))?;
        let data = r.bytes()?.to_vec();
        Ok((tag, dtype, data))
    })();
    let (tag, dtype, data) = match parsed {
        Ok(x) => x,
        Err(e) => return pe.abort(e),
    };
    let payload = match env.descriptors.first() {
        Some(d) => Payload::Device(*d),
        None => Payload::Host(data),
    };
    let m = Incoming {
        source: env.source_pe,
        tag,
        dtype,
        payload,
        timestamp: ts,
    };
    let hit = {
        let mut st = pe.0.mpi.borrow_mut();
        match st.posted.iter().position(|p| p.matches(m.source, m.tag)) {
            Some(i) => st.posted.remove(i),
            None => {
                st.unexpected.push_back(m);
                return;
            }
        }
    };
    deliver(pe, m, hit.expect("position is in range"));
}
