//! Channels: a pairwise stream between two chares. Each endpoint keeps a
//! send counter and a receive counter; the kth send at one end carries the
//! same tag as the kth receive at the other, so payloads move with no
//! metadata envelope.

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::device::DeviceRegion;
use crate::runtime::{ChareId, CompletionHandle, Pe, RuntimeError, Transfer, TransferInfo, TransferResult};
use crate::tag::{encode_channel_tag, Tag, FULL_MASK};

/// Source of a channel send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendBuf {
    Host(Vec<u8>),
    Device(DeviceRegion),
}

/// Destination of a channel receive. A host receive returns the bytes in
/// [`TransferInfo::data`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvBuf {
    Host { capacity: usize },
    Device(DeviceRegion),
}

struct Inner {
    pe: Pe,
    id: u64,
    local: ChareId,
    peer: ChareId,
    send_dir: u8,
    recv_dir: u8,
    sent: Cell<u64>,
    received: Cell<u64>,
}

/// One endpoint of a channel. Clones share the counters.
#[derive(Clone)]
pub struct Channel(Rc<Inner>);

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel")
            .field("id", &self.0.id)
            .field("local", &self.0.local)
            .field("peer", &self.0.peer)
            .field("sent", &self.0.sent.get())
            .field("received", &self.0.received.get())
            .finish()
    }
}

impl Channel {
    /// Creates the endpoint of channel `id` owned by `local` and talking to
    /// `peer`. The peer creates its own endpoint with the same id.
    pub fn create(pe: &Pe, id: u64, local: ChareId, peer: ChareId) -> Result<Channel, RuntimeError> {
        if local.home_pe != pe.id() {
            return Err(RuntimeError::Usage(format!(
                "channel endpoint {local} does not live on PE {}",
                pe.id()
            )));
        }
        pe.check_pe(peer.home_pe)?;
        // Validates the id against the configured width.
        encode_channel_tag(id, 0, 0, pe.layout())?;
        if !pe.0.channels.borrow_mut().insert((id, local)) {
            return Err(RuntimeError::Usage(format!(
                "channel {id} already created for {local} on PE {}",
                pe.id()
            )));
        }
        // The lower endpoint sends in direction 0; a self-channel uses 0 both ways.
        let send_dir = u8::from(local > peer);
        let recv_dir = u8::from(peer > local);
        Ok(Channel(Rc::new(Inner {
            pe: pe.clone(),
            id,
            local,
            peer,
            send_dir,
            recv_dir,
            sent: Cell::new(0),
            received: Cell::new(0),
        })))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn local(&self) -> ChareId {
        self.0.local
    }

    pub fn peer(&self) -> ChareId {
        self.0.peer
    }

    pub fn sends(&self) -> u64 {
        self.0.sent.get()
    }

    pub fn receives(&self) -> u64 {
        self.0.received.get()
    }

    fn next_tag(&self, counter: &Cell<u64>, dir: u8) -> Result<Tag, RuntimeError> {
        let layout = self.0.pe.layout();
        let c = counter.get();
        if c >= layout.channel_counter_modulus() {
            return Err(RuntimeError::Usage(format!(
                "channel {} exhausted its {} operations in direction {dir}",
                self.0.id,
                layout.channel_counter_modulus()
            )));
        }
        let tag = encode_channel_tag(self.0.id, dir, c, layout)?;
        counter.set(c + 1);
        Ok(tag)
    }

    /// Tag of the next send (without consuming it).
    pub fn next_send_tag(&self) -> Result<Tag, RuntimeError> {
        Ok(encode_channel_tag(self.0.id, self.0.send_dir, self.0.sent.get(), self.0.pe.layout())?)
    }

    /// Non-blocking send; `completion` fires when the buffer is reusable.
    pub fn send(&self, buf: SendBuf, completion: CompletionHandle) -> Result<(), RuntimeError> {
        self.send_with(buf, move |pe, r| pe.complete(completion, r))
    }

    /// Non-blocking receive; `completion` fires when the payload is in place.
    pub fn recv(&self, buf: RecvBuf, completion: CompletionHandle) -> Result<(), RuntimeError> {
        self.recv_with(buf, move |pe, r| pe.complete(completion, r))
    }

    /// Send whose completion can be awaited.
    pub fn send_async(&self, buf: SendBuf) -> Result<Transfer, RuntimeError> {
        let (done, t) = self.0.pe.transfer_slot();
        self.send_with(buf, move |_, r| done(r))?;
        Ok(t)
    }

    /// Receive whose completion can be awaited.
    pub fn recv_async(&self, buf: RecvBuf) -> Result<Transfer, RuntimeError> {
        let (done, t) = self.0.pe.transfer_slot();
        self.recv_with(buf, move |_, r| done(r))?;
        Ok(t)
    }

    fn send_with(&self, buf: SendBuf, done: impl FnOnce(&Pe, TransferResult) + 'static) -> Result<(), RuntimeError> {
        let pe = &self.0.pe;
        if pe.is_stopped() {
            return Err(RuntimeError::Usage("runtime is not running".into()));
        }
        let data = match buf {
            SendBuf::Host(v) => v,
            SendBuf::Device(region) => pe.device().read(region)?,
        };
        let tag = self.next_tag(&self.0.sent, self.0.send_dir)?;
        let cb = pe.transport_completion(move |pe, r| {
            done(
                pe,
                r.map(|i| TransferInfo { data: None, ..i }),
            )
        });
        pe.0.stats.borrow_mut().channel_sends += 1;
        pe.worker().tag_send(self.0.peer.home_pe, tag, data, Some(cb))?;
        Ok(())
    }

    fn recv_with(&self, buf: RecvBuf, done: impl FnOnce(&Pe, TransferResult) + 'static) -> Result<(), RuntimeError> {
        let pe = &self.0.pe;
        if pe.is_stopped() {
            return Err(RuntimeError::Usage("runtime is not running".into()));
        }
        let capacity = match buf {
            RecvBuf::Host { capacity } => capacity,
            RecvBuf::Device(region) => {
                if !pe.device().is_device_address(region.addr) {
                    return Err(RuntimeError::Usage(format!(
                        "address {:#x} is not device memory",
                        region.addr
                    )));
                }
                region.len as usize
            }
        };
        let tag = self.next_tag(&self.0.received, self.0.recv_dir)?;
        let cb = pe.transport_completion(move |pe, r| {
            let r = r.and_then(|info| match buf {
                RecvBuf::Host { .. } => Ok(info),
                RecvBuf::Device(region) => {
                    let data = info.data.unwrap_or_default();
                    let landed = DeviceRegion {
                        addr: region.addr,
                        len: data.len() as u64,
                    };
                    pe.device().write(landed, &data)?;
                    Ok(TransferInfo { data: None, ..info })
                }
            });
            pe.0.stats.borrow_mut().channel_receives += 1;
            done(pe, r)
        });
        pe.worker().tag_recv(tag, FULL_MASK, capacity, cb);
        Ok(())
    }
}
