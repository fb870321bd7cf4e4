//! GPU Messaging: device-buffer entry arguments travel as a descriptor inside
//! a host metadata envelope plus a separately tagged device payload. The
//! receiver's post entry binds destination buffers; the regular entry runs
//! once every payload has landed.

use std::cell::RefCell;
use std::rc::Rc;

use crate::device::DeviceRegion;
use crate::runtime::{
    ChareId, CompletionHandle, DeviceArg, DeviceDescriptor, DeviceSlot, Item, Message, Pe,
    RuntimeError, TransferInfo, TransferResult,
};
use crate::tag::{decode_tag, encode_messaging_tag, MessageKind, Tag, TagFields, FULL_MASK};
use crate::transport::PeId;

/// One device argument of [`Pe::send_entry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceSend {
    pub region: DeviceRegion,
    /// Fires once the payload buffer may be reused.
    pub completion: CompletionHandle,
}

impl DeviceSend {
    pub fn new(region: impl Into<DeviceRegion>) -> Self {
        DeviceSend {
            region: region.into(),
            completion: CompletionHandle::Ignore,
        }
    }

    pub fn with_completion(mut self, completion: CompletionHandle) -> Self {
        self.completion = completion;
        self
    }
}

/// Which layer consumes a device receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReceiverType {
    /// Runs the regular entry once all of an envelope's payloads landed.
    Charm,
    /// Completes an MPI facade request.
    Mpi,
    /// Completes a handle owned by a language binding.
    Binding,
}

/// A device payload whose tag has been assigned but whose send is not yet
/// issued.
#[derive(Debug)]
pub(crate) struct PreparedSend {
    pub descriptor: DeviceDescriptor,
    pub data: Vec<u8>,
    pub completion: CompletionHandle,
}

/// Assigns the next device tag for `d` and snapshots its bytes.
pub(crate) fn prepare_send(pe: &Pe, d: DeviceSend) -> Result<PreparedSend, RuntimeError> {
    if !pe.device().is_device_address(d.region.addr) {
        return Err(RuntimeError::Usage(format!(
            "address {:#x} is not device memory; pass host data as entry arguments",
            d.region.addr
        )));
    }
    let data = pe.device().read(d.region)?;
    let tag = encode_messaging_tag(
        MessageKind::Device,
        pe.id() as u64,
        pe.next_device_counter(),
        pe.layout(),
    )?;
    Ok(PreparedSend {
        descriptor: DeviceDescriptor {
            src_addr: d.region.addr,
            size: d.region.len,
            tag,
        },
        data,
        completion: d.completion,
    })
}

/// Issues the tagged payload send of a prepared device argument.
pub(crate) fn issue_send(pe: &Pe, dest_pe: PeId, p: PreparedSend) -> Result<(), RuntimeError> {
    let completion = match p.completion {
        CompletionHandle::Ignore => None,
        handle => Some(pe.transport_completion(move |pe, r| {
            pe.complete(
                handle,
                r.map(|mut i| {
                    i.data = None;
                    i
                }),
            )
        })),
    };
    pe.0.stats.borrow_mut().device_sends += 1;
    pe.worker()
        .tag_send(dest_pe, p.descriptor.tag, p.data, completion)?;
    Ok(())
}

/// Sends the device payload at `region` to `dest_pe` under a fresh device
/// tag and returns its descriptor. The caller delivers the descriptor to
/// the receiver in its own metadata message.
pub fn device_send(
    pe: &Pe,
    dest_pe: PeId,
    region: DeviceRegion,
    completion: CompletionHandle,
) -> Result<DeviceDescriptor, RuntimeError> {
    pe.check_pe(dest_pe)?;
    let p = prepare_send(pe, DeviceSend { region, completion })?;
    let d = p.descriptor;
    issue_send(pe, dest_pe, p)?;
    Ok(d)
}

/// Posts the full-mask receive of the device payload tagged `tag` into
/// `dest`. `done` sees the transfer result once the bytes are in place; a
/// payload larger than `dest` is a truncation error.
pub fn device_recv(
    pe: &Pe,
    tag: Tag,
    dest: DeviceRegion,
    receiver: ReceiverType,
    done: impl FnOnce(&Pe, TransferResult) + 'static,
) -> Result<(), RuntimeError> {
    match decode_tag(tag, pe.layout())? {
        TagFields::Messaging {
            kind: MessageKind::Device,
            ..
        } => {}
        _ => {
            return Err(RuntimeError::Usage(format!(
                "{receiver:?} device receive posted with non-device tag {tag}"
            )))
        }
    }
    let cb = pe.transport_completion(move |pe, r| {
        let r = r.and_then(|info| {
            {
                let mut s = pe.0.stats.borrow_mut();
                s.device_receives += 1;
                s.tag_checks += 1;
                if info.tag != tag {
                    s.tag_mismatches += 1;
                }
            }
            let data = info.data.unwrap_or_default();
            let landed = DeviceRegion {
                addr: dest.addr,
                len: data.len() as u64,
            };
            pe.device().write(landed, &data)?;
            Ok(TransferInfo { data: None, ..info })
        });
        done(pe, r)
    });
    pe.worker().tag_recv(tag, FULL_MASK, dest.len as usize, cb);
    Ok(())
}

/// Device receives of one metadata envelope, held until all land.
pub(crate) struct DeviceOp {
    key: (PeId, ChareId),
    dest: ChareId,
    msg: Option<Message>,
    args: Vec<Option<DeviceArg>>,
    remaining: usize,
}

/// Posts one device receive per bound slot of a delivered metadata envelope.
pub(crate) fn start_op(pe: &Pe, key: (PeId, ChareId), dest: ChareId, msg: Message, slots: Vec<DeviceSlot>) {
    let n = slots.len();
    let op = Rc::new(RefCell::new(DeviceOp {
        key,
        dest,
        msg: Some(msg),
        args: vec![None; n],
        remaining: n,
    }));
    if n == 0 {
        pe.enqueue(Item::DeviceReady(op));
        return;
    }
    for (i, slot) in slots.into_iter().enumerate() {
        let region = slot.bound().expect("slots are bound before start_op");
        let (size, tag) = (slot.size, slot.tag);
        let op2 = op.clone();
        let settle = move |pe: &Pe, r: TransferResult| {
            let ready = {
                let mut o = op2.borrow_mut();
                let ts = r.as_ref().map(|i| i.timestamp).unwrap_or(0);
                if let Some(m) = o.msg.as_mut() {
                    m.timestamp = m.timestamp.max(ts);
                }
                o.args[i] = Some(DeviceArg {
                    region,
                    size,
                    tag,
                    status: r.map(|_| ()),
                });
                o.remaining -= 1;
                o.remaining == 0
            };
            if ready {
                pe.enqueue(Item::DeviceReady(op2));
            }
        };
        if let Err(e) = device_recv(pe, tag, region, ReceiverType::Charm, settle) {
            pe.abort(e);
            return;
        }
    }
}

/// Takes the completed message of a device op.
pub(crate) fn finish_op(op: &Rc<RefCell<DeviceOp>>) -> ((PeId, ChareId), ChareId, Message) {
    let mut o = op.borrow_mut();
    let mut msg = o.msg.take().expect("device op finished once");
    msg.device = o.args.drain(..).map(|a| a.expect("all slots settled")).collect();
    (o.key, o.dest, msg)
}
