//! Completion handles: callbacks, single-assignment futures and the local
//! one-shot slots behind the awaitable communication calls.

use std::cell::RefCell;
use std::collections::HashMap;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use crate::tag::Tag;
use crate::time::{Nanos, PeClock};
use crate::transport::PeId;

use super::args::{ArgError, ArgReader, Args};
use super::envelope::ChareId;
use super::RuntimeError;

/// A future that can be fulfilled from any PE and awaited on its home PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FutureHandle {
    pub home_pe: PeId,
    pub id: u64,
}

impl FutureHandle {
    /// Appends this handle to an argument list.
    pub fn pack(&self, args: Args) -> Args {
        args.u64(self.home_pe as u64).u64(self.id)
    }

    pub fn unpack(r: &mut ArgReader<'_>) -> Result<Self, ArgError> {
        Ok(FutureHandle {
            home_pe: r.u64()? as PeId,
            id: r.u64()?,
        })
    }
}

/// Entry-method target invoked with the completion's payload as arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Callback {
    pub target: ChareId,
    pub entry: u32,
}

/// What to do when an asynchronous operation finishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompletionHandle {
    #[default]
    Ignore,
    Callback(Callback),
    Future(FutureHandle),
}

/// Result of a completed transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferInfo {
    /// Bytes actually transferred.
    pub len: usize,
    /// Transport tag of the transfer.
    pub tag: Tag,
    /// Virtual time of completion.
    pub timestamp: Nanos,
    /// Received bytes for host-destination receives.
    pub data: Option<Vec<u8>>,
}

pub type TransferResult = Result<TransferInfo, RuntimeError>;

/// Encodes a transfer outcome as the payload delivered to a callback or
/// future: `bool ok, u64 len, str error, bytes data`.
pub fn encode_transfer(result: &TransferResult) -> Vec<u8> {
    match result {
        Ok(info) => Args::new()
            .bool(true)
            .u64(info.len as u64)
            .str("")
            .bytes(info.data.as_deref().unwrap_or(&[]))
            .into_bytes(),
        Err(e) => Args::new()
            .bool(false)
            .u64(0)
            .str(&e.to_string())
            .bytes(&[])
            .into_bytes(),
    }
}

/// Decoded form of [`encode_transfer`]: `Ok((len, data))` or the error text.
pub fn decode_transfer(payload: &[u8]) -> Result<Result<(usize, Vec<u8>), String>, ArgError> {
    let mut r = ArgReader::new(payload);
    let ok = r.bool()?;
    let len = r.u64()? as usize;
    let err = r.str()?.to_string();
    let data = r.bytes()?.to_vec();
    Ok(if ok { Ok((len, data)) } else { Err(err) })
}

/// Value held by a fulfilled future.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FutureValue {
    pub data: Vec<u8>,
    pub timestamp: Nanos,
}

#[derive(Default)]
struct Slot {
    value: Option<FutureValue>,
    waker: Option<Waker>,
}

/// Futures homed on one PE.
#[derive(Default)]
pub(crate) struct FutureTable {
    slots: HashMap<u64, Slot>,
    next: u64,
}

impl FutureTable {
    pub(crate) fn create(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        self.slots.insert(id, Slot::default());
        id
    }

    pub(crate) fn fulfill(&mut self, id: u64, value: FutureValue) -> Result<(), RuntimeError> {
        let slot = self
            .slots
            .get_mut(&id)
            .ok_or_else(|| RuntimeError::Usage(format!("future {id} does not exist")))?;
        if slot.value.is_some() {
            return Err(RuntimeError::Usage(format!("future {id} fulfilled twice")));
        }
        slot.value = Some(value);
        if let Some(w) = slot.waker.take() {
            w.wake();
        }
        Ok(())
    }

    pub(crate) fn poll(&mut self, id: u64, cx: &mut Context<'_>) -> Poll<Result<FutureValue, RuntimeError>> {
        let Some(slot) = self.slots.get_mut(&id) else {
            return Poll::Ready(Err(RuntimeError::Usage(format!("future {id} does not exist"))));
        };
        match &slot.value {
            Some(v) => Poll::Ready(Ok(v.clone())),
            None => {
                if let Some(w) = &slot.waker {
                    if !w.will_wake(cx.waker()) {
                        return Poll::Ready(Err(RuntimeError::Usage(format!(
                            "future {id} already has a waiter"
                        ))));
                    }
                }
                slot.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    }

    pub(crate) fn is_fulfilled(&self, id: u64) -> bool {
        self.slots.get(&id).is_some_and(|s| s.value.is_some())
    }
}

struct OneshotState<T> {
    value: Option<T>,
    waker: Option<Waker>,
}

/// Receiving half of a PE-local single-value slot.
pub struct Oneshot<T> {
    state: Rc<RefCell<OneshotState<T>>>,
}

/// Sending half of a PE-local single-value slot.
pub struct Completer<T> {
    state: Rc<RefCell<OneshotState<T>>>,
}

pub(crate) fn oneshot<T>() -> (Completer<T>, Oneshot<T>) {
    let state = Rc::new(RefCell::new(OneshotState {
        value: None,
        waker: None,
    }));
    (
        Completer {
            state: state.clone(),
        },
        Oneshot { state },
    )
}

impl<T> Completer<T> {
    pub fn complete(self, value: T) {
        let waker = {
            let mut s = self.state.borrow_mut();
            s.value = Some(value);
            s.waker.take()
        };
        if let Some(w) = waker {
            w.wake();
        }
    }
}

impl<T> Oneshot<T> {
    pub fn is_ready(&self) -> bool {
        self.state.borrow().value.is_some()
    }
}

impl<T> Future for Oneshot<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<T> {
        let mut s = self.state.borrow_mut();
        match s.value.take() {
            Some(v) => Poll::Ready(v),
            None => {
                s.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}

/// Awaitable outcome of one send or receive. Merges the PE clock with the
/// completion time when it resolves.
pub struct Transfer {
    rx: Oneshot<TransferResult>,
    clock: PeClock,
}

impl Transfer {
    pub(crate) fn new(rx: Oneshot<TransferResult>, clock: PeClock) -> Self {
        Transfer { rx, clock }
    }

    pub fn is_ready(&self) -> bool {
        self.rx.is_ready()
    }
}

impl Future for Transfer {
    type Output = TransferResult;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<TransferResult> {
        match Pin::new(&mut self.rx).poll(cx) {
            Poll::Ready(r) => {
                if let Ok(info) = &r {
                    self.clock.merge(info.timestamp);
                }
                Poll::Ready(r)
            }
            Poll::Pending => Poll::Pending,
        }
    }
}

/// Awaits every transfer in order and returns their results.
pub async fn wait_all(transfers: Vec<Transfer>) -> Vec<TransferResult> {
    let mut out = Vec::with_capacity(transfers.len());
    for t in transfers {
        out.push(t.await);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::task::Wake;

    struct Noop;
    impl Wake for Noop {
        fn wake(self: Arc<Self>) {}
    }

    #[test]
    fn double_fulfill_is_usage_error() {
        let mut t = FutureTable::default();
        let id = t.create();
        let v = FutureValue {
            data: vec![1],
            timestamp: 0,
        };
        t.fulfill(id, v.clone()).unwrap();
        assert!(matches!(t.fulfill(id, v), Err(RuntimeError::Usage(_))));
    }

    #[test]
    fn fulfilled_future_is_immediately_ready() {
        let mut t = FutureTable::default();
        let id = t.create();
        t.fulfill(
            id,
            FutureValue {
                data: vec![4],
                timestamp: 9,
            },
        )
        .unwrap();
        let w = Waker::from(Arc::new(Noop));
        let mut cx = Context::from_waker(&w);
        assert!(matches!(t.poll(id, &mut cx), Poll::Ready(Ok(v)) if v.data == [4]));
    }

    #[test]
    fn transfer_payload_round_trip() {
        let ok: TransferResult = Ok(TransferInfo {
            len: 3,
            tag: Tag(1),
            timestamp: 0,
            data: Some(vec![1, 2, 3]),
        });
        assert_eq!(decode_transfer(&encode_transfer(&ok)).unwrap(), Ok((3, vec![1, 2, 3])));
        let err: TransferResult = Err(RuntimeError::Usage("x".into()));
        assert!(decode_transfer(&encode_transfer(&err)).unwrap().is_err());
    }
}
