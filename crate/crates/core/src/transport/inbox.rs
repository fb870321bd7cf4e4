use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::frame::Frame;
use super::{PeId, TransportError};

/// Something that carries frames to one peer worker.
pub trait FrameSink: Send + Sync {
    fn deliver(&self, frame: Frame) -> Result<(), TransportError>;
    fn close(&self) {}
}

pub enum Inbound {
    Connected { peer: PeId, sink: Arc<dyn FrameSink> },
    Frame { from: PeId, frame: Frame },
    Disconnected { peer: PeId, reason: String },
}

impl fmt::Debug for Inbound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inbound::Connected { peer, .. } => write!(f, "Connected({peer})"),
            Inbound::Frame { from, frame } => write!(f, "Frame({from}, {:?})", frame.tag),
            Inbound::Disconnected { peer, reason } => write!(f, "Disconnected({peer}: {reason})"),
        }
    }
}

/// Thread-safe handoff queue drained by the owning worker's progress.
#[derive(Default)]
pub struct Inbox {
    queue: Mutex<VecDeque<Inbound>>,
    ready: Condvar,
}

impl Inbox {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn push(&self, item: Inbound) {
        self.queue.lock().unwrap().push_back(item);
        self.ready.notify_one();
    }

    pub fn drain(&self) -> VecDeque<Inbound> {
        std::mem::take(&mut *self.queue.lock().unwrap())
    }

    pub fn is_empty(&self) -> bool {
        self.queue.lock().unwrap().is_empty()
    }

    /// Blocks until something is queued or `timeout` passes.
    pub fn wait(&self, timeout: Duration) {
        let q = self.queue.lock().unwrap();
        if q.is_empty() {
            let _ = self.ready.wait_timeout(q, timeout).unwrap();
        }
    }

    pub fn notify(&self) {
        self.ready.notify_all();
    }
}

/// Delivers straight into another worker's inbox.
pub struct InboxSink {
    pub from: PeId,
    pub target: Arc<Inbox>,
}

impl FrameSink for InboxSink {
    fn deliver(&self, frame: Frame) -> Result<(), TransportError> {
        self.target.push(Inbound::Frame {
            from: self.from,
            frame,
        });
        Ok(())
    }
}
