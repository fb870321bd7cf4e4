//! In-process backend: workers exchange frames through each other's inboxes.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::activity::Activity;
use super::inbox::Inbox;
use super::{PeId, TransportError};

struct Registered {
    inbox: Arc<Inbox>,
    digest: u64,
}

#[derive(Default)]
struct Registry {
    workers: HashMap<PeId, Registered>,
}

/// A group of in-process workers. Clones share the group.
#[derive(Clone, Default)]
pub struct LoopbackFabric {
    registry: Arc<(Mutex<Registry>, Condvar)>,
    activity: Activity,
}

impl LoopbackFabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_activity(activity: Activity) -> Self {
        LoopbackFabric {
            registry: Arc::default(),
            activity,
        }
    }

    pub fn activity(&self) -> &Activity {
        &self.activity
    }

    pub(crate) fn register(&self, id: PeId, inbox: Arc<Inbox>, digest: u64) -> Result<(), TransportError> {
        let (lock, cv) = &*self.registry;
        let mut reg = lock.lock().unwrap();
        if reg.workers.contains_key(&id) {
            return Err(TransportError::DuplicateWorker(id));
        }
        reg.workers.insert(id, Registered { inbox, digest });
        cv.notify_all();
        Ok(())
    }

    pub(crate) fn unregister(&self, id: PeId) {
        let (lock, _) = &*self.registry;
        lock.lock().unwrap().workers.remove(&id);
    }

    /// Waits up to `timeout` for `peer` to register.
    pub(crate) fn lookup(&self, peer: PeId, timeout: Duration) -> Result<(Arc<Inbox>, u64), TransportError> {
        let deadline = Instant::now() + timeout;
        let (lock, cv) = &*self.registry;
        let mut reg = lock.lock().unwrap();
        loop {
            if let Some(r) = reg.workers.get(&peer) {
                return Ok((r.inbox.clone(), r.digest));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Unreachable {
                    peer: format!("loopback:{peer}"),
                    reason: "no such worker".into(),
                });
            }
            reg = cv.wait_timeout(reg, deadline - now).unwrap().0;
        }
    }

    pub fn is_registered(&self, id: PeId) -> bool {
        self.registry.0.lock().unwrap().workers.contains_key(&id)
    }
}
