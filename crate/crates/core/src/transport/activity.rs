//! Process-wide count of outstanding work, used for quiescence detection.
//!
//! Every in-flight frame, undelivered completion and queued runtime work
//! item holds one [`ActivityToken`]. The count reaches zero only when no PE
//! is executing anything and nothing is in flight.

use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

#[derive(Clone, Default)]
pub struct Activity {
    count: Arc<AtomicI64>,
}

impl fmt::Debug for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Activity({})", self.get())
    }
}

impl Activity {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn token(&self) -> ActivityToken {
        self.count.fetch_add(1, Ordering::SeqCst);
        ActivityToken {
            count: self.count.clone(),
        }
    }

    /// Takes over a unit that was added elsewhere (e.g. by a TCP sender that
    /// leaked its token into the socket).
    pub(crate) fn adopt(&self) -> ActivityToken {
        ActivityToken {
            count: self.count.clone(),
        }
    }

    pub fn get(&self) -> i64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn is_quiescent(&self) -> bool {
        self.get() == 0
    }
}

pub struct ActivityToken {
    count: Arc<AtomicI64>,
}

impl fmt::Debug for ActivityToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ActivityToken")
    }
}

impl ActivityToken {
    /// Releases ownership without decrementing.
    pub(crate) fn leak(self) {
        std::mem::forget(self);
    }
}

impl Drop for ActivityToken {
    fn drop(&mut self) {
        self.count.fetch_sub(1, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_count() {
        let a = Activity::new();
        let t1 = a.token();
        let t2 = a.token();
        assert_eq!(a.get(), 2);
        drop(t1);
        t2.leak();
        assert_eq!(a.get(), 1);
        drop(a.adopt());
        assert!(a.is_quiescent());
    }
}
