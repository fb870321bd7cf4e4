//! Per-PE clocks and the link / copy cost formulas.
//!
//! In virtual mode every PE owns a nanosecond counter that only moves when a
//! modeled cost is charged or an event with a later timestamp is consumed
//! (`clock = max(clock, event)`). In wall mode the same API reads a shared
//! monotonic epoch and charged costs are spent busy-waiting.

use std::cell::Cell;
use std::rc::Rc;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Virtual-time instant or duration in nanoseconds.
pub type Nanos = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    #[default]
    Wall,
    Virtual,
}

impl TimeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeMode::Wall => "wall",
            TimeMode::Virtual => "virtual",
        }
    }
}

impl FromStr for TimeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(TimeMode::Wall),
            "virtual" => Ok(TimeMode::Virtual),
            other => Err(format!("unknown time mode '{other}' (expected wall|virtual)")),
        }
    }
}

/// Nanoseconds needed to move `bytes` at `bytes_per_sec`, rounded to the
/// nearest nanosecond.
pub fn transfer_ns(bytes: u64, bytes_per_sec: f64) -> Nanos {
    ((bytes as f64) * 1e9 / bytes_per_sec).round() as Nanos
}

pub fn us_to_ns(us: f64) -> Nanos {
    (us * 1e3).round() as Nanos
}

/// Latency/bandwidth pair for one class of link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub latency: Nanos,
    pub bandwidth: f64,
}

impl LinkModel {
    pub fn new(latency_us: f64, bandwidth_bytes_per_sec: f64) -> Self {
        assert!(latency_us >= 0.0, "link latency must be non-negative");
        assert!(bandwidth_bytes_per_sec > 0.0, "link bandwidth must be positive");
        LinkModel {
            latency: us_to_ns(latency_us),
            bandwidth: bandwidth_bytes_per_sec,
        }
    }

    /// Time the link is occupied serializing `bytes`.
    pub fn occupancy(&self, bytes: u64) -> Nanos {
        transfer_ns(bytes, self.bandwidth)
    }

    /// Arrival time of a frame injected at `injected`.
    pub fn arrival(&self, injected: Nanos, bytes: u64) -> Nanos {
        injected + self.latency + self.occupancy(bytes)
    }
}

/// Which link model applies between two workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkScope {
    IntraNode,
    InterNode,
}

#[derive(Debug)]
enum ClockInner {
    Virtual(Cell<Nanos>),
    Wall(Instant),
}

/// Clock owned by one PE. Cheap to clone; clones share the same counter.
#[derive(Debug, Clone)]
pub struct PeClock {
    inner: Rc<ClockInner>,
}

impl PeClock {
    pub fn new(mode: TimeMode, epoch: Instant) -> Self {
        let inner = match mode {
            TimeMode::Virtual => ClockInner::Virtual(Cell::new(0)),
            TimeMode::Wall => ClockInner::Wall(epoch),
        };
        PeClock { inner: Rc::new(inner) }
    }

    pub fn virtual_at(start: Nanos) -> Self {
        PeClock {
            inner: Rc::new(ClockInner::Virtual(Cell::new(start))),
        }
    }

    pub fn mode(&self) -> TimeMode {
        match &*self.inner {
            ClockInner::Virtual(_) => TimeMode::Virtual,
            ClockInner::Wall(_) => TimeMode::Wall,
        }
    }

    pub fn is_virtual(&self) -> bool {
        self.mode() == TimeMode::Virtual
    }

    pub fn now(&self) -> Nanos {
        match &*self.inner {
            ClockInner::Virtual(c) => c.get(),
            ClockInner::Wall(epoch) => epoch.elapsed().as_nanos() as Nanos,
        }
    }

    /// Lamport-style merge; no effect in wall mode.
    pub fn merge(&self, t: Nanos) {
        if let ClockInner::Virtual(c) = &*self.inner {
            if t > c.get() {
                c.set(t);
            }
        }
    }

    /// Charges a modeled cost: clock increment in virtual mode, busy-wait in
    /// wall mode.
    pub fn charge(&self, cost: Nanos) {
        match &*self.inner {
            ClockInner::Virtual(c) => c.set(c.get() + cost),
            ClockInner::Wall(_) => {
                let until = Instant::now() + Duration::from_nanos(cost);
                while Instant::now() < until {
                    std::hint::spin_loop();
                }
            }
        }
    }
}
