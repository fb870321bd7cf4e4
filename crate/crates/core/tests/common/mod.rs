//! Worker pairs on either backend for transport tests.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use charmlet::tag::{MessageKind, Tag};
use charmlet::time::PeClock;
use charmlet::transport::{Fabric, LoopbackFabric, PeerSpec, TcpFabric, Worker, WorkerConfig};

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Loopback,
    Tcp,
}

pub fn tag(n: u64) -> Tag {
    Tag((MessageKind::Probe.code() as u64) << 60 | n)
}

pub fn pair(backend: Backend, threshold: usize) -> [Worker; 2] {
    let cfg = WorkerConfig {
        eager_threshold: threshold,
        ..WorkerConfig::default()
    };
    match backend {
        Backend::Loopback => {
            let f = Fabric::Loopback(LoopbackFabric::new());
            [0, 1].map(|i| Worker::create(i, cfg.clone(), &f, PeClock::virtual_at(0)).unwrap())
        }
        Backend::Tcp => {
            let f = Fabric::Tcp(TcpFabric::new());
            let mut w = [0, 1].map(|i| Worker::create(i, cfg.clone(), &f, PeClock::virtual_at(0)).unwrap());
            let addr = w[1].listen_addr().unwrap().to_string();
            w[0].connect(PeerSpec::Tcp(addr)).unwrap();
            let start = Instant::now();
            while !w[1].is_connected(0) {
                w[1].wait_for_traffic(Duration::from_millis(1));
                w[1].progress();
                assert!(start.elapsed() < Duration::from_secs(5), "TCP connect stalled");
            }
            w
        }
    }
}

/// Progresses both workers until no frame or completion is outstanding.
pub fn settle(w: &mut [Worker; 2]) {
    let act = w[0].activity().clone();
    let start = Instant::now();
    loop {
        let n = w[0].progress() + w[1].progress();
        if n == 0 && act.is_quiescent() && w[0].inbox_is_empty() && w[1].inbox_is_empty() {
            return;
        }
        if n == 0 {
            w[0].wait_for_traffic(Duration::from_micros(200));
        }
        assert!(start.elapsed() < Duration::from_secs(10), "transport did not settle");
    }
}

