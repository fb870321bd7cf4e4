//! MPI facade: matching on (source, tag) above the transport, over host and
//! device buffers.

use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};

use charmlet::config::Config;
use charmlet::mpi::{mpi_init, Buffer, Datatype, Mpi, Status, ANY_TAG};
use charmlet::runtime::{FutureHandle, Pe, Runtime, RuntimeError};
use charmlet::time::TimeMode;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Program = Arc<dyn Fn(Mpi, FutureHandle) -> Pin<Box<dyn Future<Output = ()>>> + Send + Sync>;

fn run_ranks(n: usize, program: Program) {
    let rt = Runtime::new(Config::default().with_workers(n).with_time_mode(TimeMode::Virtual)).unwrap();
    rt.run(move |pe| {
        let mpi = mpi_init(pe, n).unwrap();
        // Created before any peer can signal it.
        let go = pe.create_future();
        pe.spawn(program(mpi, go));
    })
    .unwrap();
}

/// Signal to `rank` through its first future.
fn signal(pe: &Pe, rank: u32) {
    pe.fulfill(FutureHandle { home_pe: rank, id: 0 }, Vec::new()).unwrap();
}

async fn wait_signal(pe: &Pe, h: FutureHandle) {
    pe.wait_future(h).await.unwrap();
}

fn bytes(seed: usize, len: usize) -> Vec<u8> {
    (0..len).map(|i| (i * 17 + seed * 5) as u8).collect()
}

#[test]
fn ranks_equal_pes_and_mismatch_is_startup_error() {
    let rt = Runtime::new(Config::default().with_workers(4)).unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s2 = seen.clone();
    rt.run(move |pe| {
        let m = mpi_init(pe, 4).unwrap();
        assert_eq!(m.size(), 4);
        s2.lock().unwrap().push((m.rank(), pe.id()));
        assert!(matches!(mpi_init(pe, 5), Err(RuntimeError::Startup { .. })));
    })
    .unwrap();
    let mut seen = seen.lock().unwrap().clone();
    seen.sort();
    assert_eq!(seen, (0..4).map(|r| (r, r)).collect::<Vec<_>>());
}

#[test]
fn host_and_device_payloads_arrive_intact() {
    let out: Arc<Mutex<Vec<Vec<u8>>>> = Arc::default();
    let o2 = out.clone();
    run_ranks(
        2,
        Arc::new(move |m: Mpi, _go: FutureHandle| {
            let out = o2.clone();
            Box::pin(async move {
                let pe = m.pe().clone();
                let dev = pe.device().clone();
                let mib = bytes(1, 1 << 20);
                if m.rank() == 0 {
                    m.send(Buffer::Host(42i64.to_le_bytes().to_vec()), 8, Datatype::Byte, 1, 7).await.unwrap();
                    let b = dev.alloc(0, 1 << 20).unwrap();
                    dev.write(b, &mib).unwrap();
                    m.send(Buffer::Device(b.region()), 1 << 20, Datatype::Byte, 1, 8).await.unwrap();
                } else {
                    let s = m.recv(Buffer::Host(Vec::new()), 8, Datatype::Byte, 0, 7).await.unwrap();
                    assert_eq!((s.source, s.tag, s.count, s.error.as_deref()), (0, 7, 8, None));
                    out.lock().unwrap().push(s.data.unwrap());
                    let b = dev.alloc(1, 1 << 20).unwrap();
                    let s = m.recv(Buffer::Device(b.region()), 1 << 20, Datatype::Byte, 0, 8).await.unwrap();
                    assert_eq!(s.count, 1 << 20);
                    assert_eq!(dev.read(b).unwrap(), mib);
                    out.lock().unwrap().push(vec![1]);
                    assert!(m.queues_exclusive());
                }
            })
        }),
    );
    let out = out.lock().unwrap();
    assert_eq!(out[0], 42i64.to_le_bytes().to_vec());
    assert_eq!(out.len(), 2);
}

/// Per-tag receives issued in random order must see per-tag send order,
/// whether they are posted before or after the messages arrive.
#[test]
fn random_programs_are_non_overtaking() {
    non_overtaking(40);
}

pub fn non_overtaking(cases: u64) {
    for case in 0..cases {
        for recv_first in [false, true] {
            let mut rng = StdRng::seed_from_u64(case);
            let n = rng.random_range(1..30);
            let sends: Vec<(i32, bool, usize)> = (0..n)
                .map(|i| (rng.random_range(0..3), rng.random_bool(0.5), [1, 64, 9000][i % 3]))
                .collect();
            let mut recv_order: Vec<usize> = (0..n).collect();
            recv_order.shuffle(&mut rng);
            let got: Arc<Mutex<Vec<(i32, usize, Vec<u8>)>>> = Arc::default();
            let (g2, sends2) = (got.clone(), Arc::new(sends.clone()));
            run_ranks(
                2,
                Arc::new(move |m: Mpi, go: FutureHandle| {
                    let (got, sends, order) = (g2.clone(), sends2.clone(), recv_order.clone());
                    Box::pin(async move {
                        let pe = m.pe().clone();
                        let dev = pe.device().clone();
                        if m.rank() == 0 {
                            if recv_first {
                                wait_signal(&pe, go).await;
                            }
                            let mut reqs = Vec::new();
                            for (i, &(tag, device, len)) in sends.iter().enumerate() {
                                let data = bytes(i, len);
                                let buf = if device {
                                    let b = dev.alloc(0, len as u64).unwrap();
                                    dev.write(b, &data).unwrap();
                                    Buffer::Device(b.region())
                                } else {
                                    Buffer::Host(data)
                                };
                                reqs.push(m.isend(buf, len, Datatype::Byte, 1, tag).unwrap());
                            }
                            if !recv_first {
                                signal(&pe, 1);
                            }
                            m.waitall(reqs).await;
                        } else {
                            if !recv_first {
                                wait_signal(&pe, go).await;
                            }
                            // The jth receive for tag t is issued for the jth send with tag t,
                            // but receives for different tags interleave randomly.
                            let mut reqs = Vec::new();
                            let mut per_tag: Vec<Vec<usize>> = vec![Vec::new(); 3];
                            for (i, s) in sends.iter().enumerate() {
                                per_tag[s.0 as usize].push(i);
                            }
                            let mut cursor = [0usize; 3];
                            let mut issued = Vec::new();
                            for &i in &order {
                                let t = sends[i].0 as usize;
                                let idx = per_tag[t][cursor[t]];
                                cursor[t] += 1;
                                let len = 9000;
                                let buf = if i % 2 == 0 {
                                    Buffer::Host(Vec::new())
                                } else {
                                    Buffer::Device(dev.alloc(1, len as u64).unwrap().region())
                                };
                                issued.push((t as i32, idx, buf.clone()));
                                reqs.push(m.irecv(buf, len, Datatype::Byte, 0, t as i32).unwrap());
                            }
                            if recv_first {
                                signal(&pe, 0);
                            }
                            let statuses = m.waitall(reqs).await;
                            for ((tag, idx, buf), s) in issued.into_iter().zip(statuses) {
                                assert_eq!(s.error, None);
                                assert_eq!(s.tag, tag);
                                let data = match buf {
                                    Buffer::Host(_) => s.data.unwrap(),
                                    Buffer::Device(r) => {
                                        let mut d = dev.read(r).unwrap();
                                        d.truncate(s.count);
                                        d
                                    }
                                };
                                got.lock().unwrap().push((tag, idx, data));
                            }
                            assert!(m.queues_exclusive());
                        }
                    })
                }),
            );
            let got = got.lock().unwrap();
            assert_eq!(got.len(), n);
            for (_, idx, data) in got.iter() {
                assert_eq!(*data, bytes(*idx, sends[*idx].2), "case {case}, send {idx}");
            }
        }
    }
}

#[test]
fn any_tag_takes_the_earliest_arrival() {
    let got: Arc<Mutex<Vec<i32>>> = Arc::default();
    let g2 = got.clone();
    run_ranks(
        2,
        Arc::new(move |m: Mpi, go: FutureHandle| {
            let got = g2.clone();
            Box::pin(async move {
                let pe = m.pe().clone();
                if m.rank() == 0 {
                    for (i, tag) in [3, 9, 3].into_iter().enumerate() {
                        m.isend(Buffer::Host(vec![i as u8]), 1, Datatype::Byte, 1, tag).unwrap();
                    }
                    signal(&pe, 1);
                } else {
                    wait_signal(&pe, go).await;
                    assert_eq!(m.unexpected_len(), 3);
                    let a = m.recv(Buffer::Host(Vec::new()), 1, Datatype::Byte, 0, ANY_TAG).await.unwrap();
                    let b = m.recv(Buffer::Host(Vec::new()), 1, Datatype::Byte, 0, 3).await.unwrap();
                    let c = m.recv(Buffer::Host(Vec::new()), 1, Datatype::Byte, 0, ANY_TAG).await.unwrap();
                    assert_eq!((a.data.unwrap(), b.data.unwrap(), c.data.unwrap()), (vec![0], vec![2], vec![1]));
                    got.lock().unwrap().extend([a.tag, b.tag, c.tag]);
                }
            })
        }),
    );
    assert_eq!(*got.lock().unwrap(), vec![3, 3, 9]);
}

#[test]
fn host_and_device_paths_give_identical_bytes_and_status() {
    transparency();
}

pub fn transparency() {
    let statuses: Arc<Mutex<Vec<(bool, Status, Vec<u8>)>>> = Arc::default();
    let s2 = statuses.clone();
    run_ranks(
        2,
        Arc::new(move |m: Mpi, _go: FutureHandle| {
            let out = s2.clone();
            Box::pin(async move {
                let pe = m.pe().clone();
                let dev = pe.device().clone();
                let values: Vec<f64> = (0..5000).map(|i| i as f64 * 0.25).collect();
                let raw: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                for (k, device) in [false, true].into_iter().enumerate() {
                    let tag = 20 + k as i32;
                    if m.rank() == 0 {
                        let buf = if device {
                            let b = dev.alloc(0, raw.len() as u64).unwrap();
                            dev.write(b, &raw).unwrap();
                            Buffer::Device(b.region())
                        } else {
                            Buffer::host_f64(&values)
                        };
                        m.send(buf, values.len(), Datatype::F64, 1, tag).await.unwrap();
                    } else {
                        let b = dev.alloc(1, raw.len() as u64).unwrap();
                        let buf = if device { Buffer::Device(b.region()) } else { Buffer::Host(Vec::new()) };
                        let mut s = m.recv(buf, values.len(), Datatype::F64, 0, tag).await.unwrap();
                        let data = if device { dev.read(b).unwrap() } else { s.data.take().unwrap() };
                        out.lock().unwrap().push((device, s, data));
                    }
                }
            })
        }),
    );
    let s = statuses.lock().unwrap();
    let (host, dev) = (&s[0], &s[1]);
    assert_eq!(host.2, dev.2);
    assert_eq!(
        (host.1.source, host.1.count, host.1.error.clone()),
        (dev.1.source, dev.1.count, dev.1.error.clone())
    );
}

#[test]
fn short_receive_reports_truncation() {
    let err: Arc<Mutex<Option<String>>> = Arc::default();
    let e2 = err.clone();
    run_ranks(
        2,
        Arc::new(move |m: Mpi, _go: FutureHandle| {
            let err = e2.clone();
            Box::pin(async move {
                if m.rank() == 0 {
                    m.send(Buffer::Host(vec![0; 100]), 100, Datatype::Byte, 1, 1).await.unwrap();
                } else {
                    let s = m.recv(Buffer::Host(Vec::new()), 10, Datatype::Byte, 0, 1).await.unwrap();
                    *err.lock().unwrap() = s.error;
                }
            })
        }),
    );
    assert!(err.lock().unwrap().is_some());
}
