//! One PASS/FAIL line per primary acceptance criterion, each within its
//! time limit. Exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

#[allow(dead_code, unused_imports)]
#[path = "bench_model.rs"]
mod bench_model;
#[allow(dead_code, unused_imports)]
#[path = "jacobi.rs"]
mod jacobi;
#[allow(dead_code, unused_imports)]
#[path = "matching.rs"]
mod matching;
#[allow(dead_code, unused_imports)]
#[path = "mpi.rs"]
mod mpi;
#[allow(dead_code, unused_imports)]
#[path = "protocol_split.rs"]
mod protocol_split;
#[allow(dead_code, unused_imports)]
#[path = "tag_codec.rs"]
mod tag_codec;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    check: fn(),
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            name: "tag codec: 10000 round-trips per scheme, raw values match bit-layout oracle",
            limit: secs(1),
            check: || {
                tag_codec::random_round_trips(1, 10_000);
                tag_codec::raw_values();
            },
        },
        Criterion {
            name: "matching engine: 1000 random sequences per backend match reference matcher",
            limit: secs(30),
            check: || {
                matching::check_random(matching::common::Backend::Loopback, 101, 1000);
                matching::check_random(matching::common::Backend::Tcp, 102, 1000);
                matching::masked_first_and_third();
                matching::fifo_thousand();
            },
        },
        Criterion {
            name: "protocol split: payload hashes equal across eager threshold on loopback and TCP",
            limit: None,
            check: protocol_split::payload_hashes,
        },
        Criterion {
            name: "devmsg two-phase: entries once, after payloads, tags agree, both orders",
            limit: None,
            check: devmsg::two_phase,
        },
        Criterion {
            name: "channel lockstep: 1000 random schedules match reference, zero envelopes",
            limit: None,
            check: || channel::lockstep(201),
        },
        Criterion {
            name: "cost model: latency ratio 3.5 +-20%, direct bw 12.5 GB/s +-5%, staged bw 3.571 GB/s +-5%",
            limit: secs(60),
            check: || {
                bench_model::latency_ratio();
                bench_model::bandwidth_asymptotes();
            },
        },
        Criterion {
            name: "ordering: channel <= messaging <= host-staging latency, reversed bandwidth",
            limit: None,
            check: bench_model::ordering,
        },
        Criterion {
            name: "jacobi3d: 64^3 x 100, PEs 1/2/4/8, five modes match oracle bitwise; decomposition",
            limit: secs(120),
            check: || {
                jacobi::modes_match_oracle([64, 64, 64], 100);
                jacobi::decomposition_vs_brute_force();
            },
        },
        Criterion {
            name: "mpi facade: non-overtaking random programs, host/device transparency",
            limit: secs(30),
            check: || {
                mpi::non_overtaking(200);
                mpi::transparency();
            },
        },
    ]
}

fn main() -> ExitCode {
    // Keep failure messages on one line of our own output.
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.check));
        let took = start.elapsed();
        let verdict = match outcome {
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(msg.lines().next().unwrap_or("").to_string())
            }
            Ok(()) => match c.limit {
                Some(l) if took > l => Err(format!("took {took:.2?}, limit {l:.0?}")),
                _ => Ok(()),
            },
        };
        match verdict {
            Ok(()) => println!("PASS  {}  ({took:.2?})", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}  ({took:.2?}): {why}", c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
