//! Virtual-time benchmark results checked against the closed-form cost model:
//! inter-node link 2 us / 12.5 GB/s, device copies 10 GB/s.

use charmlet::bench::{self, Api, BenchConfig, BenchRow, Benchmark, Mode};
use charmlet::config::Config;
use charmlet::runtime::envelope;
use charmlet::time::{transfer_ns, TimeMode};

const MIB4: usize = 4 << 20;
const LINK_BW: f64 = 12.5e9;
const COPY_BW: f64 = 10e9;
const LINK_LAT_NS: u64 = 2000;

fn model_config() -> Config {
    let mut c = Config::default().with_workers(2).with_time_mode(TimeMode::Virtual);
    c.ranks_per_node = 1;
    c.device.bandwidth_gbps = Some(10.0);
    c.link.inter.bandwidth_gbps = 12.5;
    c
}

fn run(b: Benchmark, api: Api, mode: Mode, sizes: &[usize]) -> Vec<BenchRow> {
    let mut cfg = BenchConfig::new(b, api, mode);
    cfg.sizes = sizes.to_vec();
    cfg.iterations = Some(3);
    cfg.warmup = Some(1);
    bench::run(&model_config(), &cfg).unwrap()
}

fn one(b: Benchmark, api: Api, mode: Mode, size: usize) -> f64 {
    run(b, api, mode, &[size])[0].value
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want
}

#[test]
fn large_message_latency_ratio_is_near_three_and_a_half() {
    latency_ratio();
}

pub fn latency_ratio() {
    for api in [Api::CharmMessaging, Api::CharmChannel, Api::Mpi] {
        let host = one(Benchmark::Latency, api, Mode::Host, MIB4);
        let dev = one(Benchmark::Latency, api, Mode::Device, MIB4);
        let ratio = host / dev;
        assert!(within(ratio, 3.5, 0.2), "{}: ratio {ratio}", api.as_str());
    }
}

#[test]
fn direct_latency_matches_rendezvous_closed_form() {
    // RTS, pull request and payload each cross the link once.
    let want = 3 * LINK_LAT_NS + transfer_ns(MIB4 as u64, LINK_BW);
    let got = one(Benchmark::Latency, Api::CharmChannel, Mode::Device, MIB4);
    assert_eq!((got * 1e3).round() as u64, want);
}

#[test]
fn large_message_bandwidth_approaches_the_model() {
    bandwidth_asymptotes();
}

pub fn bandwidth_asymptotes() {
    // MB/s: 1e3 bytes/ns.
    let link = LINK_BW / 1e6;
    let staged = 1.0 / (2.0 / COPY_BW + 1.0 / LINK_BW) / 1e6;
    assert!((staged - 3571.4).abs() < 0.1);
    for api in [Api::CharmMessaging, Api::CharmChannel, Api::Mpi] {
        let dev = one(Benchmark::Bandwidth, api, Mode::Device, MIB4);
        assert!(within(dev, link, 0.05), "{} device: {dev}", api.as_str());
        let host = one(Benchmark::Bandwidth, api, Mode::Host, MIB4);
        assert!(within(host, staged, 0.05), "{} host: {host}", api.as_str());
    }
}

#[test]
fn channel_saves_exactly_one_metadata_envelope() {
    let env = envelope::encoded_len(1, 0) as u64;
    let msg = one(Benchmark::Latency, Api::CharmMessaging, Mode::Device, 8);
    let ch = one(Benchmark::Latency, Api::CharmChannel, Mode::Device, 8);
    let diff = (msg * 1e3).round() as u64 - (ch * 1e3).round() as u64;
    assert_eq!(diff, transfer_ns(env, LINK_BW));
}

#[test]
fn ordering_and_monotonicity_hold_at_every_size() {
    ordering();
}

pub fn ordering() {
    let sizes = bench::parse_sizes("1:4194304:x4").unwrap();
    for b in [Benchmark::Latency, Benchmark::Bandwidth] {
        let ch = run(b, Api::CharmChannel, Mode::Device, &sizes);
        let msg = run(b, Api::CharmMessaging, Mode::Device, &sizes);
        let host = run(b, Api::CharmMessaging, Mode::Host, &sizes);
        for i in 0..sizes.len() {
            let (c, m, h) = (ch[i].value, msg[i].value, host[i].value);
            match b {
                Benchmark::Latency => assert!(c <= m && m <= h, "size {}: {c} {m} {h}", sizes[i]),
                Benchmark::Bandwidth => assert!(c >= m && m >= h, "size {}: {c} {m} {h}", sizes[i]),
            }
        }
        if b == Benchmark::Latency {
            for rows in [&ch, &msg, &host] {
                assert!(rows.windows(2).all(|w| w[0].value <= w[1].value));
            }
        }
    }
}

#[test]
fn identical_runs_write_identical_csv() {
    let dir = std::env::temp_dir();
    let mut files = Vec::new();
    for k in 0..2 {
        let path = dir.join(format!("charmlet-bench-det-{}-{k}.csv", std::process::id()));
        let mut rows = run(Benchmark::Latency, Api::Mpi, Mode::Host, &[1, 1024, 65536]);
        rows.extend(run(Benchmark::Bandwidth, Api::CharmMessaging, Mode::Device, &[1, 1024, 65536]));
        bench::write_csv(&path, &rows).unwrap();
        files.push(std::fs::read(&path).unwrap());
        std::fs::remove_file(&path).unwrap();
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files.remove(0)).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "benchmark,api,mode,size_bytes,metric,value,unit,time_mode"
    );
}
