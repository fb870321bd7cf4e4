use charmlet::config::Config;
use charmlet::jacobi::{self, decompose, interface_area, JacobiConfig, JacobiMode};
use charmlet::time::TimeMode;

/// Naive reference: 3D vectors with explicit boundary handling.
fn oracle(dims: [usize; 3], iters: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let get = |u: &Vec<Vec<Vec<f64>>>, i: isize, j: isize, k: isize| -> f64 {
        if i < 0 {
            return 1.0;
        }
        if i >= nx as isize || j < 0 || j >= ny as isize || k < 0 || k >= nz as isize {
            return 0.0;
        }
        u[i as usize][j as usize][k as usize]
    };
    let mut u = vec![vec![vec![0.0f64; nz]; ny]; nx];
    for _ in 0..iters {
        let mut v = u.clone();
        for i in 0..nx as isize {
            for j in 0..ny as isize {
                for k in 0..nz as isize {
                    let s = get(&u, i - 1, j, k)
                        + get(&u, i + 1, j, k)
                        + get(&u, i, j - 1, k)
                        + get(&u, i, j + 1, k)
                        + get(&u, i, j, k - 1)
                        + get(&u, i, j, k + 1);
                    v[i as usize][j as usize][k as usize] = s / 6.0;
                }
            }
        }
        u = v;
    }
    u.into_iter().flatten().flatten().collect()
}

fn brute_decompose(dims: [usize; 3], n: usize) -> Option<[usize; 3]> {
    let mut all = Vec::new();
    for px in 1..=n {
        for py in 1..=n {
            for pz in 1..=n {
                if px * py * pz == n && dims[0] % px == 0 && dims[1] % py == 0 && dims[2] % pz == 0 {
                    all.push((interface_area(dims, [px, py, pz]), px, py, pz));
                }
            }
        }
    }
    all.sort();
    all.first().map(|&(_, a, b, c)| [a, b, c])
}

fn config(pes: usize) -> Config {
    Config::default().with_workers(pes).with_time_mode(TimeMode::Virtual)
}

#[test]
fn decomposition_matches_brute_force() {
    decomposition_vs_brute_force();
}

pub fn decomposition_vs_brute_force() {
    for dims in [[64, 64, 64], [12, 8, 6], [30, 20, 10], [7, 9, 16], [16, 16, 4]] {
        for n in 1..=64 {
            let got = decompose(dims, n).ok();
            assert_eq!(got, brute_decompose(dims, n), "dims {dims:?} n {n}");
        }
    }
}

#[test]
fn sequential_matches_naive_oracle() {
    let dims = [6, 5, 4];
    assert_eq!(jacobi::sequential(dims, 25), oracle(dims, 25));
}

#[test]
fn max_change_is_non_increasing_after_ten_iterations() {
    let dims = [8, 8, 8];
    let mut prev = jacobi::sequential(dims, 10);
    let mut last = f64::INFINITY;
    for it in 11..=60 {
        let cur = jacobi::sequential(dims, it);
        let d = jacobi::max_norm_diff(&prev, &cur);
        assert!(d <= last, "iteration {it}: {d} > {last}");
        last = d;
        prev = cur;
    }
}

#[test]
fn every_mode_is_bitwise_equal_to_the_oracle() {
    modes_match_oracle([8, 8, 8], 12);
}

pub fn modes_match_oracle(dims: [usize; 3], iters: usize) {
    let want = oracle(dims, iters);
    for pes in [1, 2, 4, 8] {
        for mode in JacobiMode::ALL {
            let cfg = JacobiConfig { dims, iters, mode, gather: true };
            let r = jacobi::run(&config(pes), &cfg).unwrap();
            assert_eq!(r.grid, decompose(dims, pes).unwrap());
            let got = r.field.unwrap();
            assert!(jacobi::max_norm_diff(&got, &want) <= 1e-12);
            assert!(got == want, "{} on {pes} PEs differs by {}", mode.as_str(), jacobi::max_norm_diff(&got, &want));
        }
    }
}

#[test]
fn device_modes_beat_host_modes_in_virtual_time() {
    let dims = [32, 32, 32];
    let time = |mode: JacobiMode| {
        let cfg = JacobiConfig { dims, iters: 10, mode, gather: false };
        let a = jacobi::run(&config(8), &cfg).unwrap();
        assert!(a.comm_time <= a.total_time);
        // Payload-only modes have no fan-in order effects.
        if matches!(mode, JacobiMode::ChannelDevice | JacobiMode::MpiHost | JacobiMode::MpiDevice) {
            let b = jacobi::run(&config(8), &cfg).unwrap();
            assert_eq!((a.total_time, a.comm_time), (b.total_time, b.comm_time), "{}", mode.as_str());
        }
        a.comm_time
    };
    let host = time(JacobiMode::HostStaging);
    let mpi_host = time(JacobiMode::MpiHost);
    for mode in [JacobiMode::MessagingDevice, JacobiMode::ChannelDevice, JacobiMode::MpiDevice] {
        let t = time(mode);
        assert!(t < host && t < mpi_host, "{}: {t} vs host {host} / {mpi_host}", mode.as_str());
    }
    assert!(time(JacobiMode::ChannelDevice) <= time(JacobiMode::MessagingDevice));
}

#[test]
fn halo_counts_follow_topology() {
    // (2,2,2): every block is a corner with 3 neighbors.
    let cfg = JacobiConfig { dims: [8, 8, 8], iters: 5, mode: JacobiMode::ChannelDevice, gather: false };
    let r = jacobi::run(&config(8), &cfg).unwrap();
    assert_eq!(r.halo_sends, 8 * 3 * 5);
    let b = jacobi::Block::new([12, 12, 12], [3, 3, 3], 13);
    assert_eq!(b.neighbor_count(), 6);
}

#[test]
fn weak_dims_keep_block_size() {
    for pes in [1, 2, 4, 8, 16] {
        let d = jacobi::weak_dims([16, 16, 16], pes).unwrap();
        let g = decompose(d, pes).unwrap();
        assert_eq!([d[0] / g[0], d[1] / g[1], d[2] / g[2]], [16, 16, 16]);
    }
}
