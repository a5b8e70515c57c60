//! Wall-time and combine-count measurements for the scan paths.

use std::fmt::Write as _;
use std::time::Instant;

use kflayers::kalman::{CovMap, CovOp};
use kflayers::rng::Rng;
use kflayers::scan::{parallel_combine_count, scan_parallel, scan_sequential, CountingOp};

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub length: usize,
    pub channels: usize,
    pub seq_ns: f64,
    pub par_ns: f64,
    pub seq_combines: usize,
    pub par_combines: usize,
    pub par_combines_expected: usize,
}

/// Time sequential vs parallel scans of covariance-map elements at each
/// length. Reported times are per scan of one channel, minimum over
/// `repeats` trials, with enough inner iterations per trial to dominate
/// timer noise. Combine counts are measured separately, once.
pub fn bench_scan(lengths: &[usize], channels: usize, repeats: usize) -> Vec<BenchRow> {
    assert!(lengths.iter().all(|&k| k >= 1), "lengths must be >= 1");
    assert!(channels >= 1 && repeats >= 1);
    let mut rng = Rng::new(0xBE4C);
    let mut rows = Vec::with_capacity(lengths.len());
    for &k in lengths {
        let seqs: Vec<Vec<CovMap<f64>>> = (0..channels)
            .map(|_| {
                (0..k)
                    .map(|_| {
                        CovMap::filter_step(
                            rng.range(-1.0, 1.0),
                            rng.range(0.01, 1.0),
                            rng.range(0.01, 2.0),
                        )
                    })
                    .collect()
            })
            .collect();

        let iters = (100_000 / (k * channels)).max(1);
        let time_path = |parallel: bool| -> f64 {
            let mut best = f64::INFINITY;
            for _ in 0..repeats {
                let start = Instant::now();
                for _ in 0..iters {
                    for seq in &seqs {
                        if parallel {
                            std::hint::black_box(scan_parallel(&CovOp::default(), seq));
                        } else {
                            std::hint::black_box(scan_sequential(&CovOp::default(), seq));
                        }
                    }
                }
                let per_scan =
                    start.elapsed().as_nanos() as f64 / (iters as f64 * channels as f64);
                best = best.min(per_scan);
            }
            best
        };
        let seq_ns = time_path(false);
        let par_ns = time_path(true);

        let inner = CovOp::default();
        let counting = CountingOp::new(&inner);
        scan_sequential(&counting, &seqs[0]);
        let seq_combines = counting.calls();
        let counting = CountingOp::new(&inner);
        scan_parallel(&counting, &seqs[0]);
        let par_combines = counting.calls();

        rows.push(BenchRow {
            length: k,
            channels,
            seq_ns,
            par_ns,
            seq_combines,
            par_combines,
            par_combines_expected: parallel_combine_count(k),
        });
    }
    rows
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "length,channels,seq_ns_per_scan,par_ns_per_scan,seq_combines,par_combines,par_combines_expected\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.length,
            r.channels,
            r.seq_ns,
            r.par_ns,
            r.seq_combines,
            r.par_combines,
            r.par_combines_expected
        );
    }
    s
}

/// Least-squares slope of `ln(time)` against `ln(length)`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.length as f64).ln(), r.seq_ns.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    cov / var
}
