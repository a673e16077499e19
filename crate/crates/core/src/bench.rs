//! Sustained `apply_taps` throughput.

use std::time::Instant;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{EngineError, IqChunk, LinkFilterState};
use crate::scenario::{GridSpec, Tap, TapLine};

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub links: usize,
    pub samples_per_link: u64,
    pub per_link_msps: Vec<f64>,
    pub aggregate_msps: f64,
}

/// A seeded 4-tap line spread over the whole grid.
pub fn bench_taps(grid: GridSpec, seed: u64) -> TapLine {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut bins: Vec<u16> = Vec::new();
    while bins.len() < 4 {
        let b = r.random_range(0..grid.num_bins);
        if !bins.contains(&b) {
            bins.push(b);
        }
    }
    bins.sort_unstable();
    TapLine::new(
        bins.into_iter()
            .map(|b| Tap::new(b, Complex32::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))))
            .collect(),
    )
    .expect("distinct bins")
}

fn run_one(grid: GridSpec, seed: u64, chunk_len: usize, chunks: usize) -> Result<f64, EngineError> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rate = grid.sample_rate_hz();
    let input: Vec<Complex64> = (0..chunk_len)
        .map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect();
    let mut st = LinkFilterState::with_taps(grid, bench_taps(grid, seed))?;
    let mut out = vec![Complex64::new(0.0, 0.0); chunk_len];
    // Warm up caches and the branch predictor.
    let mut x = IqChunk::new(input, 0, rate);
    st.apply_into(&x, &mut out)?;
    let t0 = Instant::now();
    for _ in 0..chunks {
        x.start_index = st.position();
        out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        st.apply_into(&x, &mut out)?;
    }
    std::hint::black_box(&out);
    let dt = t0.elapsed().as_secs_f64();
    Ok((chunk_len * chunks) as f64 / dt / 1e6)
}

/// Runs `links` independent links, one thread each, over `ms` milliseconds
/// of samples (one chunk per millisecond).
pub fn run_bench(links: usize, ms: usize, seed: u64) -> Result<BenchReport, EngineError> {
    let grid = GridSpec::default();
    let sps = grid.samples_per_snapshot().ok_or(EngineError::NonIntegralSnapshot)? as usize;
    let t0 = Instant::now();
    let per: Vec<Result<f64, EngineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..links)
            .map(|i| s.spawn(move || run_one(grid, seed.wrapping_add(i as u64), sps, ms)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench thread")).collect()
    });
    let wall = t0.elapsed().as_secs_f64();
    let per_link_msps = per.into_iter().collect::<Result<Vec<_>, _>>()?;
    let total = (links * sps * (ms + 1)) as f64;
    Ok(BenchReport {
        links,
        samples_per_link: (sps * ms) as u64,
        aggregate_msps: if links == 1 { per_link_msps[0] } else { total / wall / 1e6 },
        per_link_msps,
    })
}
