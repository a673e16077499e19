#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rftwin_core::scenario::{GridSpec, Scenario, Tap, TapLine};
use rftwin_core::{Complex32, Complex64};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Grid with 10 samples per snapshot, for short streams with many updates.
pub fn small_grid(num_bins: u16) -> GridSpec {
    GridSpec::new(100, num_bins, 1)
}

pub fn random_gain(r: &mut ChaCha8Rng) -> Complex32 {
    Complex32::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
}

pub fn random_signal(r: &mut ChaCha8Rng, len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect()
}

/// Up to `max_taps` taps at distinct random bins.
pub fn random_tap_line(r: &mut ChaCha8Rng, num_bins: u16, max_taps: usize) -> TapLine {
    let n = r.random_range(0..=max_taps.min(num_bins as usize));
    let mut bins: Vec<u16> = Vec::new();
    while bins.len() < n {
        let b = r.random_range(0..num_bins);
        if !bins.contains(&b) {
            bins.push(b);
        }
    }
    bins.sort_unstable();
    TapLine::new(bins.into_iter().map(|b| Tap::new(b, random_gain(r))).collect()).unwrap()
}

pub fn random_scenario(r: &mut ChaCha8Rng, grid: GridSpec, nodes: u16, ants: u8, duration_ms: u32) -> Scenario {
    let mut s = Scenario::new(grid, nodes, ants, duration_ms).unwrap();
    let links: Vec<_> = s.links().collect();
    for t in 0..duration_ms {
        for &l in &links {
            s.set_tap_line(l, t, random_tap_line(r, grid.num_bins, 4)).unwrap();
        }
    }
    s
}

pub fn dense(line: &TapLine, num_bins: usize) -> Vec<Complex64> {
    let mut h = vec![Complex64::new(0.0, 0.0); num_bins];
    for t in line.taps() {
        h[t.bin as usize] += Complex64::new(t.gain.re as f64, t.gain.im as f64);
    }
    h
}

/// Direct convolution of a stream starting at sample 0 (zero before it),
/// with the dense response in force at each output sample taken from
/// `schedule`: `(effective_sample, line)` pairs in ascending order, the
/// first at 0.
pub fn dense_oracle(x: &[Complex64], schedule: &[(u64, TapLine)], num_bins: usize) -> Vec<Complex64> {
    let responses: Vec<(u64, Vec<Complex64>)> = schedule.iter().map(|(e, l)| (*e, dense(l, num_bins))).collect();
    (0..x.len())
        .map(|n| {
            let h = &responses.iter().rev().find(|(e, _)| *e <= n as u64).unwrap().1;
            let mut acc = Complex64::new(0.0, 0.0);
            for (d, hd) in h.iter().enumerate() {
                if d <= n {
                    acc += hd * x[n - d];
                }
            }
            acc
        })
        .collect()
}

pub fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Random partition of `len` into consecutive chunk lengths.
pub fn random_partition(r: &mut ChaCha8Rng, len: usize, max_chunk: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = len;
    while left > 0 {
        let c = r.random_range(1..=max_chunk.min(left));
        out.push(c);
        left -= c;
    }
    out
}
