mod common;

use common::*;
use proptest::prelude::*;
use rftwin_core::engine::{IqChunk, LinkFilterState};
use rftwin_core::extract::{bin_rays, build_scenario, quantize_delay, select_taps, RayRecord, RayTrace};
use rftwin_core::format::{deserialize_scenario, serialize_scenario, FormatError, HEADER_LEN};
use rftwin_core::scenario::{path_loss_db, validate_scenario, GridSpec, LinkId, Tap, TapLine};
use rftwin_core::sounder::{estimate_cir, probe_signal, SoundingSequence};
use rftwin_core::{Complex32, Complex64};

fn rate(grid: GridSpec) -> f64 {
    grid.sample_rate_hz()
}

fn run_chunks(state: &mut LinkFilterState, x: &[Complex64], parts: &[usize]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(x.len());
    let mut off = 0;
    for &p in parts {
        let c = IqChunk::new(x[off..off + p].to_vec(), off as u64, rate(state.grid()));
        out.extend(state.apply_taps(&c).unwrap().samples);
        off += p;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_loss_scale(seed in any::<u64>(), alpha in 1e-3f32..1e3) {
        let mut r = rng(seed);
        let line = random_tap_line(&mut r, 512, 4);
        prop_assume!(!line.is_empty());
        // Scale in f64 so the check sees only the definition, not f32 rounding.
        let scaled = TapLine::new(
            line.taps()
                .iter()
                .map(|t| Tap::new(t.bin, Complex32::new(t.gain.re * alpha, t.gain.im * alpha)))
                .collect(),
        )
        .unwrap();
        let exact: f64 = line
            .taps()
            .iter()
            .map(|t| (t.gain.re as f64 * alpha as f64).powi(2) + (t.gain.im as f64 * alpha as f64).powi(2))
            .sum();
        let d = path_loss_db(&line) - 20.0 * (alpha as f64).log10();
        prop_assert!((-10.0 * exact.log10() - d).abs() < 1e-9);
        // Stored f32 products differ from the exact ones by at most a few ulp.
        prop_assert!((path_loss_db(&scaled) - d).abs() < 1e-5);
    }

    #[test]
    fn scenario_round_trip(seed in any::<u64>(), nodes in 2u16..4, ants in 1u8..=2, dur in 1u32..4) {
        let mut r = rng(seed);
        let s = random_scenario(&mut r, GridSpec::default(), nodes, ants, dur);
        let bytes = serialize_scenario(&s).unwrap();
        prop_assert_eq!(deserialize_scenario(&bytes).unwrap(), s);
    }

    #[test]
    fn truncation_rejected(seed in any::<u64>(), cut in 0usize..10_000) {
        let mut r = rng(seed);
        let s = random_scenario(&mut r, GridSpec::default(), 2, 1, 2);
        let bytes = serialize_scenario(&s).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(deserialize_scenario(&bytes[..cut]).is_err());
    }

    #[test]
    fn invalid_payload_rejected_past_checksum(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut s = random_scenario(&mut r, GridSpec::default(), 2, 1, 1);
        s.set_tap_line(LinkId::siso(0, 1), 0, TapLine::single(3, Complex32::new(1.0, 0.0))).unwrap();
        let mut bytes = serialize_scenario(&s).unwrap();
        // First tap line is link 0->1: count byte then the bin.
        bytes[HEADER_LEN + 1..HEADER_LEN + 3].copy_from_slice(&600u16.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        prop_assert!(matches!(deserialize_scenario(&bytes), Err(FormatError::Invalid(_))));
    }

    #[test]
    fn select_taps_optimal(seed in any::<u64>(), nb in 1usize..=12, k in 0usize..=4) {
        let mut r = rng(seed);
        let cir: Vec<Complex64> = (0..nb)
            .map(|_| if r.random_bool(0.3) { Complex64::new(0.0, 0.0) } else { Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)) })
            .collect();
        let line = select_taps(&cir, k);
        let got: f64 = line.taps().iter().map(|t| cir[t.bin as usize].norm_sqr()).sum();
        prop_assert!(line.len() <= k);
        prop_assert!(line.taps().windows(2).all(|w| w[0].bin < w[1].bin));
        prop_assert!(line.taps().iter().all(|t| cir[t.bin as usize] != Complex64::new(0.0, 0.0)));
        for mask in 0u32..(1 << nb) {
            if mask.count_ones() as usize <= k {
                let p: f64 = (0..nb).filter(|i| mask >> i & 1 == 1).map(|i| cir[i].norm_sqr()).sum();
                prop_assert!(got >= p);
            }
        }
    }

    #[test]
    fn single_ray_magnitude_and_bound(delay_ns in 0.0f64..5200.0, gain_db in -150.0f64..20.0, phase in -10.0f64..10.0) {
        let grid = GridSpec::default();
        let delay_s = delay_ns * 1e-9;
        let bin = quantize_delay(delay_s, &grid);
        prop_assert!((bin as f64 * grid.bin_duration_ns as f64 - delay_ns).abs() <= grid.bin_duration_ns as f64 / 2.0 + 1e-6);
        let (cir, rep) = bin_rays(&[RayRecord::new(delay_s, gain_db, phase)], &grid);
        if bin < grid.num_bins as u64 {
            let nz: Vec<_> = cir.iter().enumerate().filter(|(_, a)| a.norm() > 0.0).collect();
            prop_assert_eq!(nz.len(), 1);
            prop_assert_eq!(nz[0].0 as u64, bin);
            let want = 10f64.powf(gain_db / 20.0);
            prop_assert!((nz[0].1.norm() - want).abs() <= 1e-9 * want);
        } else {
            prop_assert_eq!(rep.dropped_rays, 1);
            prop_assert!(cir.iter().all(|a| a.norm() == 0.0));
        }
    }

    #[test]
    fn built_scenarios_validate(seed in any::<u64>()) {
        let mut r = rng(seed);
        let nodes = r.random_range(2..4u16);
        let dur = r.random_range(1..5u32);
        let grid = GridSpec::default();
        let traces: Vec<RayTrace> = (0..r.random_range(0..8))
            .map(|_| {
                let tx = r.random_range(0..nodes);
                let rx = (tx + r.random_range(1..nodes)) % nodes;
                RayTrace {
                    link: LinkId::siso(tx, rx),
                    time_ms: r.random_range(0..dur),
                    rays: (0..r.random_range(0..10))
                        .map(|_| RayRecord::new(r.random_range(0.0..6e-6), r.random_range(-120.0..0.0), r.random_range(-3.2..3.2)))
                        .collect(),
                }
            })
            .collect();
        let (s, rep) = build_scenario(&traces, grid, nodes, 1, dur).unwrap();
        prop_assert!(validate_scenario(&s).is_valid());
        prop_assert!((0.0..=1.0).contains(&rep.discarded_energy_fraction));
    }

    #[test]
    fn engine_linearity(seed in any::<u64>(), nb in 1u16..=64, len in 1usize..300) {
        let grid = small_grid(nb);
        let mut r = rng(seed);
        let line = random_tap_line(&mut r, nb, 4);
        let x1 = random_signal(&mut r, len);
        let x2 = random_signal(&mut r, len);
        let a = Complex64::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let b = Complex64::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let run = |x: Vec<Complex64>| {
            let mut st = LinkFilterState::with_taps(grid, line.clone()).unwrap();
            st.apply_taps(&IqChunk::new(x, 0, rate(grid))).unwrap().samples
        };
        let mixed: Vec<Complex64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let lhs = run(mixed);
        let y1 = run(x1);
        let y2 = run(x2);
        let rhs: Vec<Complex64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(rel_err(&lhs, &rhs) < 1e-9);
    }

    #[test]
    fn engine_time_invariance(seed in any::<u64>(), nb in 1u16..=64, len in 1usize..200, d in 0usize..50) {
        let grid = small_grid(nb);
        let mut r = rng(seed);
        let line = random_tap_line(&mut r, nb, 4);
        let x = random_signal(&mut r, len);
        let mut delayed = vec![Complex64::new(0.0, 0.0); d];
        delayed.extend_from_slice(&x);
        let mut st = LinkFilterState::with_taps(grid, line.clone()).unwrap();
        let y = st.apply_taps(&IqChunk::new(x, 0, rate(grid))).unwrap().samples;
        let mut st = LinkFilterState::with_taps(grid, line).unwrap();
        let yd = st.apply_taps(&IqChunk::new(delayed, 0, rate(grid))).unwrap().samples;
        prop_assert!(yd[..d].iter().all(|v| v.norm() == 0.0));
        prop_assert_eq!(&yd[d..], &y[..]);
    }

    #[test]
    fn engine_chunk_invariance(seed in any::<u64>(), nb in 1u16..=64, len in 1usize..400) {
        let grid = small_grid(nb);
        let mut r = rng(seed);
        let x = random_signal(&mut r, len);
        let lines: Vec<TapLine> = (0..len.div_ceil(10)).map(|_| random_tap_line(&mut r, nb, 4)).collect();
        let parts = random_partition(&mut r, len, 37);
        let schedule = |st: &mut LinkFilterState| {
            for (i, l) in lines.iter().enumerate() {
                st.update_taps(l.clone(), i as u64 * 10).unwrap();
            }
        };
        let mut a = LinkFilterState::new(grid, 0).unwrap();
        schedule(&mut a);
        let mut b = LinkFilterState::new(grid, 0).unwrap();
        schedule(&mut b);
        let whole = run_chunks(&mut a, &x, &[len]);
        let split = run_chunks(&mut b, &x, &parts);
        prop_assert_eq!(whole, split);
    }

    #[test]
    fn engine_matches_dense(seed in any::<u64>(), nb in 1u16..=64, len in 1usize..400) {
        let grid = small_grid(nb);
        let mut r = rng(seed);
        let x = random_signal(&mut r, len);
        let schedule: Vec<(u64, TapLine)> = (0..len.div_ceil(10))
            .map(|i| (i as u64 * 10, random_tap_line(&mut r, nb, 4)))
            .collect();
        let mut st = LinkFilterState::new(grid, 0).unwrap();
        for (e, l) in &schedule {
            st.update_taps(l.clone(), *e).unwrap();
        }
        let parts = random_partition(&mut r, len, 50);
        let got = run_chunks(&mut st, &x, &parts);
        prop_assert!(rel_err(&got, &dense_oracle(&x, &schedule, nb as usize)) < 1e-9);
    }

    #[test]
    fn unit_tap_preserves_energy(seed in any::<u64>(), bin in 0u16..512, len in 1usize..2000) {
        let grid = GridSpec::default();
        let mut r = rng(seed);
        let x = random_signal(&mut r, len);
        let e_in: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let mut padded = x;
        padded.resize(len + bin as usize, Complex64::new(0.0, 0.0));
        let mut st = LinkFilterState::with_taps(grid, TapLine::single(bin, Complex32::new(0.0, -1.0))).unwrap();
        let y = st.apply_taps(&IqChunk::new(padded, 0, rate(grid))).unwrap();
        prop_assert!((y.energy() - e_in).abs() <= 1e-9 * e_in);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimate_cir_linear(seed in any::<u64>()) {
        let seq = SoundingSequence::default_sequence();
        let mut r = rng(seed);
        let need = seq.len() * 3;
        let x1 = random_signal(&mut r, need);
        let x2 = random_signal(&mut r, need);
        let a = r.random_range(-3.0..3.0);
        let est = |x: Vec<Complex64>| estimate_cir(&seq, &IqChunk::new(x, 0, 1e8), 2, 64).unwrap().taps;
        let mixed = est(x1.iter().zip(&x2).map(|(p, q)| p * a + q).collect());
        let sum: Vec<Complex64> = est(x1).iter().zip(est(x2)).map(|(p, q)| p * a + q).collect();
        prop_assert!(rel_err(&mixed, &sum) < 1e-9);
    }
}

#[test]
fn probe_round_trip_identity() {
    let seq = SoundingSequence::default_sequence();
    let probe = probe_signal(&seq, 1, 0, 1e8);
    let cir = estimate_cir(&seq, &probe, 1, 512).unwrap();
    let l = seq.len() as f64;
    assert!((cir.taps[0].re - 1.0).abs() < 1e-12);
    assert!(cir.taps[1..].iter().all(|t| (t.re + 1.0 / l).abs() < 1e-12 && t.im == 0.0));
}
