//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use rftwin_core::bench::run_bench;
use rftwin_core::broker::{measure_latency, Broker, BrokerClient, BrokerConfig, LatencyConfig};
use rftwin_core::engine::{ChannelEmulator, IqChunk, LinkFilterState};
use rftwin_core::extract::{build_scenario, select_taps, RayRecord, RayTrace};
use rftwin_core::format::{deserialize_scenario, load_scenario, save_scenario, serialize_scenario, FormatError, HEADER_LEN};
use rftwin_core::pipeline::validate_link;
use rftwin_core::replay::{drive_engine_collect, LinkFilter, PlaybackMode, PlaybackSession};
use rftwin_core::scenario::{GridSpec, LinkId, Scenario, TapLine};
use rftwin_core::sounder::{SoundingConfig, Tolerances};
use rftwin_core::waveform::{run_link, run_timeline, JammerConfig, ToyLinkConfig, DEFAULT_DEMO_SNR_DB};
use rftwin_core::{Complex32, Complex64};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Four taps at distinct bins, relative powers in [-15, 0] dB below a path
/// loss of 60..100 dB, built from ray traces with sub-bin delay jitter.
fn sounder_scenario(seed: u64) -> Scenario {
    let mut r = rng(seed);
    let grid = GridSpec::default();
    let pl = r.random_range(60.0..100.0);
    let mut bins: Vec<u16> = Vec::new();
    while bins.len() < 4 {
        let b = r.random_range(0..grid.num_bins);
        if !bins.contains(&b) {
            bins.push(b);
        }
    }
    let rays = bins
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let rel = if i == 0 { 0.0 } else { r.random_range(-15.0..0.0) };
            let jitter = r.random_range(-4.0..4.0);
            RayRecord::new(
                (b as f64 * 10.0 + jitter).max(0.0) * 1e-9,
                rel - pl,
                r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
        })
        .collect();
    let trace = RayTrace {
        link: LinkId::siso(0, 1),
        time_ms: 0,
        rays,
    };
    build_scenario(&[trace], grid, 2, 1, 1).unwrap().0
}

fn criterion_1() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let tol = Tolerances::default();
    let (mut installed, mut good, mut passed) = (0usize, 0usize, 0usize);
    for seed in 0..200u64 {
        let created = sounder_scenario(seed);
        let path = dir.path().join(format!("s{seed}.scn"));
        save_scenario(&created, &path).unwrap();
        let loaded = Arc::new(load_scenario(&path).unwrap());
        let cfg = SoundingConfig {
            snr_db: Some(30.0),
            repetitions: 16,
            seed,
            ..Default::default()
        };
        let rec = validate_link(&loaded, &created, LinkId::siso(0, 1), 0, &cfg, &tol).unwrap();
        installed += created.tap_line(LinkId::siso(0, 1), 0).unwrap().len();
        good += rec
            .taps
            .iter()
            .filter(|m| m.delay_error_ns <= tol.delay_ns && m.gain_error_db.abs() <= tol.gain_db)
            .count();
        passed += rec.pass as usize;
    }
    let frac = good as f64 / installed as f64;
    outcome(
        frac >= 0.99,
        format!("{good}/{installed} taps within 20 ns / 0.5 dB ({:.2}%), {passed}/200 links pass", frac * 100.0),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut updates = 0usize;
    for seed in 0..1000u64 {
        let mut r = rng(1_000_000 + seed);
        let nb = r.random_range(1..=64u16);
        let grid = small_grid(nb);
        let sps = grid.samples_per_snapshot().unwrap();
        let len = r.random_range(1..800usize);
        let x = random_signal(&mut r, len);
        // Updates at random snapshot boundaries, the first at 0.
        let mut schedule = vec![(0u64, random_tap_line(&mut r, nb, 4))];
        for snap in 1..(len as u64).div_ceil(sps) {
            if r.random_bool(0.3) {
                schedule.push((snap * sps, random_tap_line(&mut r, nb, 4)));
            }
        }
        updates += schedule.len() - 1;
        let mut st = LinkFilterState::new(grid, 0).unwrap();
        let mut pending = schedule.iter().peekable();
        let mut out = Vec::with_capacity(len);
        let mut off = 0usize;
        for p in random_partition(&mut r, len, 97) {
            // Schedule whatever becomes effective before the end of this chunk,
            // so some updates are queued ahead and some land mid-chunk.
            while let Some((e, l)) = pending.peek() {
                if *e < (off + p) as u64 {
                    st.update_taps(l.clone(), *e).unwrap();
                    pending.next();
                } else {
                    break;
                }
            }
            let c = IqChunk::new(x[off..off + p].to_vec(), off as u64, grid.sample_rate_hz());
            out.extend(st.apply_taps(&c).unwrap().samples);
            off += p;
        }
        worst = worst.max(rel_err(&out, &dense_oracle(&x, &schedule, nb as usize)));
    }
    outcome(
        worst <= 1e-9,
        format!("1000 instances, {updates} mid-stream updates, max relative error {worst:.3e}"),
    )
}

fn replay_scenario() -> Arc<Scenario> {
    let mut r = rng(33);
    Arc::new(random_scenario(&mut r, GridSpec::default(), 2, 2, 5))
}

fn replay_inputs(s: &Scenario) -> Vec<IqChunk> {
    let sps = s.grid().samples_per_snapshot().unwrap() as usize;
    let n = sps * s.duration_ms() as usize;
    let mut r = rng(44);
    (0..s.num_nodes() as usize * s.antennas_per_node() as usize)
        .map(|_| IqChunk::new(random_signal(&mut r, n), 0, s.grid().sample_rate_hz()))
        .collect()
}

fn bytes_of(outs: &[IqChunk]) -> Vec<u8> {
    outs.iter().flat_map(|c| c.to_le_f64_bytes()).collect()
}

fn criterion_3() -> Outcome {
    let s = replay_scenario();
    let inputs = replay_inputs(&s);
    let sps = s.grid().samples_per_snapshot().unwrap();
    let emulator = || {
        let mut e = ChannelEmulator::for_scenario(&s).unwrap();
        e.set_noise(1e-3, 7);
        e
    };
    let mut runs = Vec::new();
    for _ in 0..10 {
        let mut session = PlaybackSession::new(s.clone(), PlaybackMode::Virtual);
        session.set_filter(LinkFilter::all());
        runs.push(bytes_of(&drive_engine_collect(&mut session, &mut emulator(), &inputs).unwrap()));
    }
    let replay_identical = runs.iter().all(|b| *b == runs[0]);

    let total = inputs[0].len();
    let mut r = rng(55);
    let partitions: Vec<Vec<usize>> = vec![
        vec![total],
        vec![sps as usize; total / sps as usize],
        vec![997; total / 997].into_iter().chain([total % 997]).filter(|&c| c > 0).collect(),
        random_partition(&mut r, total, 20_000),
        random_partition(&mut r, total, 64),
    ];
    let mut session = PlaybackSession::new(s.clone(), PlaybackMode::Virtual);
    session.set_filter(LinkFilter::all());
    session.play();
    let frames: Vec<_> = session.frames().collect();
    let mut chunked_identical = true;
    for parts in &partitions {
        let mut e = emulator();
        for f in &frames {
            e.update_link(f.link, f.tap_line.clone(), f.effective_ms as u64 * sps).unwrap();
        }
        let mut outs: Vec<IqChunk> = (0..e.ports()).map(|_| IqChunk::new(Vec::new(), 0, inputs[0].sample_rate_hz)).collect();
        let mut off = 0;
        for &p in parts {
            let seg: Vec<IqChunk> = inputs.iter().map(|c| c.slice(off, p)).collect();
            for (o, y) in outs.iter_mut().zip(e.process(&seg).unwrap()) {
                o.samples.extend(y.samples);
            }
            off += p;
        }
        chunked_identical &= bytes_of(&outs) == runs[0];
    }
    outcome(
        replay_identical && chunked_identical,
        format!(
            "10 replay runs identical: {replay_identical}; 5 chunk partitions identical: {chunked_identical} ({} bytes)",
            runs[0].len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let subsets: Vec<u32> = (0u32..1 << 16).filter(|m| m.count_ones() == 4).collect();
    let mut violations = 0usize;
    for _ in 0..10_000 {
        // Coarse levels and explicit zeros produce plenty of ties.
        let cir: Vec<Complex64> = (0..16)
            .map(|_| match r.random_range(0..4) {
                0 => Complex64::new(0.0, 0.0),
                1 => Complex64::new(r.random_range(0..4) as f64, 0.0),
                _ => Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
            })
            .collect();
        let line = select_taps(&cir, 4);
        let got: f64 = line.taps().iter().map(|t| cir[t.bin as usize].norm_sqr()).sum();
        let best = subsets
            .iter()
            .map(|m| (0..16).filter(|i| m >> i & 1 == 1).map(|i| cir[i].norm_sqr()).sum::<f64>())
            .fold(0.0, f64::max);
        // The same powers summed in a different order may differ in the last ulp.
        if got < best * (1.0 - 1e-12) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("10000 CIRs x {} subsets, {violations} violations", subsets.len()))
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut round_trips = 0;
    for _ in 0..100 {
        let nodes = r.random_range(2..5);
        let ants = r.random_range(1..=2);
        let dur = r.random_range(1..4);
        let s = random_scenario(&mut r, GridSpec::default(), nodes, ants, dur);
        let b = serialize_scenario(&s).unwrap();
        round_trips += (deserialize_scenario(&b).ok() == Some(s)) as usize;
    }
    let mut rejected = 0;
    let mut crashes = 0;
    let mut kinds: HashMap<&'static str, usize> = HashMap::new();
    for i in 0..1000 {
        let (ants, dur) = (r.random_range(1..=2), r.random_range(1..4));
        let s = random_scenario(&mut r, GridSpec::default(), 2, ants, dur);
        let mut b = serialize_scenario(&s).unwrap();
        // 1 to 3 distinct bits; half the mutations target the header.
        let span = if i % 2 == 0 { HEADER_LEN } else { b.len() };
        let flips = r.random_range(1..=3);
        let mut bits: Vec<usize> = Vec::new();
        while bits.len() < flips {
            let bit = r.random_range(0..span * 8);
            if !bits.contains(&bit) {
                bits.push(bit);
            }
        }
        for bit in bits {
            b[bit / 8] ^= 1 << (bit % 8);
        }
        match catch_unwind(AssertUnwindSafe(|| deserialize_scenario(&b))) {
            Ok(Err(e)) => {
                rejected += 1;
                let k = match e {
                    FormatError::Truncated(_) => "truncated",
                    FormatError::BadMagic(_) => "bad-magic",
                    FormatError::VersionMismatch(_) => "version",
                    FormatError::Checksum { .. } => "checksum",
                    FormatError::TrailingBytes(_) => "trailing",
                    FormatError::Shape(_) => "shape",
                    FormatError::Invalid(_) => "invalid",
                    FormatError::Io(_) => "io",
                };
                *kinds.entry(k).or_default() += 1;
            }
            Ok(Ok(_)) => {}
            Err(_) => crashes += 1,
        }
    }
    let mut kinds: Vec<_> = kinds.into_iter().collect();
    kinds.sort();
    outcome(
        round_trips == 100 && rejected == 1000 && crashes == 0,
        format!("{round_trips}/100 round trips, {rejected}/1000 mutations rejected, {crashes} panics, kinds {kinds:?}"),
    )
}

fn criterion_6() -> Outcome {
    const PUBLISHERS: usize = 8;
    const SUBSCRIBERS: usize = 8;
    const TOPICS: usize = 4;
    const TOTAL: usize = 100_000;
    let broker = Broker::bind("127.0.0.1:0", BrokerConfig::default()).unwrap();
    let addr = broker.local_addr();
    let topic = |t: usize| format!("acc/t{t}");

    let subs: Vec<(BrokerClient, Vec<usize>)> = (0..SUBSCRIBERS)
        .map(|i| {
            let c = BrokerClient::connect(addr, &format!("sub{i}")).unwrap();
            let ts = vec![i % TOPICS, (i + 1) % TOPICS];
            for &t in &ts {
                c.subscribe(&topic(t)).unwrap();
            }
            (c, ts)
        })
        .collect();
    let pubs: Vec<BrokerClient> = (0..PUBLISHERS)
        .map(|i| BrokerClient::connect(addr, &format!("pub{i}")).unwrap())
        .collect();
    let pub_ids: Vec<u64> = pubs.iter().map(BrokerClient::id).collect();
    let per_pub = TOTAL / PUBLISHERS;
    let expected_per_sub = 2 * TOTAL / TOPICS;

    let started = Instant::now();
    let results = std::thread::scope(|sc| {
        let readers: Vec<_> = subs
            .iter()
            .map(|(c, ts)| {
                let pub_ids = &pub_ids;
                sc.spawn(move || {
                    let mut next: HashMap<(u64, String), u64> = HashMap::new();
                    let (mut got, mut fifo_bad, mut dup, mut crc_bad, mut stray) = (0, 0, 0, 0, 0);
                    while got < expected_per_sub {
                        let Ok(m) = c.recv(Duration::from_secs(20)) else { break };
                        got += 1;
                        if !m.checksum_ok() || m.checksum != crc32fast::hash(&m.payload) {
                            crc_bad += 1;
                        }
                        let t: usize = m.topic.trim_start_matches("acc/t").parse().unwrap_or(usize::MAX);
                        if !ts.contains(&t) || !pub_ids.contains(&m.publisher) {
                            stray += 1;
                        }
                        let want = next.entry((m.publisher, m.topic.clone())).or_insert(0);
                        if m.publish_seq < *want {
                            dup += 1;
                        } else if m.publish_seq > *want {
                            fifo_bad += 1;
                        }
                        *want = m.publish_seq + 1;
                    }
                    // Nothing further may arrive.
                    let extra = c.recv(Duration::from_millis(200)).is_ok() as usize;
                    (got, fifo_bad, dup + extra, crc_bad, stray)
                })
            })
            .collect();
        for (p, c) in pubs.iter().enumerate() {
            sc.spawn(move || {
                let mut r = rng(600 + p as u64);
                for i in 0..per_pub {
                    let t = (p + i) % TOPICS;
                    let len = r.random_range(8..256);
                    let mut payload: Vec<u8> = (0..len).map(|_| r.random()).collect();
                    payload[..8].copy_from_slice(&(i as u64).to_le_bytes());
                    c.publish(&topic(t), &payload).unwrap();
                }
            });
        }
        readers.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    let elapsed = started.elapsed();
    let got: usize = results.iter().map(|r| r.0).sum();
    let bad: usize = results.iter().map(|r| r.1 + r.2 + r.3 + r.4).sum();
    let delivered_ok = got == expected_per_sub * SUBSCRIBERS && bad == 0;

    let report = measure_latency(
        addr,
        &LatencyConfig {
            topic_prefix: "acc/lat".into(),
            ..Default::default()
        },
    )
    .unwrap();
    let sizes: Vec<usize> = report.rows.iter().map(|r| r.size_bytes).collect();
    let shape_ok = sizes == [1, 100, 1024, 10240, 102400, 1048576]
        && report
            .rows
            .iter()
            .all(|r| !r.failed() && r.real_to_twin.as_ref().unwrap().n == 100 && r.twin_to_real.as_ref().unwrap().n == 100);
    let one_byte = report.rows[0].real_to_twin.as_ref().map_or(f64::INFINITY, |s| s.mean_ms);
    println!("{}", report.to_table());
    outcome(
        delivered_ok && shape_ok && one_byte < 5.0,
        format!(
            "{TOTAL} publishes, {got} deliveries in {:.2}s, {bad} order/dup/checksum/isolation faults; latency report {} rows, 1 B mean {one_byte:.3} ms",
            elapsed.as_secs_f64(),
            report.rows.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    let cfg = ToyLinkConfig::default();
    let ch = TapLine::single(0, Complex32::new(1.0, 0.0));
    let nb = JammerConfig::narrowband(1.0);
    let wb = JammerConfig::wideband(1.0);
    let mut ordering_ok = true;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let t0 = run_link(&cfg, &ch, None, DEFAULT_DEMO_SNR_DB, seed, 200).unwrap().throughput_fraction;
        let t1 = run_link(&cfg, &ch, Some((&nb, &ch)), DEFAULT_DEMO_SNR_DB, seed, 200).unwrap().throughput_fraction;
        let t2 = run_link(&cfg, &ch, Some((&wb, &ch)), DEFAULT_DEMO_SNR_DB, seed, 200).unwrap().throughput_fraction;
        ordering_ok &= t0 - t1 >= 0.05 && t1 - t2 >= 0.05;
        rows.push((t0, t1, t2));
    }
    let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;

    let mut shape_ok = true;
    for j in [&nb, &wb] {
        let tl = run_timeline(&cfg, &ch, Some((j, &ch)), DEFAULT_DEMO_SNR_DB, 0, 60, 20, 40).unwrap();
        let avg = |a: usize, b: usize| tl[a..b].iter().map(|p| p.throughput_fraction).sum::<f64>() / (b - a) as f64;
        let (before, during, after) = (avg(0, 20), avg(20, 40), avg(40, 60));
        shape_ok &= during < before - 0.05 && during < after - 0.05 && (after - before).abs() < 0.05;
    }
    let baseline = run_link(&cfg, &ch, None, 30.0, 0, 200).unwrap().throughput_fraction;
    let zero = run_link(&cfg, &ch, Some((&JammerConfig::wideband(0.0), &ch)), 30.0, 0, 200).unwrap();
    let zero_ok = zero == run_link(&cfg, &ch, None, 30.0, 0, 200).unwrap();
    outcome(
        ordering_ok && shape_ok && baseline >= 0.99 && zero_ok,
        format!(
            "mean throughput none {:.3} > narrowband {:.3} > wideband {:.3} (gaps >= 0.05 on all 10 seeds: {ordering_ok}); on/off shape: {shape_ok}; 30 dB baseline {baseline:.3}",
            mean(|r| r.0),
            mean(|r| r.1),
            mean(|r| r.2)
        ),
    )
}

fn criterion_8() -> Outcome {
    let rep = run_bench(1, 200, 8).unwrap();
    let msps = rep.per_link_msps[0];
    outcome(
        msps >= 5.0,
        format!("single link {msps:.1} MS/s (asserted >= 5, target 20: {})", if msps >= 20.0 { "met" } else { "not met" }),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("sounder fidelity", criterion_1),
        ("engine vs dense oracle", criterion_2),
        ("chunking and replay determinism", criterion_3),
        ("tap selection optimality", criterion_4),
        ("scenario format", criterion_5),
        ("broker correctness and latency report", criterion_6),
        ("jamming trend", criterion_7),
        ("throughput benchmark", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|a| a == &n.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let o = catch_unwind(f).unwrap_or_else(|_| outcome(false, "panicked"));
        println!(
            "criterion {n} {name}: {} ({}; {:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        failed += !o.pass as usize;
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
