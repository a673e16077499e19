//! Ping/echo latency harness between a "real" and a "twin" endpoint.
//!
//! One-way latency is taken as RTT/2 on a single host clock.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::client::{BrokerClient, ClientError};

pub const DEFAULT_SIZES: [usize; 6] = [1, 100, 1024, 10 * 1024, 100 * 1024, 1024 * 1024];
pub const DEFAULT_SAMPLES: usize = 100;

/// Metro-link measurements (ms) for the default sizes, real-to-twin then
/// twin-to-real. Kept for comparison in reports only.
pub const REFERENCE_METRO_MS: [(usize, f64, f64); 6] = [
    (1, 15.318, 15.119),
    (100, 15.547, 15.688),
    (1024, 15.742, 15.713),
    (10 * 1024, 22.261, 21.979),
    (100 * 1024, 31.101, 31.097),
    (1024 * 1024, 47.967, 48.003),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    RealToTwin,
    TwinToReal,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::RealToTwin => "real_to_twin",
            Direction::TwinToReal => "twin_to_real",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub n: usize,
}

impl LatencyStats {
    /// `one_way_ms` must be non-empty.
    pub fn from_samples(one_way_ms: &[f64]) -> Self {
        let mut v = one_way_ms.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
            n: v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub size_bytes: usize,
    /// `None` when the far side stopped answering.
    pub real_to_twin: Option<LatencyStats>,
    pub twin_to_real: Option<LatencyStats>,
}

impl LatencyRow {
    pub fn failed(&self) -> bool {
        self.real_to_twin.is_none() || self.twin_to_real.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub samples: usize,
}

fn size_label(n: usize) -> String {
    match n {
        1 => "1 Byte".into(),
        n if n >= 1 << 20 && n % (1 << 20) == 0 => format!("{} Megabyte{}", n >> 20, if n >> 20 == 1 { "" } else { "s" }),
        n if n >= 1024 && n % 1024 == 0 => format!("{} Kilobyte{}", n >> 10, if n >> 10 == 1 { "" } else { "s" }),
        n => format!("{n} Bytes"),
    }
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("size_bytes,direction,mean_ms,p50_ms,p95_ms,n\n");
        for r in &self.rows {
            for (d, st) in [(Direction::RealToTwin, &r.real_to_twin), (Direction::TwinToReal, &r.twin_to_real)] {
                match st {
                    Some(st) => writeln!(
                        s,
                        "{},{},{:.6},{:.6},{:.6},{}",
                        r.size_bytes,
                        d.as_str(),
                        st.mean_ms,
                        st.p50_ms,
                        st.p95_ms,
                        st.n
                    ),
                    None => writeln!(s, "{},{},failed,failed,failed,0", r.size_bytes, d.as_str()),
                }
                .unwrap();
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let cell = |st: &Option<LatencyStats>| match st {
            Some(st) => format!("{:.3} ms", st.mean_ms),
            None => "failed".to_string(),
        };
        let head = ["Packet Size", "Real-to-Twin", "Twin-to-Real"];
        let body: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [size_label(r.size_bytes), cell(&r.real_to_twin), cell(&r.twin_to_real)])
            .collect();
        let mut w = head.map(str::len);
        for row in &body {
            for (i, c) in row.iter().enumerate() {
                w[i] = w[i].max(c.len());
            }
        }
        let mut s = String::new();
        writeln!(s, "{:<a$} | {:<b$} | {:<c$}", head[0], head[1], head[2], a = w[0], b = w[1], c = w[2]).unwrap();
        writeln!(s, "{}-+-{}-+-{}", "-".repeat(w[0]), "-".repeat(w[1]), "-".repeat(w[2])).unwrap();
        for row in &body {
            writeln!(s, "{:<a$} | {:<b$} | {:<c$}", row[0], row[1], row[2], a = w[0], b = w[1], c = w[2]).unwrap();
        }
        writeln!(
            s,
            "one-way latency = RTT/2 on a single host clock, mean of {} samples per cell",
            self.samples
        )
        .unwrap();
        s
    }
}

#[derive(Debug, Clone)]
pub struct LatencyConfig {
    pub sizes: Vec<usize>,
    pub samples: usize,
    /// Per-exchange wait before a row is marked failed.
    pub timeout: Duration,
    /// Prefix for the probe topics; make it unique per run on a shared broker.
    pub topic_prefix: String,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            samples: DEFAULT_SAMPLES,
            timeout: Duration::from_secs(5),
            topic_prefix: format!("rftw/lat/{}", std::process::id()),
        }
    }
}

struct Echo {
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Echo {
    fn start(client: BrokerClient, topic: String) -> Result<Self, ClientError> {
        client.subscribe(&topic)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let reply = format!("{topic}/echo");
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match client.recv(Duration::from_millis(20)) {
                    Ok(m) => {
                        if client.publish(&reply, &m.payload).is_err() {
                            return;
                        }
                    }
                    Err(ClientError::Timeout(_)) => {}
                    Err(_) => return,
                }
            }
        });
        Ok(Self {
            stop,
            thread: Some(thread),
        })
    }
}

impl Drop for Echo {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn payload(size: usize, token: u64) -> Vec<u8> {
    let mut p = vec![0xA5u8; size];
    let t = token.to_le_bytes();
    let n = size.min(8);
    p[..n].copy_from_slice(&t[..n]);
    p
}

fn probe_row(probe: &BrokerClient, topic: &str, size: usize, samples: usize, timeout: Duration, token: &mut u64) -> Option<LatencyStats> {
    let mut one_way = Vec::with_capacity(samples);
    for _ in 0..samples {
        *token += 1;
        let p = payload(size, *token);
        let t0 = Instant::now();
        probe.publish(topic, &p).ok()?;
        loop {
            let left = timeout.checked_sub(t0.elapsed())?;
            let m = probe.recv(left).ok()?;
            // Drop stale echoes from an earlier timed-out exchange.
            if m.payload == p {
                break;
            }
        }
        one_way.push(t0.elapsed().as_secs_f64() * 1e3 / 2.0);
    }
    (!one_way.is_empty()).then(|| LatencyStats::from_samples(&one_way))
}

/// Runs the harness against a broker at `addr`: four connections (a probe
/// and an echo responder on each side), one row per payload size.
pub fn measure_latency(addr: SocketAddr, cfg: &LatencyConfig) -> Result<LatencyReport, ClientError> {
    let r2t = format!("{}/r2t", cfg.topic_prefix);
    let t2r = format!("{}/t2r", cfg.topic_prefix);
    let real_probe = BrokerClient::connect(addr, "real-probe")?;
    let twin_probe = BrokerClient::connect(addr, "twin-probe")?;
    let _twin_echo = Echo::start(BrokerClient::connect(addr, "twin-echo")?, r2t.clone())?;
    let _real_echo = Echo::start(BrokerClient::connect(addr, "real-echo")?, t2r.clone())?;
    real_probe.subscribe(&format!("{r2t}/echo"))?;
    twin_probe.subscribe(&format!("{t2r}/echo"))?;

    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut token = 0;
    let rows = sizes
        .into_iter()
        .map(|size| LatencyRow {
            size_bytes: size,
            real_to_twin: probe_row(&real_probe, &r2t, size, cfg.samples, cfg.timeout, &mut token),
            twin_to_real: probe_row(&twin_probe, &t2r, size, cfg.samples, cfg.timeout, &mut token),
        })
        .collect();
    Ok(LatencyReport {
        rows,
        samples: cfg.samples,
    })
}
