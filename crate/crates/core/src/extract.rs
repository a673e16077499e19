//! Ray-tracer output to tapped-delay-line conversion.
//!
//! Rays are quantized onto the delay grid (round half up), combined
//! coherently per bin, and the strongest [`MAX_TAPS`] bins are kept.

use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{validate_scenario, GridSpec, LinkId, Scenario, ScenarioError, Tap, TapLine, MAX_TAPS};

/// Slack for treating a quantization position as an exact half-bin tie.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayRecord {
    pub delay_s: f64,
    pub gain_db: f64,
    pub phase_rad: f64,
}

impl RayRecord {
    pub fn new(delay_s: f64, gain_db: f64, phase_rad: f64) -> Self {
        Self {
            delay_s,
            gain_db,
            phase_rad,
        }
    }

    pub fn amplitude(&self) -> Complex64 {
        Complex64::from_polar(10f64.powf(self.gain_db / 20.0), self.phase_rad)
    }

    fn is_valid(&self) -> bool {
        self.delay_s.is_finite()
            && self.delay_s >= 0.0
            && self.gain_db.is_finite()
            && self.phase_rad.is_finite()
    }
}

/// All rays of one link at one millisecond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayTrace {
    pub link: LinkId,
    pub time_ms: u32,
    pub rays: Vec<RayRecord>,
}

/// Dense channel impulse response, one complex amplitude per delay bin.
pub type DenseCir = Vec<Complex64>;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BinReport {
    /// Rays whose delay quantized past the last bin.
    pub dropped_rays: usize,
    /// Rays rejected for non-finite or negative fields.
    pub invalid_rays: usize,
}

/// Delay bin for a ray delay: `round(delay / bin_duration)`, ties up.
pub fn quantize_delay(delay_s: f64, grid: &GridSpec) -> u64 {
    let x = delay_s * 1e9 / grid.bin_duration_ns as f64;
    (x + 0.5 + TIE_EPS).floor() as u64
}

/// Bins rays onto the grid, summing rays that share a bin.
pub fn bin_rays(rays: &[RayRecord], grid: &GridSpec) -> (DenseCir, BinReport) {
    let mut cir = vec![Complex64::new(0.0, 0.0); grid.num_bins as usize];
    let mut report = BinReport::default();
    for ray in rays {
        if !ray.is_valid() {
            report.invalid_rays += 1;
            continue;
        }
        let bin = quantize_delay(ray.delay_s, grid);
        if bin >= grid.num_bins as u64 {
            report.dropped_rays += 1;
            continue;
        }
        cir[bin as usize] += ray.amplitude();
    }
    (cir, report)
}

/// Keeps the `k` strongest bins of a dense CIR (at most [`MAX_TAPS`]).
///
/// Ties go to the lower bin. Bins whose amplitude is zero, or rounds to zero
/// in single precision, are never selected.
pub fn select_taps(cir: &[Complex64], k: usize) -> TapLine {
    let k = k.min(MAX_TAPS);
    let mut candidates: Vec<(usize, f64)> = cir
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let g = to_gain(**a);
            g.re != 0.0 || g.im != 0.0
        })
        .map(|(i, a)| (i, a.norm_sqr()))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(k);
    candidates.sort_by_key(|c| c.0);
    TapLine::from_raw(
        candidates
            .into_iter()
            .map(|(i, _)| Tap::new(i as u16, to_gain(cir[i])))
            .collect(),
    )
}

fn to_gain(a: Complex64) -> Complex32 {
    Complex32::new(a.re as f32, a.im as f32)
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("ray trace for link {link} at {time_ms} ms: {source}")]
    BadTrace {
        link: LinkId,
        time_ms: u32,
        source: ScenarioError,
    },
    #[error(transparent)]
    Shape(#[from] ScenarioError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ExtractionReport {
    pub traces: usize,
    pub rays: usize,
    pub dropped_rays: usize,
    pub invalid_rays: usize,
    /// Energy of bins not kept by tap selection, as a fraction of the binned
    /// energy. Tap lines are not renormalized.
    pub discarded_energy_fraction: f64,
}

/// Builds a full scenario from ray traces.
///
/// Cells without a trace hold the most recent earlier tap line of the link,
/// or the empty tap line before the first trace. Several traces for the same
/// link and millisecond are merged.
pub fn build_scenario(
    traces: &[RayTrace],
    grid: GridSpec,
    num_nodes: u16,
    antennas_per_node: u8,
    duration_ms: u32,
) -> Result<(Scenario, ExtractionReport), ExtractError> {
    let mut scenario = Scenario::new(grid, num_nodes, antennas_per_node, duration_ms)?;
    let mut cells: BTreeMap<(usize, u32), Vec<&RayRecord>> = BTreeMap::new();
    let mut report = ExtractionReport::default();
    for trace in traces {
        let idx = scenario
            .link_index(trace.link)
            .and_then(|i| {
                if trace.time_ms >= duration_ms {
                    Err(ScenarioError::TimeOutOfRange {
                        time_ms: trace.time_ms,
                        duration_ms,
                    })
                } else {
                    Ok(i)
                }
            })
            .map_err(|source| ExtractError::BadTrace {
                link: trace.link,
                time_ms: trace.time_ms,
                source,
            })?;
        report.traces += 1;
        report.rays += trace.rays.len();
        cells.entry((idx, trace.time_ms)).or_default().extend(&trace.rays);
    }

    let links: Vec<LinkId> = scenario.links().collect();
    let mut binned_energy = 0.0;
    let mut kept_energy = 0.0;
    for (li, link) in links.iter().enumerate() {
        let mut current = TapLine::empty();
        for t in 0..duration_ms {
            if let Some(rays) = cells.get(&(li, t)) {
                let rays: Vec<RayRecord> = rays.iter().map(|r| **r).collect();
                let (cir, bins) = bin_rays(&rays, &grid);
                report.dropped_rays += bins.dropped_rays;
                report.invalid_rays += bins.invalid_rays;
                current = select_taps(&cir, MAX_TAPS);
                binned_energy += cir.iter().map(|a| a.norm_sqr()).sum::<f64>();
                kept_energy += current
                    .taps()
                    .iter()
                    .map(|tap| cir[tap.bin as usize].norm_sqr())
                    .sum::<f64>();
            }
            scenario.set_tap_line(*link, t, current.clone())?;
        }
    }
    report.discarded_energy_fraction = if binned_energy > 0.0 {
        ((binned_energy - kept_energy) / binned_energy).max(0.0)
    } else {
        0.0
    };
    debug_assert!(validate_scenario(&scenario).is_valid());
    Ok((scenario, report))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    tx: u16,
    rx: u16,
    tx_ant: u8,
    rx_ant: u8,
    time_ms: u32,
    delay_s: f64,
    gain_db: f64,
    phase_rad: f64,
}

#[derive(Debug, Deserialize)]
struct JsonTrace {
    tx: u16,
    rx: u16,
    tx_ant: u8,
    rx_ant: u8,
    time_ms: u32,
    rays: Vec<RayRecord>,
}

/// Checks that a trace's link fits a scenario shape, reporting the input line.
pub fn check_trace_shape(
    trace: &RayTrace,
    num_nodes: u16,
    antennas_per_node: u8,
    duration_ms: u32,
    line: usize,
) -> Result<(), ExtractError> {
    let l = trace.link;
    let msg = if l.tx_node >= num_nodes || l.rx_node >= num_nodes {
        format!("node index out of range (tx {}, rx {}, nodes {num_nodes})", l.tx_node, l.rx_node)
    } else if l.tx_node == l.rx_node {
        format!("self link on node {}", l.tx_node)
    } else if l.tx_antenna >= antennas_per_node || l.rx_antenna >= antennas_per_node {
        format!(
            "antenna index out of range (tx_ant {}, rx_ant {}, antennas {antennas_per_node})",
            l.tx_antenna, l.rx_antenna
        )
    } else if trace.time_ms >= duration_ms {
        format!("time_ms {} beyond duration {duration_ms}", trace.time_ms)
    } else {
        return Ok(());
    };
    Err(ExtractError::Parse { line, msg })
}

/// Parses ray CSV (`tx,rx,tx_ant,rx_ant,time_ms,delay_s,gain_db,phase_rad`).
///
/// Returns one trace per row together with its 1-based line number; rows of
/// the same cell are merged by [`build_scenario`].
pub fn parse_rays_csv(r: impl Read) -> Result<Vec<(usize, RayTrace)>, ExtractError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let expected = ["tx", "rx", "tx_ant", "rx_ant", "time_ms", "delay_s", "gain_db", "phase_rad"];
    let headers = reader
        .headers()
        .map_err(|e| ExtractError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(ExtractError::Parse {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let parse_err = |e: csv::Error| ExtractError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        };
        let rec = rec.map_err(parse_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: CsvRow = rec.deserialize(Some(&headers)).map_err(|e| ExtractError::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push((
            line,
            RayTrace {
                link: LinkId::new(row.tx, row.rx, row.tx_ant, row.rx_ant),
                time_ms: row.time_ms,
                rays: vec![RayRecord::new(row.delay_s, row.gain_db, row.phase_rad)],
            },
        ));
    }
    Ok(out)
}

/// Parses JSON lines, one trace object per line:
/// `{"tx":0,"rx":1,"tx_ant":0,"rx_ant":0,"time_ms":0,"rays":[{"delay_s":..,"gain_db":..,"phase_rad":..}]}`.
pub fn parse_rays_jsonl(r: impl BufRead) -> Result<Vec<(usize, RayTrace)>, ExtractError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: JsonTrace = serde_json::from_str(&line).map_err(|e| ExtractError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((
            i + 1,
            RayTrace {
                link: LinkId::new(t.tx, t.rx, t.tx_ant, t.rx_ant),
                time_ms: t.time_ms,
                rays: t.rays,
            },
        ));
    }
    Ok(out)
}

/// Reads a ray file, picking JSON lines for `.jsonl`/`.json` and CSV otherwise.
pub fn read_ray_file(path: impl AsRef<Path>) -> Result<Vec<(usize, RayTrace)>, ExtractError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => parse_rays_jsonl(std::io::BufReader::new(file)),
        _ => parse_rays_csv(file),
    }
}
