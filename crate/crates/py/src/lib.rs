//! Python bindings.
//!
//! Tap lines cross the boundary as lists of `(bin, complex)` pairs and IQ as
//! lists of `complex`.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rftwin_core::broker::{self, BrokerConfig, LatencyConfig};
use rftwin_core::extract::{self, RayRecord, RayTrace};
use rftwin_core::format::{self, FormatError};
use rftwin_core::pipeline;
use rftwin_core::scenario::{self, validate_scenario};
use rftwin_core::sounder::{self, SoundingConfig, Tolerances};
use rftwin_core::waveform::{self, JammerConfig, JammerKind, ToyLinkConfig};
use rftwin_core::{Complex32, Complex64, GridSpec, IqChunk, LinkFilterState, LinkId, Tap, TapLine};

type Taps = Vec<(u16, Complex64)>;
type LatencyCells = (usize, Option<f64>, Option<f64>);
type RawTrace = (u16, u16, u32, Vec<(f64, f64, f64)>);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn format_err(e: FormatError) -> PyErr {
    match e {
        FormatError::Io(e) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn to_tap_line(taps: Taps) -> PyResult<TapLine> {
    TapLine::new(
        taps.into_iter()
            .map(|(b, g)| Tap::new(b, Complex32::new(g.re as f32, g.im as f32)))
            .collect(),
    )
    .map_err(value_err)
}

fn from_tap_line(line: &TapLine) -> Taps {
    line.taps()
        .iter()
        .map(|t| (t.bin, Complex64::new(t.gain.re as f64, t.gain.im as f64)))
        .collect()
}

/// Time-indexed tap lines for every directed link of a node set.
#[pyclass(module = "rftwin", skip_from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: Arc<scenario::Scenario>,
}

#[pymethods]
impl Scenario {
    /// A scenario with every link blocked.
    #[new]
    #[pyo3(signature = (num_nodes, antennas_per_node=1, duration_ms=1, bin_ns=10, num_bins=512, snapshot_us=1000))]
    fn new(num_nodes: u16, antennas_per_node: u8, duration_ms: u32, bin_ns: u32, num_bins: u16, snapshot_us: u32) -> PyResult<Self> {
        let grid = GridSpec::new(bin_ns, num_bins, snapshot_us);
        let s = scenario::Scenario::new(grid, num_nodes, antennas_per_node, duration_ms).map_err(value_err)?;
        Ok(Self { inner: Arc::new(s) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let s = format::load_scenario(path).map_err(format_err)?;
        Ok(Self { inner: Arc::new(s) })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let s = format::deserialize_scenario(data).map_err(format_err)?;
        Ok(Self { inner: Arc::new(s) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        format::save_scenario(&self.inner, path).map_err(format_err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        format::serialize_scenario(&self.inner).map_err(format_err)
    }

    #[getter]
    fn num_nodes(&self) -> u16 {
        self.inner.num_nodes()
    }

    #[getter]
    fn antennas_per_node(&self) -> u8 {
        self.inner.antennas_per_node()
    }

    #[getter]
    fn duration_ms(&self) -> u32 {
        self.inner.duration_ms()
    }

    /// `(tx_node, rx_node, tx_antenna, rx_antenna)` in storage order.
    fn links(&self) -> Vec<(u16, u16, u8, u8)> {
        self.inner
            .links()
            .map(|l| (l.tx_node, l.rx_node, l.tx_antenna, l.rx_antenna))
            .collect()
    }

    #[pyo3(signature = (tx, rx, time_ms, tx_ant=0, rx_ant=0))]
    fn taps(&self, tx: u16, rx: u16, time_ms: u32, tx_ant: u8, rx_ant: u8) -> PyResult<Taps> {
        let line = self
            .inner
            .tap_line(LinkId::new(tx, rx, tx_ant, rx_ant), time_ms)
            .map_err(value_err)?;
        Ok(from_tap_line(line))
    }

    #[pyo3(signature = (tx, rx, time_ms, taps, tx_ant=0, rx_ant=0))]
    fn set_taps(&mut self, tx: u16, rx: u16, time_ms: u32, taps: Taps, tx_ant: u8, rx_ant: u8) -> PyResult<()> {
        let line = to_tap_line(taps)?;
        if let Some(v) = scenario::tap_line_violations(&line, &self.inner.grid()).first() {
            return Err(value_err(v));
        }
        Arc::make_mut(&mut self.inner)
            .set_tap_line(LinkId::new(tx, rx, tx_ant, rx_ant), time_ms, line)
            .map_err(value_err)
    }

    /// Violation messages; empty when the scenario is valid.
    fn violations(&self) -> Vec<String> {
        validate_scenario(&self.inner).violations.iter().map(|v| v.to_string()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(num_nodes={}, antennas_per_node={}, duration_ms={})",
            self.inner.num_nodes(),
            self.inner.antennas_per_node(),
            self.inner.duration_ms()
        )
    }
}

/// Builds a scenario from ray traces.
///
/// `traces` holds `(tx, rx, time_ms, rays)` with rays as
/// `(delay_s, gain_db, phase_rad)`. Returns the scenario and an extraction
/// summary.
#[pyfunction]
#[pyo3(signature = (traces, num_nodes, duration_ms, antennas_per_node=1))]
fn build_scenario<'py>(
    py: Python<'py>,
    traces: Vec<RawTrace>,
    num_nodes: u16,
    duration_ms: u32,
    antennas_per_node: u8,
) -> PyResult<(Scenario, Bound<'py, PyDict>)> {
    let traces: Vec<RayTrace> = traces
        .into_iter()
        .map(|(tx, rx, t, rays)| RayTrace {
            link: LinkId::siso(tx, rx),
            time_ms: t,
            rays: rays.into_iter().map(|(d, g, p)| RayRecord::new(d, g, p)).collect(),
        })
        .collect();
    let (s, rep) = extract::build_scenario(&traces, GridSpec::default(), num_nodes, antennas_per_node, duration_ms)
        .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("traces", rep.traces)?;
    d.set_item("rays", rep.rays)?;
    d.set_item("dropped_rays", rep.dropped_rays)?;
    d.set_item("invalid_rays", rep.invalid_rays)?;
    d.set_item("discarded_energy_fraction", rep.discarded_energy_fraction)?;
    Ok((Scenario { inner: Arc::new(s) }, d))
}

/// Strongest `k` bins of a dense impulse response.
#[pyfunction]
#[pyo3(signature = (cir, k=4))]
fn select_taps(cir: Vec<Complex64>, k: usize) -> Taps {
    from_tap_line(&extract::select_taps(&cir, k))
}

/// Filters `samples` through one tap line on the default grid.
#[pyfunction]
fn apply_taps(py: Python<'_>, samples: Vec<Complex64>, taps: Taps) -> PyResult<Vec<Complex64>> {
    let line = to_tap_line(taps)?;
    py.detach(|| {
        let grid = GridSpec::default();
        let mut st = LinkFilterState::with_taps(grid, line).map_err(value_err)?;
        let y = st
            .apply_taps(&IqChunk::new(samples, 0, grid.sample_rate_hz()))
            .map_err(runtime_err)?;
        Ok(y.samples)
    })
}

fn sounding_config(snr_db: Option<f64>, reps: usize, seed: u64) -> PyResult<SoundingConfig> {
    if reps == 0 {
        return Err(value_err("reps must be at least 1"));
    }
    Ok(SoundingConfig {
        repetitions: reps,
        snr_db,
        seed,
        ..Default::default()
    })
}

/// Sounds one link through the emulator. Returns `(cir, recovered_taps)`.
#[pyfunction]
#[pyo3(signature = (scenario, tx, rx, time_ms=0, snr_db=None, reps=16, seed=0))]
#[allow(clippy::too_many_arguments)]
fn sound(
    py: Python<'_>,
    scenario: &Scenario,
    tx: u16,
    rx: u16,
    time_ms: u32,
    snr_db: Option<f64>,
    reps: usize,
    seed: u64,
) -> PyResult<(Vec<Complex64>, Taps)> {
    let cfg = sounding_config(snr_db, reps, seed)?;
    let s = scenario.inner.clone();
    let out = py
        .detach(|| pipeline::sound_link(&s, LinkId::siso(tx, rx), time_ms, &cfg))
        .map_err(value_err)?;
    Ok((out.cir.taps, from_tap_line(&out.recovered)))
}

/// Sounds a link and checks it against `reference` (default: the same
/// scenario) within 20 ns / 0.5 dB.
#[pyfunction]
#[pyo3(signature = (scenario, tx, rx, time_ms=0, reference=None, snr_db=None, reps=16, seed=0))]
#[allow(clippy::too_many_arguments)]
fn validate_link<'py>(
    py: Python<'py>,
    scenario: &Scenario,
    tx: u16,
    rx: u16,
    time_ms: u32,
    reference: Option<&Scenario>,
    snr_db: Option<f64>,
    reps: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = sounding_config(snr_db, reps, seed)?;
    let s = scenario.inner.clone();
    let r = reference.map(|r| r.inner.clone()).unwrap_or_else(|| s.clone());
    let rec = py
        .detach(|| pipeline::validate_link(&s, &r, LinkId::siso(tx, rx), time_ms, &cfg, &Tolerances::default()))
        .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("pass", rec.pass)?;
    let taps: Vec<(u16, u16, f64, f64)> = rec
        .taps
        .iter()
        .map(|m| (m.installed_bin, m.recovered_bin, m.delay_error_ns, m.gain_error_db))
        .collect();
    d.set_item("taps", taps)?;
    d.set_item("missed", rec.missed)?;
    d.set_item("spurious", rec.spurious)?;
    Ok(d)
}

/// The default length-1023 sounding sequence as +1/-1 values.
#[pyfunction]
fn msequence() -> Vec<f64> {
    sounder::SoundingSequence::default_sequence().chips
}

/// Per-second throughput of the toy link, jammer on for the middle third.
/// `jammer` is `"narrowband"`, `"wideband"` or `"none"`.
#[pyfunction]
#[pyo3(signature = (jammer="narrowband", jsr_db=0.0, seed=0, seconds=60, snr_db=waveform::DEFAULT_DEMO_SNR_DB))]
fn jam_timeline(py: Python<'_>, jammer: &str, jsr_db: f64, seed: u64, seconds: usize, snr_db: f64) -> PyResult<Vec<(f64, f64)>> {
    let kind: Option<JammerKind> = match jammer {
        "none" => None,
        s => Some(s.parse().map_err(value_err)?),
    };
    let ch = TapLine::single(0, Complex32::new(1.0, 0.0));
    let j = kind.map(|k| JammerConfig::of_kind(k, 10f64.powf(jsr_db / 10.0)));
    let pts = py
        .detach(|| {
            waveform::run_timeline(
                &ToyLinkConfig::default(),
                &ch,
                j.as_ref().map(|j| (j, &ch)),
                snr_db,
                seed,
                seconds,
                seconds / 3,
                2 * seconds / 3,
            )
        })
        .map_err(value_err)?;
    Ok(pts.into_iter().map(|p| (p.time_s, p.throughput_fraction)).collect())
}

/// Message broker running on background threads until `stop()`.
#[pyclass(module = "rftwin")]
struct Broker {
    inner: Option<broker::Broker>,
    addr: String,
}

#[pymethods]
impl Broker {
    #[new]
    #[pyo3(signature = (addr="127.0.0.1:0"))]
    fn new(addr: &str) -> PyResult<Self> {
        let b = broker::Broker::bind(addr, BrokerConfig::default()).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            addr: b.local_addr().to_string(),
            inner: Some(b),
        })
    }

    #[getter]
    fn address(&self) -> &str {
        &self.addr
    }

    fn stop(&mut self) {
        if let Some(mut b) = self.inner.take() {
            b.shutdown();
        }
    }
}

/// One-way latency rows `(size, r2t_mean_ms, t2r_mean_ms)` through the
/// broker at `addr`; a failed cell is `None`.
#[pyfunction]
#[pyo3(signature = (addr, sizes=vec![1, 1024], samples=20))]
fn measure_latency(py: Python<'_>, addr: &str, sizes: Vec<usize>, samples: usize) -> PyResult<Vec<LatencyCells>> {
    let addr: std::net::SocketAddr = addr.parse().map_err(value_err)?;
    let cfg = LatencyConfig {
        sizes,
        samples,
        ..Default::default()
    };
    let rep = py.detach(|| broker::measure_latency(addr, &cfg)).map_err(runtime_err)?;
    Ok(rep
        .rows
        .iter()
        .map(|r| (r.size_bytes, r.real_to_twin.as_ref().map(|s| s.mean_ms), r.twin_to_real.as_ref().map(|s| s.mean_ms)))
        .collect())
}

/// Sustained filter throughput: `(per_link_msps, aggregate_msps)`.
#[pyfunction(name = "bench")]
#[pyo3(signature = (links=1, ms=200, seed=0))]
fn run_bench(py: Python<'_>, links: usize, ms: usize, seed: u64) -> PyResult<(Vec<f64>, f64)> {
    if links == 0 || ms == 0 {
        return Err(value_err("links and ms must be at least 1"));
    }
    let rep = py.detach(|| rftwin_core::bench::run_bench(links, ms, seed)).map_err(runtime_err)?;
    Ok((rep.per_link_msps, rep.aggregate_msps))
}

#[pymodule]
pub fn rftwin(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Broker>()?;
    m.add_function(wrap_pyfunction!(build_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(select_taps, m)?)?;
    m.add_function(wrap_pyfunction!(apply_taps, m)?)?;
    m.add_function(wrap_pyfunction!(sound, m)?)?;
    m.add_function(wrap_pyfunction!(validate_link, m)?)?;
    m.add_function(wrap_pyfunction!(msequence, m)?)?;
    m.add_function(wrap_pyfunction!(jam_timeline, m)?)?;
    m.add_function(wrap_pyfunction!(measure_latency, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("NUM_BINS", 512)?;
    m.add("MAX_TAPS", scenario::MAX_TAPS)?;
    Ok(())
}
