//! Streaming sparse convolution of complex baseband IQ.
//!
//! Each directed link owns a [`LinkFilterState`]: the tap line in force, the
//! last `num_bins - 1` input samples, and a queue of tap updates that take
//! effect at snapshot boundaries. Samples run at one per delay bin.

use std::collections::VecDeque;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scenario::{tap_line_violations, GridSpec, LinkId, Scenario, ScenarioError, TapLine};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("discontinuous stream: expected start index {expected}, got {got}")]
    Discontinuous { expected: u64, got: u64 },
    #[error("sample rate {got} Hz does not match grid rate {expected} Hz")]
    RateMismatch { expected: f64, got: f64 },
    #[error("tap update at sample {effective} is before stream position {position}")]
    UpdateInPast { effective: u64, position: u64 },
    #[error("tap update at sample {effective} is not on a snapshot boundary ({period} samples)")]
    UpdateOffBoundary { effective: u64, period: u64 },
    #[error("snapshot period is not a whole number of samples")]
    NonIntegralSnapshot,
    #[error("tap line rejected: {0}")]
    BadTapLine(String),
    #[error("contributions are not aligned")]
    Misaligned,
    #[error("no contributions to mix")]
    NoContributions,
    #[error("expected {expected} streams, got {got}")]
    StreamCount { expected: usize, got: usize },
    #[error("grid mismatch: engine {engine:?}, scenario {scenario:?}")]
    GridMismatch { engine: GridSpec, scenario: GridSpec },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// A contiguous block of complex baseband samples.
#[derive(Debug, Clone, PartialEq)]
pub struct IqChunk {
    pub samples: Vec<Complex64>,
    /// Absolute index of the first sample in the stream.
    pub start_index: u64,
    pub sample_rate_hz: f64,
}

impl IqChunk {
    pub fn new(samples: Vec<Complex64>, start_index: u64, sample_rate_hz: f64) -> Self {
        Self {
            samples,
            start_index,
            sample_rate_hz,
        }
    }

    pub fn zeros(len: usize, start_index: u64, sample_rate_hz: f64) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); len], start_index, sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Index one past the last sample.
    pub fn end_index(&self) -> u64 {
        self.start_index + self.samples.len() as u64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    /// Sub-chunk `[offset, offset + len)` relative to this chunk's start.
    pub fn slice(&self, offset: usize, len: usize) -> IqChunk {
        IqChunk::new(
            self.samples[offset..offset + len].to_vec(),
            self.start_index + offset as u64,
            self.sample_rate_hz,
        )
    }

    fn aligned_with(&self, other: &IqChunk) -> bool {
        self.start_index == other.start_index
            && self.samples.len() == other.samples.len()
            && self.sample_rate_hz == other.sample_rate_hz
    }

    /// Raw samples as interleaved little-endian `f32` pairs.
    pub fn to_le_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 8);
        for s in &self.samples {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
        out
    }

    /// Raw samples as interleaved little-endian `f64` pairs, for exact
    /// comparisons.
    pub fn to_le_f64_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 16);
        for s in &self.samples {
            out.extend_from_slice(&s.re.to_le_bytes());
            out.extend_from_slice(&s.im.to_le_bytes());
        }
        out
    }
}

fn rates_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

#[derive(Debug, Clone)]
struct PendingUpdate {
    effective: u64,
    line: TapLine,
    taps: Vec<(usize, Complex64)>,
}

/// Filter state of one directed link.
#[derive(Debug, Clone)]
pub struct LinkFilterState {
    grid: GridSpec,
    samples_per_snapshot: u64,
    line: TapLine,
    taps: Vec<(usize, Complex64)>,
    /// Last `num_bins - 1` inputs, oldest first.
    history: Vec<Complex64>,
    position: u64,
    pending: VecDeque<PendingUpdate>,
    scratch: Vec<Complex64>,
}

impl LinkFilterState {
    /// A blocked link (empty tap line) with zeroed history, at `position`.
    pub fn new(grid: GridSpec, position: u64) -> Result<Self, EngineError> {
        let samples_per_snapshot = grid
            .samples_per_snapshot()
            .ok_or(EngineError::NonIntegralSnapshot)?;
        Ok(Self {
            grid,
            samples_per_snapshot,
            line: TapLine::empty(),
            taps: Vec::new(),
            history: vec![Complex64::new(0.0, 0.0); (grid.num_bins as usize).saturating_sub(1)],
            position,
            pending: VecDeque::new(),
            scratch: Vec::new(),
        })
    }

    pub fn with_taps(grid: GridSpec, line: TapLine) -> Result<Self, EngineError> {
        let mut s = Self::new(grid, 0)?;
        s.set_now(line)?;
        Ok(s)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn tap_line(&self) -> &TapLine {
        &self.line
    }

    /// Absolute index of the next expected input sample.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn history(&self) -> &[Complex64] {
        &self.history
    }

    pub fn pending_updates(&self) -> usize {
        self.pending.len()
    }

    fn prepare(&self, line: &TapLine) -> Result<Vec<(usize, Complex64)>, EngineError> {
        let v = tap_line_violations(line, &self.grid);
        if let Some(first) = v.first() {
            return Err(EngineError::BadTapLine(first.to_string()));
        }
        Ok(line
            .taps()
            .iter()
            .map(|t| {
                (
                    t.bin as usize,
                    Complex64::new(t.gain.re as f64, t.gain.im as f64),
                )
            })
            .collect())
    }

    /// Replaces the tap line immediately, regardless of snapshot alignment.
    pub fn set_now(&mut self, line: TapLine) -> Result<(), EngineError> {
        self.taps = self.prepare(&line)?;
        self.line = line;
        Ok(())
    }

    /// Schedules `line` to take effect at absolute sample `effective_sample`,
    /// which must lie on a snapshot boundary at or after the stream position
    /// and after any update already queued.
    pub fn update_taps(&mut self, line: TapLine, effective_sample: u64) -> Result<(), EngineError> {
        if !effective_sample.is_multiple_of(self.samples_per_snapshot) {
            return Err(EngineError::UpdateOffBoundary {
                effective: effective_sample,
                period: self.samples_per_snapshot,
            });
        }
        let floor = self
            .pending
            .back()
            .map(|p| p.effective + 1)
            .unwrap_or(self.position);
        if effective_sample < floor {
            return Err(EngineError::UpdateInPast {
                effective: effective_sample,
                position: floor,
            });
        }
        let taps = self.prepare(&line)?;
        if effective_sample == self.position {
            self.taps = taps;
            self.line = line;
        } else {
            self.pending.push_back(PendingUpdate {
                effective: effective_sample,
                line,
                taps,
            });
        }
        Ok(())
    }

    /// Filters one chunk: `y[n] = sum_k gain_k * x[n - bin_k]`, reading
    /// earlier inputs from the history buffer.
    pub fn apply_taps(&mut self, x: &IqChunk) -> Result<IqChunk, EngineError> {
        let mut y = vec![Complex64::new(0.0, 0.0); x.len()];
        self.apply_into(x, &mut y)?;
        Ok(IqChunk::new(y, x.start_index, x.sample_rate_hz))
    }

    /// Like [`apply_taps`](Self::apply_taps) but accumulates into `out`.
    pub fn apply_into(&mut self, x: &IqChunk, out: &mut [Complex64]) -> Result<(), EngineError> {
        if x.start_index != self.position {
            return Err(EngineError::Discontinuous {
                expected: self.position,
                got: x.start_index,
            });
        }
        let rate = self.grid.sample_rate_hz();
        if !rates_match(rate, x.sample_rate_hz) {
            return Err(EngineError::RateMismatch {
                expected: rate,
                got: x.sample_rate_hz,
            });
        }
        assert_eq!(out.len(), x.len(), "output buffer length");
        let h = self.history.len();
        let n = x.len();
        let mut buf = std::mem::take(&mut self.scratch);
        buf.clear();
        buf.extend_from_slice(&self.history);
        buf.extend_from_slice(&x.samples);

        let mut seg_start = 0usize;
        while seg_start < n {
            let abs = self.position + seg_start as u64;
            while let Some(p) = self.pending.front() {
                if p.effective <= abs {
                    let p = self.pending.pop_front().unwrap();
                    self.taps = p.taps;
                    self.line = p.line;
                } else {
                    break;
                }
            }
            let seg_end = match self.pending.front() {
                Some(p) => ((p.effective - self.position) as usize).min(n),
                None => n,
            };
            for &(bin, g) in &self.taps {
                let src = &buf[h + seg_start - bin..h + seg_end - bin];
                for (o, s) in out[seg_start..seg_end].iter_mut().zip(src) {
                    *o += g * s;
                }
            }
            seg_start = seg_end;
        }

        self.history.copy_from_slice(&buf[n..n + h]);
        self.scratch = buf;
        self.position += n as u64;
        Ok(())
    }
}

/// Seeded circularly-symmetric complex Gaussian noise.
#[derive(Debug, Clone)]
pub struct AwgnSource {
    rng: ChaCha8Rng,
}

impl AwgnSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Adds noise of total variance `power` (half per component).
    pub fn add_to(&mut self, samples: &mut [Complex64], power: f64) {
        if power == 0.0 {
            return;
        }
        let sigma = (power / 2.0).sqrt();
        for s in samples {
            let re: f64 = StandardNormal.sample(&mut self.rng);
            let im: f64 = StandardNormal.sample(&mut self.rng);
            *s += Complex64::new(re * sigma, im * sigma);
        }
    }
}

/// Sums aligned contributions at a receiver and adds seeded Gaussian noise of
/// variance `noise_power`. Zero noise power returns the exact sum.
pub fn mix_at_receiver(
    contributions: &[IqChunk],
    noise_power: f64,
    rng_seed: u64,
) -> Result<IqChunk, EngineError> {
    let first = contributions.first().ok_or(EngineError::NoContributions)?;
    if contributions.iter().any(|c| !c.aligned_with(first)) {
        return Err(EngineError::Misaligned);
    }
    let mut out = IqChunk::zeros(first.len(), first.start_index, first.sample_rate_hz);
    for c in contributions {
        for (o, s) in out.samples.iter_mut().zip(&c.samples) {
            *o += s;
        }
    }
    AwgnSource::new(rng_seed).add_to(&mut out.samples, noise_power);
    Ok(out)
}

/// MIMO channel: `y_r = sum_t apply_taps(x_t, states[t][r])`.
pub fn mimo_apply(
    inputs: &[IqChunk],
    states: &mut [Vec<LinkFilterState>],
) -> Result<Vec<IqChunk>, EngineError> {
    if inputs.len() != states.len() {
        return Err(EngineError::StreamCount {
            expected: states.len(),
            got: inputs.len(),
        });
    }
    let first = inputs.first().ok_or(EngineError::NoContributions)?;
    if inputs.iter().any(|c| !c.aligned_with(first)) {
        return Err(EngineError::Misaligned);
    }
    let n_rx = states[0].len();
    if states.iter().any(|row| row.len() != n_rx) {
        return Err(EngineError::StreamCount {
            expected: n_rx,
            got: states.iter().map(Vec::len).find(|&l| l != n_rx).unwrap_or(0),
        });
    }
    let mut outs: Vec<IqChunk> = (0..n_rx)
        .map(|_| IqChunk::zeros(first.len(), first.start_index, first.sample_rate_hz))
        .collect();
    for (x, row) in inputs.iter().zip(states.iter_mut()) {
        for (state, out) in row.iter_mut().zip(outs.iter_mut()) {
            state.apply_into(x, &mut out.samples)?;
        }
    }
    Ok(outs)
}

/// Multi-node emulator: one filter per directed link of a scenario shape,
/// summing every transmitter at each receive port.
///
/// Ports are numbered `node * antennas_per_node + antenna`.
#[derive(Debug, Clone)]
pub struct ChannelEmulator {
    grid: GridSpec,
    num_nodes: u16,
    antennas: u8,
    links: Vec<(LinkId, LinkFilterState)>,
    noise_power: f64,
    noise: Vec<AwgnSource>,
}

impl ChannelEmulator {
    pub fn new(grid: GridSpec, num_nodes: u16, antennas: u8, start: u64) -> Result<Self, EngineError> {
        let shape = Scenario::new(grid, num_nodes, antennas, 1)?;
        let links = shape
            .links()
            .map(|l| LinkFilterState::new(grid, start).map(|s| (l, s)))
            .collect::<Result<Vec<_>, _>>()?;
        let ports = num_nodes as usize * antennas as usize;
        Ok(Self {
            grid,
            num_nodes,
            antennas,
            links,
            noise_power: 0.0,
            noise: (0..ports).map(|p| AwgnSource::new(p as u64)).collect(),
        })
    }

    /// Emulator sized for a scenario, starting at sample 0.
    pub fn for_scenario(s: &Scenario) -> Result<Self, EngineError> {
        Self::new(s.grid(), s.num_nodes(), s.antennas_per_node(), 0)
    }

    /// Enables receiver noise. Off (zero power) by default.
    pub fn set_noise(&mut self, power: f64, seed: u64) {
        self.noise_power = power;
        self.noise = (0..self.ports())
            .map(|p| AwgnSource::new(seed ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
            .collect();
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn ports(&self) -> usize {
        self.num_nodes as usize * self.antennas as usize
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkId> {
        self.links.iter().map(|(l, _)| l)
    }

    fn link_slot(&self, link: LinkId) -> Result<usize, EngineError> {
        self.links
            .binary_search_by(|(l, _)| l.cmp(&link))
            .map_err(|_| EngineError::Scenario(ScenarioError::UnknownLink(link)))
    }

    pub fn link_state(&self, link: LinkId) -> Result<&LinkFilterState, EngineError> {
        Ok(&self.links[self.link_slot(link)?].1)
    }

    pub fn update_link(&mut self, link: LinkId, line: TapLine, effective_sample: u64) -> Result<(), EngineError> {
        let i = self.link_slot(link)?;
        self.links[i].1.update_taps(line, effective_sample)
    }

    /// Processes one aligned chunk per transmit port, returning one chunk per
    /// receive port.
    pub fn process(&mut self, inputs: &[IqChunk]) -> Result<Vec<IqChunk>, EngineError> {
        let ports = self.ports();
        if inputs.len() != ports {
            return Err(EngineError::StreamCount {
                expected: ports,
                got: inputs.len(),
            });
        }
        let first = &inputs[0];
        if inputs.iter().any(|c| !c.aligned_with(first)) {
            return Err(EngineError::Misaligned);
        }
        let mut outs: Vec<IqChunk> = (0..ports)
            .map(|_| IqChunk::zeros(first.len(), first.start_index, first.sample_rate_hz))
            .collect();
        let a = self.antennas as usize;
        for (link, state) in self.links.iter_mut() {
            let tx = link.tx_node as usize * a + link.tx_antenna as usize;
            let rx = link.rx_node as usize * a + link.rx_antenna as usize;
            state.apply_into(&inputs[tx], &mut outs[rx].samples)?;
        }
        for (out, noise) in outs.iter_mut().zip(self.noise.iter_mut()) {
            noise.add_to(&mut out.samples, self.noise_power);
        }
        Ok(outs)
    }
}
