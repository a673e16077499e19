//! Tapped-delay-line scenario model.
//!
//! A [`Scenario`] holds one [`TapLine`] for every directed link (node pair and
//! antenna pair) and every millisecond of the captured run. Tap lines are
//! sparse: at most [`MAX_TAPS`] non-zero taps on a grid of `num_bins` delay
//! bins.

use std::fmt;

use num_complex::Complex32;
use serde::Serialize;
use thiserror::Error;

/// Maximum number of non-zero taps in one tap line.
pub const MAX_TAPS: usize = 4;

/// Maximum number of antennas per node (2x2 MIMO).
pub const MAX_ANTENNAS: u8 = 2;

/// Delay grid shared by every tap line in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct GridSpec {
    pub bin_duration_ns: u32,
    pub num_bins: u16,
    pub snapshot_period_us: u32,
}

impl Default for GridSpec {
    /// 512 bins of 10 ns, one snapshot per millisecond.
    fn default() -> Self {
        Self {
            bin_duration_ns: 10,
            num_bins: 512,
            snapshot_period_us: 1000,
        }
    }
}

impl GridSpec {
    pub fn new(bin_duration_ns: u32, num_bins: u16, snapshot_period_us: u32) -> Self {
        Self {
            bin_duration_ns,
            num_bins,
            snapshot_period_us,
        }
    }

    /// Largest delay the grid can represent, `num_bins * bin_duration_ns`.
    pub fn max_delay_ns(&self) -> u64 {
        self.num_bins as u64 * self.bin_duration_ns as u64
    }

    /// Engine sample rate: one sample per delay bin.
    pub fn sample_rate_hz(&self) -> f64 {
        1e9 / self.bin_duration_ns as f64
    }

    /// Number of engine samples in one snapshot period, if it is integral.
    pub fn samples_per_snapshot(&self) -> Option<u64> {
        let period_ns = self.snapshot_period_us as u64 * 1000;
        let bin = self.bin_duration_ns as u64;
        if bin == 0 || !period_ns.is_multiple_of(bin) {
            None
        } else {
            Some(period_ns / bin)
        }
    }

    fn violations(&self) -> Vec<ViolationKind> {
        let mut out = Vec::new();
        if self.bin_duration_ns == 0 {
            out.push(ViolationKind::ZeroBinDuration);
        }
        if self.num_bins == 0 {
            out.push(ViolationKind::ZeroBins);
        }
        if self.snapshot_period_us == 0 {
            out.push(ViolationKind::ZeroSnapshotPeriod);
        }
        out
    }
}

/// One non-zero tap: a delay bin and a complex linear amplitude that already
/// includes path loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub bin: u16,
    pub gain: Complex32,
}

impl Tap {
    pub fn new(bin: u16, gain: Complex32) -> Self {
        Self { bin, gain }
    }

    pub fn power(&self) -> f64 {
        let re = self.gain.re as f64;
        let im = self.gain.im as f64;
        re * re + im * im
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TapLineError {
    #[error("tap count {0} exceeds {max}", max = MAX_TAPS)]
    TooManyTaps(usize),
    #[error("tap bins not strictly increasing at index {0}")]
    BinsNotIncreasing(usize),
    #[error("tap {0} has a non-finite gain")]
    NonFiniteGain(usize),
    #[error("tap {0} has zero gain")]
    ZeroGain(usize),
}

/// Sparse channel impulse response of one link during one snapshot.
///
/// An empty tap line models a fully blocked link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TapLine {
    taps: Vec<Tap>,
}

impl TapLine {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a tap line, checking count, ordering and gains. Bin range is a
    /// property of the grid and is checked by [`validate_scenario`].
    pub fn new(taps: Vec<Tap>) -> Result<Self, TapLineError> {
        let line = Self { taps };
        match line.errors().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(line),
        }
    }

    /// Builds a tap line without any checks. Used for decoding and for
    /// exercising validation.
    pub fn from_raw(taps: Vec<Tap>) -> Self {
        Self { taps }
    }

    pub fn single(bin: u16, gain: Complex32) -> Self {
        Self {
            taps: vec![Tap::new(bin, gain)],
        }
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn total_power(&self) -> f64 {
        self.taps.iter().map(Tap::power).sum()
    }

    /// Scales every gain by a real factor.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            taps: self
                .taps
                .iter()
                .map(|t| Tap::new(t.bin, t.gain * factor))
                .collect(),
        }
    }

    fn errors(&self) -> Vec<TapLineError> {
        let mut out = Vec::new();
        if self.taps.len() > MAX_TAPS {
            out.push(TapLineError::TooManyTaps(self.taps.len()));
        }
        for (i, w) in self.taps.windows(2).enumerate() {
            if w[1].bin <= w[0].bin {
                out.push(TapLineError::BinsNotIncreasing(i + 1));
            }
        }
        for (i, t) in self.taps.iter().enumerate() {
            if !(t.gain.re.is_finite() && t.gain.im.is_finite()) {
                out.push(TapLineError::NonFiniteGain(i));
            } else if t.gain.re == 0.0 && t.gain.im == 0.0 {
                out.push(TapLineError::ZeroGain(i));
            }
        }
        out
    }
}

/// Aggregate path loss of a tap line in dB: `-10 log10(sum |gain|^2)`.
///
/// An empty tap line has infinite path loss.
pub fn path_loss_db(line: &TapLine) -> f64 {
    let p = line.total_power();
    if p == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * p.log10()
    }
}

/// Directed link between one antenna of a transmitting node and one antenna
/// of a receiving node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize)]
pub struct LinkId {
    pub tx_node: u16,
    pub rx_node: u16,
    pub tx_antenna: u8,
    pub rx_antenna: u8,
}

impl LinkId {
    pub fn new(tx_node: u16, rx_node: u16, tx_antenna: u8, rx_antenna: u8) -> Self {
        Self {
            tx_node,
            rx_node,
            tx_antenna,
            rx_antenna,
        }
    }

    /// SISO link between antenna 0 of both nodes.
    pub fn siso(tx_node: u16, rx_node: u16) -> Self {
        Self::new(tx_node, rx_node, 0, 0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.tx_node, self.rx_node, self.tx_antenna, self.rx_antenna
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("scenario has no nodes")]
    NoNodes,
    #[error("antennas per node must be 1 or 2, got {0}")]
    BadAntennaCount(u8),
    #[error("scenario duration must be at least 1 ms")]
    ZeroDuration,
    #[error("expected {expected} snapshots, got {actual}")]
    SnapshotCount { expected: usize, actual: usize },
    #[error("link {0} is not part of the scenario")]
    UnknownLink(LinkId),
    #[error("time {time_ms} ms outside scenario duration {duration_ms} ms")]
    TimeOutOfRange { time_ms: u32, duration_ms: u32 },
}

/// Complete time-indexed set of tap lines for every directed link.
///
/// Snapshots are stored time-major, links in lexicographic
/// `(tx_node, rx_node, tx_antenna, rx_antenna)` order excluding self links.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    grid: GridSpec,
    num_nodes: u16,
    antennas_per_node: u8,
    duration_ms: u32,
    snapshots: Vec<TapLine>,
}

impl Scenario {
    /// A scenario with every link blocked (empty tap lines) at every
    /// millisecond.
    pub fn new(
        grid: GridSpec,
        num_nodes: u16,
        antennas_per_node: u8,
        duration_ms: u32,
    ) -> Result<Self, ScenarioError> {
        Self::check_shape(num_nodes, antennas_per_node, duration_ms)?;
        let count = link_count(num_nodes, antennas_per_node) * duration_ms as usize;
        Ok(Self {
            grid,
            num_nodes,
            antennas_per_node,
            duration_ms,
            snapshots: vec![TapLine::empty(); count],
        })
    }

    /// Assembles a scenario from snapshots laid out time-major in link order.
    pub fn from_parts(
        grid: GridSpec,
        num_nodes: u16,
        antennas_per_node: u8,
        duration_ms: u32,
        snapshots: Vec<TapLine>,
    ) -> Result<Self, ScenarioError> {
        Self::check_shape(num_nodes, antennas_per_node, duration_ms)?;
        let expected = link_count(num_nodes, antennas_per_node) * duration_ms as usize;
        if snapshots.len() != expected {
            return Err(ScenarioError::SnapshotCount {
                expected,
                actual: snapshots.len(),
            });
        }
        Ok(Self {
            grid,
            num_nodes,
            antennas_per_node,
            duration_ms,
            snapshots,
        })
    }

    pub(crate) fn check_shape(num_nodes: u16, antennas: u8, duration_ms: u32) -> Result<(), ScenarioError> {
        if num_nodes == 0 {
            return Err(ScenarioError::NoNodes);
        }
        if antennas == 0 || antennas > MAX_ANTENNAS {
            return Err(ScenarioError::BadAntennaCount(antennas));
        }
        if duration_ms == 0 {
            return Err(ScenarioError::ZeroDuration);
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn num_nodes(&self) -> u16 {
        self.num_nodes
    }

    pub fn antennas_per_node(&self) -> u8 {
        self.antennas_per_node
    }

    pub fn duration_ms(&self) -> u32 {
        self.duration_ms
    }

    pub fn links_per_snapshot(&self) -> usize {
        link_count(self.num_nodes, self.antennas_per_node)
    }

    /// All links in canonical order.
    pub fn links(&self) -> impl Iterator<Item = LinkId> + '_ {
        let n = self.num_nodes;
        let a = self.antennas_per_node;
        (0..n).flat_map(move |tx| {
            (0..n).filter(move |&rx| rx != tx).flat_map(move |rx| {
                (0..a).flat_map(move |ta| (0..a).map(move |ra| LinkId::new(tx, rx, ta, ra)))
            })
        })
    }

    /// Position of a link in canonical order.
    pub fn link_index(&self, link: LinkId) -> Result<usize, ScenarioError> {
        let n = self.num_nodes;
        let a = self.antennas_per_node;
        if link.tx_node >= n
            || link.rx_node >= n
            || link.tx_node == link.rx_node
            || link.tx_antenna >= a
            || link.rx_antenna >= a
        {
            return Err(ScenarioError::UnknownLink(link));
        }
        let a = a as usize;
        let rx_slot = if link.rx_node > link.tx_node {
            link.rx_node - 1
        } else {
            link.rx_node
        } as usize;
        let pairs = link.tx_node as usize * (n as usize - 1) + rx_slot;
        Ok((pairs * a + link.tx_antenna as usize) * a + link.rx_antenna as usize)
    }

    fn slot(&self, link: LinkId, time_ms: u32) -> Result<usize, ScenarioError> {
        if time_ms >= self.duration_ms {
            return Err(ScenarioError::TimeOutOfRange {
                time_ms,
                duration_ms: self.duration_ms,
            });
        }
        Ok(time_ms as usize * self.links_per_snapshot() + self.link_index(link)?)
    }

    pub fn tap_line(&self, link: LinkId, time_ms: u32) -> Result<&TapLine, ScenarioError> {
        Ok(&self.snapshots[self.slot(link, time_ms)?])
    }

    pub fn set_tap_line(
        &mut self,
        link: LinkId,
        time_ms: u32,
        line: TapLine,
    ) -> Result<(), ScenarioError> {
        let i = self.slot(link, time_ms)?;
        self.snapshots[i] = line;
        Ok(())
    }

    /// Tap lines of one millisecond, in canonical link order.
    pub fn snapshot(&self, time_ms: u32) -> &[TapLine] {
        let n = self.links_per_snapshot();
        let start = time_ms as usize * n;
        &self.snapshots[start..start + n]
    }

    /// Every tap line, time-major in canonical link order.
    pub fn snapshots(&self) -> &[TapLine] {
        &self.snapshots
    }
}

/// Number of directed links for `nodes` nodes with `antennas` antennas each.
pub fn link_count(nodes: u16, antennas: u8) -> usize {
    let n = nodes as usize;
    let a = antennas as usize;
    n * n.saturating_sub(1) * a * a
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    ZeroBinDuration,
    ZeroBins,
    ZeroSnapshotPeriod,
    BinOutOfRange { bin: u16, num_bins: u16 },
    TooManyTaps { count: usize },
    BinsNotIncreasing { index: usize },
    NonFiniteGain { index: usize },
    ZeroGain { index: usize },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ZeroBinDuration => write!(f, "bin duration is zero"),
            Self::ZeroBins => write!(f, "grid has zero bins"),
            Self::ZeroSnapshotPeriod => write!(f, "snapshot period is zero"),
            Self::BinOutOfRange { bin, num_bins } => {
                write!(f, "bin out of range ({bin} >= {num_bins})")
            }
            Self::TooManyTaps { count } => {
                write!(f, "tap count > {MAX_TAPS} ({count})")
            }
            Self::BinsNotIncreasing { index } => {
                write!(f, "bins not strictly increasing at tap {index}")
            }
            Self::NonFiniteGain { index } => write!(f, "non-finite gain at tap {index}"),
            Self::ZeroGain { index } => write!(f, "zero gain at tap {index}"),
        }
    }
}

impl From<TapLineError> for ViolationKind {
    fn from(e: TapLineError) -> Self {
        match e {
            TapLineError::TooManyTaps(count) => Self::TooManyTaps { count },
            TapLineError::BinsNotIncreasing(index) => Self::BinsNotIncreasing { index },
            TapLineError::NonFiniteGain(index) => Self::NonFiniteGain { index },
            TapLineError::ZeroGain(index) => Self::ZeroGain { index },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// `None` for grid-level violations.
    pub link: Option<LinkId>,
    pub time_ms: Option<u32>,
    pub reason: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.link, self.time_ms) {
            (Some(l), Some(t)) => write!(f, "link {l} @ {t} ms: {}", self.reason),
            _ => write!(f, "grid: {}", self.reason),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Reports every invariant violation of a tap line against a grid.
pub fn tap_line_violations(line: &TapLine, grid: &GridSpec) -> Vec<ViolationKind> {
    let mut out: Vec<ViolationKind> = line.errors().into_iter().map(Into::into).collect();
    for t in line.taps() {
        if t.bin >= grid.num_bins {
            out.push(ViolationKind::BinOutOfRange {
                bin: t.bin,
                num_bins: grid.num_bins,
            });
        }
    }
    out
}

/// Checks every scenario invariant. Never aborts: all violations are listed.
pub fn validate_scenario(s: &Scenario) -> ValidationReport {
    let mut violations: Vec<Violation> = s
        .grid
        .violations()
        .into_iter()
        .map(|reason| Violation {
            link: None,
            time_ms: None,
            reason,
        })
        .collect();
    let links: Vec<LinkId> = s.links().collect();
    for t in 0..s.duration_ms {
        for (link, line) in links.iter().zip(s.snapshot(t)) {
            for reason in tap_line_violations(line, &s.grid) {
                violations.push(Violation {
                    link: Some(*link),
                    time_ms: Some(t),
                    reason,
                });
            }
        }
    }
    ValidationReport { violations }
}
