//! Correlation channel sounder.
//!
//! A maximal-length sequence is transmitted one chip per sample through the
//! emulated channel. The receiver averages whole periods after discarding a
//! warm-up period, circularly correlates against the reference, and reads the
//! CIR off the first `num_bins` lags. Because the m-sequence periodic
//! autocorrelation is `L` at lag 0 and `-1` elsewhere, each lag estimate is
//! biased by `-1/L` times the sum of the other taps.

use num_complex::{Complex32, Complex64};
use serde::Serialize;
use thiserror::Error;

use crate::engine::{AwgnSource, EngineError, IqChunk, LinkFilterState};
use crate::extract::select_taps;
use crate::scenario::{GridSpec, LinkId, TapLine, MAX_TAPS};

/// Default register length (L = 1023).
pub const DEFAULT_REGISTER_LEN: u32 = 10;
/// x^10 + x^3 + 1, bit i set for the x^i term.
pub const DEFAULT_POLYNOMIAL: u32 = (1 << 10) | (1 << 3) | 1;
pub const DEFAULT_SEED: u32 = 0b00_0000_0001;
/// Bins at or above this level relative to the strongest are treated as
/// peaks when estimating the noise floor.
pub const PEAK_MASK_DB: f64 = -30.0;
pub const DEFAULT_THRESHOLD_DB: f64 = -30.0;
pub const DEFAULT_DELAY_TOL_NS: f64 = 20.0;
pub const DEFAULT_GAIN_TOL_DB: f64 = 0.5;

const MAX_REGISTER_LEN: u32 = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SounderError {
    #[error("register length {0} outside 2..={max}", max = MAX_REGISTER_LEN)]
    RegisterLength(u32),
    #[error("LFSR seed must be non-zero")]
    ZeroSeed,
    #[error("seed {seed:#x} does not fit a {m}-bit register")]
    SeedTooWide { seed: u32, m: u32 },
    #[error("polynomial {0:#x} must have degree m and a constant term")]
    BadPolynomial(u32),
    #[error("polynomial {poly:#x} is not primitive: period {period:?} instead of {expected}")]
    NotPrimitive {
        poly: u32,
        period: Option<u64>,
        expected: u64,
    },
    #[error("received {got} samples, need {need} (warm-up plus repetitions)")]
    TooShort { need: usize, got: usize },
    #[error("sequence length {len} must exceed the {num_bins} delay bins")]
    SequenceTooShort { len: usize, num_bins: usize },
    #[error("at least one repetition is required")]
    NoRepetitions,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A ±1 maximal-length sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SoundingSequence {
    pub register_len: u32,
    pub polynomial: u32,
    pub seed: u32,
    pub chips: Vec<f64>,
}

impl SoundingSequence {
    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    /// The default L = 1023 sequence.
    pub fn default_sequence() -> Self {
        generate_msequence(DEFAULT_REGISTER_LEN, DEFAULT_POLYNOMIAL, DEFAULT_SEED)
            .expect("default polynomial is primitive")
    }
}

/// Generates an m-sequence from a Fibonacci LFSR.
///
/// `polynomial` has bit `i` set for each `x^i` term, including `x^m` and `1`.
/// Bit `j` of `seed` is the `j`-th output bit. The recurrence is
/// `a[n+m] = sum_{i<m} c_i a[n+i] (mod 2)`, and bits map to chips as
/// `1 -> +1`, `0 -> -1`.
pub fn generate_msequence(m: u32, polynomial: u32, seed: u32) -> Result<SoundingSequence, SounderError> {
    if !(2..=MAX_REGISTER_LEN).contains(&m) {
        return Err(SounderError::RegisterLength(m));
    }
    if seed == 0 {
        return Err(SounderError::ZeroSeed);
    }
    let mask = (1u32 << m) - 1;
    if seed & !mask != 0 {
        return Err(SounderError::SeedTooWide { seed, m });
    }
    if polynomial >> m != 1 || polynomial & 1 == 0 {
        return Err(SounderError::BadPolynomial(polynomial));
    }
    let feedback = polynomial & mask;
    let len = (1u64 << m) - 1;
    let mut state = seed;
    let mut chips = Vec::with_capacity(len as usize);
    let mut period = None;
    for step in 1..=len {
        chips.push(if state & 1 == 1 { 1.0 } else { -1.0 });
        let bit = (state & feedback).count_ones() & 1;
        state = (state >> 1) | (bit << (m - 1));
        if state == seed {
            period = Some(step);
            break;
        }
    }
    if period != Some(len) {
        return Err(SounderError::NotPrimitive {
            poly: polynomial,
            period,
            expected: len,
        });
    }
    Ok(SoundingSequence {
        register_len: m,
        polynomial,
        seed,
        chips,
    })
}

/// Probe waveform: `repetitions + 1` back-to-back periods (one warm-up).
pub fn probe_signal(seq: &SoundingSequence, repetitions: usize, start_index: u64, sample_rate_hz: f64) -> IqChunk {
    let samples = seq
        .chips
        .iter()
        .cycle()
        .take(seq.len() * (repetitions + 1))
        .map(|&c| Complex64::new(c, 0.0))
        .collect();
    IqChunk::new(samples, start_index, sample_rate_hz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CirEstimate {
    pub taps: Vec<Complex64>,
    /// Median bin power outside the peak mask.
    pub noise_floor: f64,
}

impl CirEstimate {
    pub fn num_bins(&self) -> usize {
        self.taps.len()
    }

    pub fn powers(&self) -> Vec<f64> {
        self.taps.iter().map(|t| t.norm_sqr()).collect()
    }
}

/// Estimates the CIR from a received probe whose first sample is chip 0 of
/// the warm-up period.
pub fn estimate_cir(
    reference: &SoundingSequence,
    received: &IqChunk,
    repetitions: usize,
    num_bins: usize,
) -> Result<CirEstimate, SounderError> {
    let l = reference.len();
    if l <= num_bins {
        return Err(SounderError::SequenceTooShort { len: l, num_bins });
    }
    if repetitions == 0 {
        return Err(SounderError::NoRepetitions);
    }
    let need = l * (repetitions + 1);
    if received.len() < need {
        return Err(SounderError::TooShort {
            need,
            got: received.len(),
        });
    }

    // Correlation is linear, so average the periods first.
    let mut avg = vec![Complex64::new(0.0, 0.0); l];
    for period in received.samples[l..need].chunks_exact(l) {
        for (a, s) in avg.iter_mut().zip(period) {
            *a += s;
        }
    }
    let scale = 1.0 / (l as f64 * repetitions as f64);

    let chips = &reference.chips;
    let taps: Vec<Complex64> = (0..num_bins)
        .map(|d| {
            // sum_n avg[n] * c[(n - d) mod L]
            let (head, tail) = avg.split_at(d);
            let acc: Complex64 = tail
                .iter()
                .zip(chips)
                .chain(head.iter().zip(&chips[l - d..]))
                .map(|(a, &c)| a * c)
                .sum();
            acc * scale
        })
        .collect();

    let noise_floor = noise_floor(&taps);
    Ok(CirEstimate { taps, noise_floor })
}

fn noise_floor(taps: &[Complex64]) -> f64 {
    let powers: Vec<f64> = taps.iter().map(|t| t.norm_sqr()).collect();
    let peak = powers.iter().cloned().fold(0.0, f64::max);
    let mask = peak * 10f64.powf(PEAK_MASK_DB / 10.0);
    let mut rest: Vec<f64> = powers.into_iter().filter(|&p| p < mask).collect();
    if rest.is_empty() {
        return 0.0;
    }
    rest.sort_by(f64::total_cmp);
    let mid = rest.len() / 2;
    if rest.len() % 2 == 1 {
        rest[mid]
    } else {
        0.5 * (rest[mid - 1] + rest[mid])
    }
}

/// Picks up to `k` taps that lie within `threshold_db` of the strongest bin
/// and above three times the noise floor.
pub fn extract_taps_from_cir(cir: &CirEstimate, k: usize, threshold_db: f64) -> TapLine {
    let powers = cir.powers();
    let peak = powers.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return TapLine::empty();
    }
    let floor = peak * 10f64.powf(threshold_db / 10.0);
    let gated: Vec<Complex64> = cir
        .taps
        .iter()
        .zip(&powers)
        .map(|(t, &p)| {
            if p >= floor && p > 3.0 * cir.noise_floor {
                *t
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    select_taps(&gated, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub delay_ns: f64,
    pub gain_db: f64,
    /// Installed taps weaker than this, relative to the strongest installed
    /// tap, may go undetected without failing validation.
    pub detection_threshold_db: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            delay_ns: DEFAULT_DELAY_TOL_NS,
            gain_db: DEFAULT_GAIN_TOL_DB,
            detection_threshold_db: DEFAULT_THRESHOLD_DB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TapMatch {
    pub installed_bin: u16,
    pub recovered_bin: u16,
    pub delay_error_ns: f64,
    /// Recovered minus installed magnitude, in dB.
    pub gain_error_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationResult {
    pub taps: Vec<TapMatch>,
    /// Installed bins with no recovered counterpart.
    pub missed: Vec<u16>,
    /// Recovered bins left unmatched.
    pub spurious: Vec<u16>,
    pub pass: bool,
}

impl ValidationResult {
    pub fn within(&self, tol: &Tolerances) -> usize {
        self.taps
            .iter()
            .filter(|m| m.delay_error_ns <= tol.delay_ns && m.gain_error_db.abs() <= tol.gain_db)
            .count()
    }
}

/// Compares recovered taps against installed ones.
///
/// Installed taps are visited strongest first; each takes the nearest
/// unmatched recovered tap (ties to the lower bin).
pub fn validate_channel(installed: &TapLine, recovered: &TapLine, grid: &GridSpec, tol: &Tolerances) -> ValidationResult {
    let mut order: Vec<usize> = (0..installed.len()).collect();
    let inst = installed.taps();
    order.sort_by(|&a, &b| inst[b].power().total_cmp(&inst[a].power()).then(a.cmp(&b)));
    let strongest = inst.iter().map(|t| t.power()).fold(0.0, f64::max);
    let detect = strongest * 10f64.powf(tol.detection_threshold_db / 10.0);

    let rec = recovered.taps();
    let mut used = vec![false; rec.len()];
    let mut taps = Vec::new();
    let mut missed = Vec::new();
    let mut pass = true;
    for i in order {
        let it = &inst[i];
        let best = rec
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .min_by_key(|(_, r)| ((r.bin as i32 - it.bin as i32).abs(), r.bin));
        match best {
            Some((j, r)) => {
                used[j] = true;
                let delay_error_ns = (r.bin as f64 - it.bin as f64).abs() * grid.bin_duration_ns as f64;
                let gain_error_db = 10.0 * (r.power() / it.power()).log10();
                if delay_error_ns > tol.delay_ns || gain_error_db.abs() > tol.gain_db {
                    pass = false;
                }
                taps.push(TapMatch {
                    installed_bin: it.bin,
                    recovered_bin: r.bin,
                    delay_error_ns,
                    gain_error_db,
                });
            }
            None => {
                if it.power() >= detect {
                    pass = false;
                }
                missed.push(it.bin);
            }
        }
    }
    let spurious = rec
        .iter()
        .zip(&used)
        .filter(|(_, u)| !**u)
        .map(|(r, _)| r.bin)
        .collect();
    missed.sort_unstable();
    ValidationResult {
        taps,
        missed,
        spurious,
        pass,
    }
}

/// Validation record as emitted in JSON reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub link: LinkId,
    pub time_ms: u32,
    pub taps: Vec<TapMatch>,
    pub missed: Vec<u16>,
    pub spurious: Vec<u16>,
    pub pass: bool,
}

impl ValidationRecord {
    pub fn new(link: LinkId, time_ms: u32, r: ValidationResult) -> Self {
        Self {
            link,
            time_ms,
            taps: r.taps,
            missed: r.missed,
            spurious: r.spurious,
            pass: r.pass,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoundingConfig {
    pub sequence: SoundingSequence,
    pub repetitions: usize,
    /// Receiver SNR relative to total received tap power; `None` is noiseless.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub k: usize,
    pub threshold_db: f64,
}

impl Default for SoundingConfig {
    fn default() -> Self {
        Self {
            sequence: SoundingSequence::default_sequence(),
            repetitions: 16,
            snr_db: None,
            seed: 0,
            k: MAX_TAPS,
            threshold_db: DEFAULT_THRESHOLD_DB,
        }
    }
}

/// Noise power for a given SNR against a tap line's received power.
pub fn noise_power_for(line: &TapLine, snr_db: Option<f64>) -> f64 {
    match snr_db {
        Some(snr) => line.total_power() / 10f64.powf(snr / 10.0),
        None => 0.0,
    }
}

/// Sounds a single tap line through a fresh link filter.
pub fn sound_tap_line(line: &TapLine, grid: GridSpec, cfg: &SoundingConfig) -> Result<(CirEstimate, TapLine), SounderError> {
    let mut state = LinkFilterState::with_taps(grid, line.clone())?;
    let probe = probe_signal(&cfg.sequence, cfg.repetitions, 0, grid.sample_rate_hz());
    let mut rx = state.apply_taps(&probe)?;
    AwgnSource::new(cfg.seed).add_to(&mut rx.samples, noise_power_for(line, cfg.snr_db));
    let cir = estimate_cir(&cfg.sequence, &rx, cfg.repetitions, grid.num_bins as usize)?;
    let recovered = extract_taps_from_cir(&cir, cfg.k, cfg.threshold_db);
    Ok((cir, recovered))
}

/// Converts a recovered tap gain to the single-precision form used in tap lines.
pub fn to_gain(c: Complex64) -> Complex32 {
    Complex32::new(c.re as f32, c.im as f32)
}
