//! Toy single-carrier link and jammer generators.
//!
//! The link sends QPSK frames, one symbol per engine sample. Each frame
//! starts with `pilot_len` known symbols. The receiver excises strong
//! narrowband interference in the frequency domain (bins whose power is more
//! than `excision_factor` times the frame median are zeroed), estimates one
//! complex gain from the pilots, equalizes and makes hard decisions. A frame
//! counts towards throughput only if every payload bit is correct.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::Serialize;

use crate::engine::{mix_at_receiver, EngineError, IqChunk, LinkFilterState};
use crate::scenario::{GridSpec, TapLine};

const DATA_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const JAMMER_STREAM: u64 = 3;

/// SNR used by the jamming demo when none is given.
pub const DEFAULT_DEMO_SNR_DB: f64 = 18.0;

/// Windowed-sinc length used to shape wideband noise.
pub const SHAPING_TAPS: usize = 129;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLinkConfig {
    /// Symbols per second; one symbol per engine sample.
    pub symbol_rate: f64,
    pub frame_len: usize,
    pub pilot_len: usize,
    pub excision_factor: f64,
    /// Frames grouped into one reported time step by [`run_timeline`].
    pub frames_per_second: usize,
}

impl Default for ToyLinkConfig {
    fn default() -> Self {
        Self {
            symbol_rate: GridSpec::default().sample_rate_hz(),
            frame_len: 512,
            pilot_len: 16,
            excision_factor: 10.0,
            frames_per_second: 20,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WaveformError {
    #[error("pilot_len must be in 1..frame_len")]
    BadFrame,
    #[error("bandwidth_fraction must be in (0, 1]")]
    BadBandwidth,
    #[error("jammer power must be finite and >= 0")]
    BadPower,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl ToyLinkConfig {
    pub fn check(&self) -> Result<(), WaveformError> {
        if self.pilot_len == 0 || self.pilot_len >= self.frame_len {
            return Err(WaveformError::BadFrame);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JammerKind {
    Narrowband,
    Wideband,
}

impl FromStr for JammerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "narrowband" | "tone" => Ok(Self::Narrowband),
            "wideband" | "noise" => Ok(Self::Wideband),
            _ => Err(format!("unknown jammer kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JammerConfig {
    pub kind: JammerKind,
    /// Occupied fraction of the link bandwidth. Informative only for a tone.
    pub bandwidth_fraction: f64,
    /// Linear power per sample at the jammer output.
    pub power: f64,
    /// Centre frequency in cycles per sample.
    pub center_offset: f64,
}

impl JammerConfig {
    /// ~156 kHz of a 20 MHz channel.
    pub const NARROWBAND_FRACTION: f64 = 0.008;
    /// 10 MHz of a 20 MHz channel.
    pub const WIDEBAND_FRACTION: f64 = 0.5;

    pub fn narrowband(power: f64) -> Self {
        Self {
            kind: JammerKind::Narrowband,
            bandwidth_fraction: Self::NARROWBAND_FRACTION,
            power,
            center_offset: 0.1234,
        }
    }

    pub fn wideband(power: f64) -> Self {
        Self {
            kind: JammerKind::Wideband,
            bandwidth_fraction: Self::WIDEBAND_FRACTION,
            power,
            center_offset: 0.0,
        }
    }

    pub fn of_kind(kind: JammerKind, power: f64) -> Self {
        match kind {
            JammerKind::Narrowband => Self::narrowband(power),
            JammerKind::Wideband => Self::wideband(power),
        }
    }

    pub fn check(&self) -> Result<(), WaveformError> {
        if !(self.bandwidth_fraction > 0.0 && self.bandwidth_fraction <= 1.0) {
            return Err(WaveformError::BadBandwidth);
        }
        if !(self.power.is_finite() && self.power >= 0.0) {
            return Err(WaveformError::BadPower);
        }
        Ok(())
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Hamming-windowed sinc lowpass with cutoff `fc` cycles/sample, unit DC gain.
pub fn lowpass_taps(fc: f64, len: usize) -> Vec<f64> {
    let mid = (len - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Generates `length` jammer samples at the default engine rate.
///
/// A tone has constant modulus `sqrt(power)`. Wideband noise is white
/// Gaussian, lowpassed to `bandwidth_fraction` with [`lowpass_taps`] (skipped
/// at fraction 1), shifted to `center_offset` and scaled so its measured
/// power equals `power`.
pub fn gen_jammer(cfg: &JammerConfig, length: usize, seed: u64) -> Result<IqChunk, WaveformError> {
    cfg.check()?;
    let rate = GridSpec::default().sample_rate_hz();
    let amp = cfg.power.sqrt();
    let samples = match cfg.kind {
        JammerKind::Narrowband => (0..length)
            .map(|n| Complex64::from_polar(amp, 2.0 * PI * cfg.center_offset * n as f64))
            .collect(),
        JammerKind::Wideband => {
            let mut r = rng(seed, JAMMER_STREAM);
            let mut white = |_| {
                let re: f64 = StandardNormal.sample(&mut r);
                let im: f64 = StandardNormal.sample(&mut r);
                Complex64::new(re, im)
            };
            let mut x: Vec<Complex64> = if cfg.bandwidth_fraction >= 1.0 {
                (0..length).map(&mut white).collect()
            } else {
                let h = lowpass_taps(cfg.bandwidth_fraction / 2.0, SHAPING_TAPS);
                let raw: Vec<Complex64> = (0..length + h.len() - 1).map(&mut white).collect();
                (0..length)
                    .map(|n| h.iter().enumerate().map(|(k, &c)| raw[n + h.len() - 1 - k] * c).sum())
                    .collect()
            };
            for (n, v) in x.iter_mut().enumerate() {
                *v *= Complex64::from_polar(1.0, 2.0 * PI * cfg.center_offset * n as f64);
            }
            let p = x.iter().map(|v| v.norm_sqr()).sum::<f64>() / length.max(1) as f64;
            let scale = if p > 0.0 { amp / p.sqrt() } else { 0.0 };
            x.iter_mut().for_each(|v| *v *= scale);
            x
        }
    };
    Ok(IqChunk::new(samples, 0, rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkMetrics {
    pub throughput_fraction: f64,
    pub ber: f64,
    pub frames: usize,
}

/// A jammer together with its channel to the receiver.
#[derive(Debug, Clone)]
pub struct Jamming {
    pub config: JammerConfig,
    pub channel: TapLine,
    /// Frame range during which the jammer transmits.
    pub active_frames: std::ops::Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FrameResult {
    ok: bool,
    bit_errors: usize,
}

fn qpsk(bits: u8) -> Complex64 {
    let re = if bits & 1 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    let im = if bits & 2 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    Complex64::new(re, im)
}

fn demap(s: Complex64) -> u8 {
    u8::from(s.re < 0.0) | (u8::from(s.im < 0.0) << 1)
}

fn pass_through(line: &TapLine, x: Vec<Complex64>) -> Result<IqChunk, EngineError> {
    let grid = GridSpec::default();
    let mut st = LinkFilterState::with_taps(grid, line.clone())?;
    st.apply_taps(&IqChunk::new(x, 0, grid.sample_rate_hz()))
}

fn simulate(
    cfg: &ToyLinkConfig,
    channel: &TapLine,
    jamming: Option<&Jamming>,
    snr_db: f64,
    seed: u64,
    frames: usize,
) -> Result<Vec<FrameResult>, WaveformError> {
    cfg.check()?;
    let n = cfg.frame_len;
    // Receiver timing follows the strongest path; bins are one sample wide.
    let delay = channel
        .taps()
        .iter()
        .max_by(|a, b| a.power().total_cmp(&b.power()).then(b.bin.cmp(&a.bin)))
        .map_or(0, |t| t.bin as usize);
    let total = frames * n + delay;

    let mut data = rng(seed, DATA_STREAM);
    let pilots: Vec<u8> = (0..cfg.pilot_len).map(|_| data.random_range(0..4u8)).collect();
    let mut sym: Vec<u8> = Vec::with_capacity(frames * n);
    for _ in 0..frames {
        sym.extend_from_slice(&pilots);
        sym.extend((cfg.pilot_len..n).map(|_| data.random_range(0..4u8)));
    }
    let mut tx: Vec<Complex64> = sym.iter().map(|&b| qpsk(b)).collect();
    tx.resize(total, Complex64::new(0.0, 0.0));

    let signal_power = channel.total_power();
    let noise_power = if signal_power > 0.0 {
        signal_power / 10f64.powf(snr_db / 10.0)
    } else {
        1.0
    };
    let mut contribs = vec![pass_through(channel, tx)?];
    if let Some(j) = jamming {
        let mut jx = gen_jammer(&j.config, total, seed)?.samples;
        for (i, v) in jx.iter_mut().enumerate() {
            let frame = i.saturating_sub(delay) / n;
            if !j.active_frames.contains(&frame) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        contribs.push(pass_through(&j.channel, jx)?);
    }
    let noise_seed = rng(seed, NOISE_STREAM).random();
    let rx = mix_at_receiver(&contribs, noise_power, noise_seed)?.samples;

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut power = vec![0.0; n];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut y = rx[delay + f * n..delay + (f + 1) * n].to_vec();
        fwd.process(&mut y);
        for (p, v) in power.iter_mut().zip(&y) {
            *p = v.norm_sqr();
        }
        let mut sorted = power.clone();
        sorted.sort_by(f64::total_cmp);
        let limit = sorted[n / 2] * cfg.excision_factor;
        for (v, p) in y.iter_mut().zip(&power) {
            if *p > limit {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        inv.process(&mut y);
        y.iter_mut().for_each(|v| *v /= n as f64);

        let s = &sym[f * n..(f + 1) * n];
        let (num, den) = s[..cfg.pilot_len]
            .iter()
            .zip(&y)
            .fold((Complex64::new(0.0, 0.0), 0.0), |(num, den), (&b, &v)| {
                let x = qpsk(b);
                (num + v * x.conj(), den + x.norm_sqr())
            });
        let h = num / den;
        let bit_errors = s[cfg.pilot_len..]
            .iter()
            .zip(&y[cfg.pilot_len..])
            .map(|(&b, &v)| {
                let d = if h.norm_sqr() > 0.0 { demap(v / h) } else { 0 };
                (d ^ b).count_ones() as usize
            })
            .sum();
        out.push(FrameResult {
            ok: bit_errors == 0,
            bit_errors,
        });
    }
    Ok(out)
}

fn metrics(cfg: &ToyLinkConfig, frames: &[FrameResult]) -> LinkMetrics {
    let bits = (frames.len() * (cfg.frame_len - cfg.pilot_len) * 2).max(1);
    LinkMetrics {
        throughput_fraction: frames.iter().filter(|f| f.ok).count() as f64 / frames.len().max(1) as f64,
        ber: frames.iter().map(|f| f.bit_errors).sum::<usize>() as f64 / bits as f64,
        frames: frames.len(),
    }
}

/// Sends `frames` frames through `channel` with an optional jammer that
/// stays on for the whole run. Deterministic given `seed`.
pub fn run_link(
    cfg: &ToyLinkConfig,
    channel: &TapLine,
    jammer: Option<(&JammerConfig, &TapLine)>,
    snr_db: f64,
    seed: u64,
    frames: usize,
) -> Result<LinkMetrics, WaveformError> {
    let jamming = jammer.map(|(c, ch)| Jamming {
        config: *c,
        channel: ch.clone(),
        active_frames: 0..frames,
    });
    let r = simulate(cfg, channel, jamming.as_ref(), snr_db, seed, frames)?;
    Ok(metrics(cfg, &r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelinePoint {
    pub time_s: f64,
    pub throughput_fraction: f64,
}

/// Per-second throughput over `seconds` steps of `cfg.frames_per_second`
/// frames, with the jammer on during `[on_s, off_s)`.
#[allow(clippy::too_many_arguments)]
pub fn run_timeline(
    cfg: &ToyLinkConfig,
    channel: &TapLine,
    jammer: Option<(&JammerConfig, &TapLine)>,
    snr_db: f64,
    seed: u64,
    seconds: usize,
    on_s: usize,
    off_s: usize,
) -> Result<Vec<TimelinePoint>, WaveformError> {
    let fps = cfg.frames_per_second.max(1);
    let frames = seconds * fps;
    let jamming = jammer.map(|(c, ch)| Jamming {
        config: *c,
        channel: ch.clone(),
        active_frames: on_s * fps..off_s * fps,
    });
    let r = simulate(cfg, channel, jamming.as_ref(), snr_db, seed, frames)?;
    Ok(r.chunks(fps)
        .enumerate()
        .map(|(s, c)| TimelinePoint {
            time_s: s as f64,
            throughput_fraction: c.iter().filter(|f| f.ok).count() as f64 / c.len() as f64,
        })
        .collect())
}

pub fn timeline_csv(points: &[TimelinePoint]) -> String {
    let mut s = String::from("time_s,throughput_fraction\n");
    for p in points {
        s.push_str(&format!("{},{:.6}\n", p.time_s, p.throughput_fraction));
    }
    s
}
