//! Installed scenario file format.
//!
//! Little-endian, no padding:
//!
//! ```text
//! magic "RFTW" | version u16 = 1 | bin_duration_ns u32 | num_bins u16
//! | snapshot_period_us u32 | num_nodes u16 | antennas_per_node u8
//! | duration_ms u32
//! | for each ms, for each link in canonical order:
//! |     tap_count u8 | tap_count x (bin u16, gain_re f32, gain_im f32)
//! | crc32 u32 over every preceding byte
//! ```

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex32;
use thiserror::Error;

use crate::scenario::{
    link_count, validate_scenario, GridSpec, LinkId, Scenario, ScenarioError, Tap, TapLine, ValidationReport,
};

pub const MAGIC: [u8; 4] = *b"RFTW";
pub const VERSION: u16 = 1;
/// Header length in bytes, magic included.
pub const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 4 + 2 + 1 + 4;
const TAP_LEN: usize = 2 + 4 + 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("stream truncated at byte {0}")]
    Truncated(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after scenario")]
    TrailingBytes(usize),
    #[error("malformed scenario shape: {0}")]
    Shape(#[from] ScenarioError),
    #[error("scenario violates invariants:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        if self.remaining() < N {
            return Err(FormatError::Truncated(self.buf.len()));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

/// Appends `tap_count u8 | taps` for one tap line.
pub fn encode_tap_line(line: &TapLine, out: &mut Vec<u8>) {
    out.push(line.len() as u8);
    for t in line.taps() {
        out.extend_from_slice(&t.bin.to_le_bytes());
        out.extend_from_slice(&t.gain.re.to_le_bytes());
        out.extend_from_slice(&t.gain.im.to_le_bytes());
    }
}

/// Reads one tap line without checking its invariants.
pub(crate) fn decode_tap_line(cur: &mut Cursor<'_>) -> Result<TapLine, FormatError> {
    let count = cur.u8()? as usize;
    if cur.remaining() < count * TAP_LEN {
        return Err(FormatError::Truncated(cur.buf.len()));
    }
    let mut taps = Vec::with_capacity(count);
    for _ in 0..count {
        let bin = cur.u16()?;
        let re = cur.f32()?;
        let im = cur.f32()?;
        taps.push(Tap::new(bin, Complex32::new(re, im)));
    }
    Ok(TapLine::from_raw(taps))
}

pub(crate) fn encode_link(link: &LinkId, out: &mut Vec<u8>) {
    out.extend_from_slice(&link.tx_node.to_le_bytes());
    out.extend_from_slice(&link.rx_node.to_le_bytes());
    out.push(link.tx_antenna);
    out.push(link.rx_antenna);
}

pub(crate) fn decode_link(cur: &mut Cursor<'_>) -> Result<LinkId, FormatError> {
    Ok(LinkId::new(cur.u16()?, cur.u16()?, cur.u8()?, cur.u8()?))
}

/// Encodes a scenario. Refuses scenarios that fail validation.
pub fn serialize_scenario(s: &Scenario) -> Result<Vec<u8>, FormatError> {
    let report = validate_scenario(s);
    if !report.is_valid() {
        return Err(FormatError::Invalid(report));
    }
    let grid = s.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + s.snapshots().len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&grid.bin_duration_ns.to_le_bytes());
    out.extend_from_slice(&grid.num_bins.to_le_bytes());
    out.extend_from_slice(&grid.snapshot_period_us.to_le_bytes());
    out.extend_from_slice(&s.num_nodes().to_le_bytes());
    out.push(s.antennas_per_node());
    out.extend_from_slice(&s.duration_ms().to_le_bytes());
    for line in s.snapshots() {
        encode_tap_line(line, &mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes and validates a scenario.
pub fn deserialize_scenario(bytes: &[u8]) -> Result<Scenario, FormatError> {
    let mut cur = Cursor::new(bytes);
    let magic: [u8; 4] = cur.take()?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch(version));
    }
    let grid = GridSpec::new(cur.u32()?, cur.u16()?, cur.u32()?);
    let num_nodes = cur.u16()?;
    let antennas = cur.u8()?;
    let duration_ms = cur.u32()?;
    Scenario::check_shape(num_nodes, antennas, duration_ms)?;
    let links = link_count(num_nodes, antennas);
    let count = (links as u64) * duration_ms as u64;
    // Every tap line takes at least one byte; checking up front bounds the
    // allocation for corrupted headers.
    if count > cur.remaining() as u64 {
        return Err(FormatError::Truncated(bytes.len()));
    }
    let mut snapshots = Vec::with_capacity(count as usize);
    for _ in 0..count {
        snapshots.push(decode_tap_line(&mut cur)?);
    }
    let body_end = cur.position();
    let stored = cur.u32()?;
    if cur.remaining() > 0 {
        return Err(FormatError::TrailingBytes(cur.remaining()));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let s = Scenario::from_parts(grid, num_nodes, antennas, duration_ms, snapshots)?;
    let report = validate_scenario(&s);
    if !report.is_valid() {
        return Err(FormatError::Invalid(report));
    }
    Ok(s)
}

pub fn write_scenario(s: &Scenario, mut w: impl Write) -> Result<(), FormatError> {
    w.write_all(&serialize_scenario(s)?)?;
    Ok(())
}

pub fn read_scenario(mut r: impl Read) -> Result<Scenario, FormatError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    deserialize_scenario(&buf)
}

pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<(), FormatError> {
    std::fs::write(path, serialize_scenario(s)?)?;
    Ok(())
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, FormatError> {
    deserialize_scenario(&std::fs::read(path)?)
}
