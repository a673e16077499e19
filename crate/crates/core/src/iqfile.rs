//! Raw IQ recordings: interleaved little-endian `f32` pairs plus a JSON
//! sidecar (`<file>.json`) holding `sample_rate_hz` and `start_index`.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::IqChunk;

#[derive(Debug, Error)]
pub enum IqFileError {
    #[error("IQ data length {0} is not a multiple of 8 bytes")]
    OddLength(usize),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqSidecar {
    pub sample_rate_hz: f64,
    pub start_index: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn decode_iq(bytes: &[u8]) -> Result<Vec<Complex64>, IqFileError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(IqFileError::OddLength(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect())
}

pub fn write_iq(path: impl AsRef<Path>, chunk: &IqChunk) -> Result<(), IqFileError> {
    let path = path.as_ref();
    std::fs::write(path, chunk.to_le_f32_bytes())?;
    let sidecar = IqSidecar {
        sample_rate_hz: chunk.sample_rate_hz,
        start_index: chunk.start_index,
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_iq(path: impl AsRef<Path>) -> Result<IqChunk, IqFileError> {
    let path = path.as_ref();
    let samples = decode_iq(&std::fs::read(path)?)?;
    let sidecar: IqSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    Ok(IqChunk::new(samples, sidecar.start_index, sidecar.sample_rate_hz))
}
