//! Preprocessed-record cache: one binary file per record.
//!
//! Layout: magic `ECGPREP1`, little-endian `u32` format version, `f64`
//! sampling rate, `u64` sample count, then the samples as little-endian
//! `f64`. The version is bumped whenever the preprocessing path changes, so
//! stale caches fail loudly instead of feeding the model silently different
//! data.

use std::path::Path;

use anyhow::{Context, Result, bail};

const MAGIC: &[u8; 8] = b"ECGPREP1";

/// Bump when the dsp path (filter design, resampler, scaling) changes.
pub const CACHE_VERSION: u32 = 1;

pub fn write_record(path: &Path, fs: f64, samples: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 + 8 + 8 + samples.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&fs.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for v in samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).with_context(|| format!("writing cache {}", path.display()))
}

pub fn read_record(path: &Path) -> Result<(f64, Vec<f64>)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading cache {}", path.display()))?;
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        bail!("{}: not a preprocessed-record cache file", path.display());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        bail!(
            "{}: cache format version {version} does not match this build ({CACHE_VERSION}); \
             rerun `prepare`",
            path.display()
        );
    }
    let fs = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let payload = &bytes[28..];
    if payload.len() != count * 8 {
        bail!("{}: cache payload truncated", path.display());
    }
    let samples = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((fs, samples))
}
