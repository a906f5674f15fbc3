//! Model checkpoint file format.
//!
//! Layout: the 8-byte magic `ECGCRNN1`, a little-endian `u32` length prefix,
//! that many bytes of UTF-8 JSON metadata (seed, epoch, metrics, and the
//! architecture), then every parameter as a little-endian `f64` in canonical
//! order: conv blocks 1-7 (kernel then bias), LSTM (input, recurrent, bias),
//! softmax head (weights then bias). Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, NnError};

const MAGIC: &[u8; 8] = b"ECGCRNN1";

/// Evaluation numbers frozen into a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMetrics {
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Metadata block stored as JSON between the magic and the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u32,
    #[serde(default)]
    pub metrics: CheckpointMetrics,
    pub config: ModelConfig,
}

/// Serializes parameters plus metadata into the checkpoint byte format.
pub fn checkpoint_bytes(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>, NnError> {
    if meta.config != params.config {
        return Err(NnError::ShapeMismatch(
            "metadata config does not match the parameters".into(),
        ));
    }
    let json = serde_json::to_vec(meta)
        .map_err(|e| NnError::BadCheckpoint(format!("metadata encoding: {e}")))?;
    let mut out = Vec::with_capacity(8 + 4 + json.len() + 8 * 1_300_000);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for slice in params.slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint byte buffer.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta), NnError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(NnError::BadCheckpoint("missing ECGCRNN1 magic".into()));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json_end = 12 + json_len;
    if bytes.len() < json_end {
        return Err(NnError::BadCheckpoint("metadata block truncated".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..json_end])
        .map_err(|e| NnError::BadCheckpoint(format!("metadata decoding: {e}")))?;

    let mut params = ModelParams::zeros(&meta.config)?;
    let expected: usize = params.slices().iter().map(|s| s.len()).sum();
    let payload = &bytes[json_end..];
    if payload.len() != expected * 8 {
        return Err(NnError::BadCheckpoint(format!(
            "weight payload holds {} bytes, expected {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut offset = 0;
    for slice in params.slices_mut() {
        for v in slice.iter_mut() {
            *v = f64::from_le_bytes(payload[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    Ok((params, meta))
}

/// Writes a checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    meta: &CheckpointMeta,
) -> Result<(), NnError> {
    let bytes = checkpoint_bytes(params, meta)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta), NnError> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = ModelConfig::shrunken(16);
        let params = init_params(&cfg, 77).unwrap();
        let meta = CheckpointMeta {
            seed: 77,
            epoch: 12,
            metrics: CheckpointMetrics {
                test_accuracy: Some(0.875),
                test_loss: Some(0.41),
                ..Default::default()
            },
            config: cfg,
        };
        let bytes = checkpoint_bytes(&params, &meta).unwrap();
        assert_eq!(&bytes[..8], b"ECGCRNN1");
        let (loaded, loaded_meta) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded, params);
        // Bit-exactness, not just value equality.
        for (a, b) in params.slices().iter().zip(loaded.slices().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Re-serialization reproduces the same bytes.
        let bytes2 = checkpoint_bytes(&loaded, &loaded_meta).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::shrunken(16);
        let params = init_params(&cfg, 1).unwrap();
        let meta = CheckpointMeta {
            seed: 1,
            epoch: 0,
            metrics: CheckpointMetrics::default(),
            config: cfg,
        };
        let bytes = checkpoint_bytes(&params, &meta).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(NnError::BadCheckpoint(_))));

        let truncated = &bytes[..bytes.len() - 8];
        assert!(matches!(parse_checkpoint(truncated), Err(NnError::BadCheckpoint(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let cfg = ModelConfig::shrunken(32);
        let params = init_params(&cfg, 5).unwrap();
        let meta = CheckpointMeta {
            seed: 5,
            epoch: 3,
            metrics: CheckpointMetrics::default(),
            config: cfg,
        };
        save_checkpoint(&path, &params, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded_meta.epoch, 3);
    }
}
