//! Replays a recorded signal through the exact streaming code path.
//!
//! Input is either a Level-4 MAT record (assumed 300 Hz unless overridden)
//! or raw little-endian int16 samples behind a one-line `fs=<Hz>` header.
//! The signal is chunked into telemetry frames with `t0_ms = 0`, fed
//! through [`StreamSession::ingest`] / [`StreamSession::maybe_classify`],
//! and the predictions are returned in order; replaying the same file with
//! the same checkpoint is byte-deterministic.

use std::path::Path;

use super::{MAX_FRAME_SAMPLES, RhythmPrediction, StreamConfig, StreamError, StreamSession,
            TelemetryFrame};
use crate::nn::ModelParams;
use crate::record_io;

/// Loads a replay input file: `(sampling rate, samples)`.
pub fn load_replay_signal(path: &Path, default_fs: u32) -> Result<(u32, Vec<f64>), StreamError> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"fs=") {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| StreamError::BadFrame("raw input missing header newline".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| StreamError::BadFrame("raw input header is not UTF-8".into()))?;
        let fs: u32 = header[3..]
            .trim()
            .parse()
            .map_err(|_| StreamError::BadFrame(format!("bad rate in header {header:?}")))?;
        let payload = &bytes[newline + 1..];
        if payload.len() % 2 != 0 {
            return Err(StreamError::BadFrame("odd raw int16 payload length".into()));
        }
        let samples = payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect();
        Ok((fs, samples))
    } else {
        let samples = record_io::parse_mat4(&bytes)
            .map_err(|e| StreamError::BadFrame(format!("MAT parse: {e}")))?;
        Ok((default_fs, samples))
    }
}

/// Feeds `samples` through a fresh session in frames of `frame_len` and
/// collects every prediction.
pub fn replay(
    params: &ModelParams,
    config: &StreamConfig,
    session_id: &str,
    fs: u32,
    samples: &[f64],
    frame_len: usize,
) -> Result<Vec<RhythmPrediction>, StreamError> {
    if frame_len == 0 || frame_len > MAX_FRAME_SAMPLES {
        return Err(StreamError::BadFrame(format!("frame length {frame_len}")));
    }
    let mut session = StreamSession::new(session_id, fs, config)?;
    let mut predictions = Vec::new();
    for (i, chunk) in samples.chunks(frame_len).enumerate() {
        let frame = TelemetryFrame {
            session: session_id.to_string(),
            seq: i as u64 + 1,
            fs,
            t0_ms: 0,
            samples: chunk
                .iter()
                .map(|&v| v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
                .collect(),
        };
        session.ingest(&frame)?;
        predictions.extend(session.maybe_classify(params)?);
    }
    Ok(predictions)
}
