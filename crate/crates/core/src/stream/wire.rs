//! Framed wire protocol: a 4-byte big-endian payload length followed by a
//! UTF-8 JSON payload. Topics are plain strings, `ecg/<session>/raw` for
//! data and `ecg/<session>/rhythm` for predictions.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{RhythmPrediction, StreamError, TelemetryFrame};

/// Hard cap on payload size; anything larger is a protocol violation.
pub const MAX_PAYLOAD: usize = 1 << 20;

/// Every message that crosses the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum WireMessage {
    /// Publisher -> server: one telemetry frame of raw samples.
    #[serde(rename = "data")]
    Data { session: String, seq: u64, fs: u32, t0_ms: i64, samples: Vec<i16> },
    /// Client -> server: subscribe this connection to a topic.
    #[serde(rename = "subscribe")]
    Subscribe { topic: String },
    /// Server -> subscribers of `ecg/<session>/rhythm`.
    #[serde(rename = "predict")]
    Predict {
        session: String,
        group: u64,
        t_start_ms: i64,
        t_end_ms: i64,
        probs: Vec<f64>,
        class: String,
    },
    /// Server -> client: a session expired with less than a full group
    /// buffered; the remainder is not classified.
    #[serde(rename = "incomplete")]
    Incomplete { session: String, buffered_samples: u64 },
    /// Server -> client: protocol error, the connection closes after this.
    #[serde(rename = "error")]
    Error { code: u32, message: String },
}

impl WireMessage {
    pub fn to_frame(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("wire messages serialize");
        let mut out = Vec::with_capacity(4 + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }
}

/// The published payload for one prediction.
pub fn prediction_message(p: &RhythmPrediction) -> WireMessage {
    WireMessage::Predict {
        session: p.session.clone(),
        group: p.group,
        t_start_ms: p.t_start_ms,
        t_end_ms: p.t_end_ms,
        probs: p.probs.clone(),
        class: p.class.token().to_string(),
    }
}

impl TryFrom<WireMessage> for TelemetryFrame {
    type Error = StreamError;

    fn try_from(msg: WireMessage) -> Result<TelemetryFrame, StreamError> {
        match msg {
            WireMessage::Data { session, seq, fs, t0_ms, samples } => {
                Ok(TelemetryFrame { session, seq, fs, t0_ms, samples })
            }
            other => Err(StreamError::Protocol(format!("expected data message, got {other:?}"))),
        }
    }
}

/// Reads one length-prefixed frame; `Ok(None)` at a clean end of stream.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Vec<u8>>, StreamError> {
    let mut len_buf = [0u8; 4];
    match reader.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len == 0 || len > MAX_PAYLOAD {
        return Err(StreamError::Protocol(format!("frame length {len}")));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload)?;
    Ok(Some(payload))
}

/// Writes one length-prefixed message.
pub fn write_frame(writer: &mut impl Write, msg: &WireMessage) -> Result<(), StreamError> {
    writer.write_all(&msg.to_frame())?;
    writer.flush()?;
    Ok(())
}

/// Parses a frame payload into a message.
pub fn parse_message(payload: &[u8]) -> Result<WireMessage, StreamError> {
    serde_json::from_slice(payload)
        .map_err(|e| StreamError::Protocol(format!("bad JSON payload: {e}")))
}

pub fn raw_topic(session: &str) -> String {
    format!("ecg/{session}/raw")
}

pub fn rhythm_topic(session: &str) -> String {
    format!("ecg/{session}/rhythm")
}
