//! Streaming inference: telemetry frames in, rhythm predictions out.
//!
//! Samples arrive as sequenced frames at 200 or 300 Hz. Per session, a
//! contiguous run of frames forms a segment; every complete group of 25
//! sliding windows (6656 samples at 200 Hz, about 33 seconds) inside a
//! segment is preprocessed (band-pass filtered at the source rate,
//! resampled to 200 Hz, standardized by the group's own standard deviation)
//! and classified once. Sequence gaps and buffer overflows close the
//! current segment, so no window ever spans missing data and no window is
//! classified twice.
//!
//! All trigger and slice arithmetic is keyed to absolute sample indices, so
//! any frame chunking of the same sample stream produces byte-identical
//! predictions.

mod replay;
mod server;
mod wire;

pub use replay::{load_replay_signal, replay};
pub use server::{ServeConfig, ServerHandle, serve};
pub use wire::{WireMessage, prediction_message, read_frame, write_frame};

use thiserror::Error;

use crate::dsp::{self, BandPassSpec, DspError, IirCoefficients};
use crate::nn::{self, ModelParams, NnError, Phase};
use crate::pipeline::{self, PipelineError, WindowConfig};
use crate::record_io::RhythmClass;
use crate::train::argmax_class;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("stale sequence number {got} (last seen {last})")]
    OutOfOrder { last: u64, got: u64 },
    #[error("sampling rate changed mid-session: {session_fs} Hz -> {frame_fs} Hz")]
    RateMismatch { session_fs: u32, frame_fs: u32 },
    #[error("unsupported or malformed frame: {0}")]
    BadFrame(String),
    #[error("no model checkpoint loaded")]
    ModelNotLoaded,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One transport message of contiguous ECG samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryFrame {
    pub session: String,
    pub seq: u64,
    pub fs: u32,
    /// Capture timestamp of the first sample, milliseconds since the epoch.
    pub t0_ms: i64,
    pub samples: Vec<i16>,
}

/// Maximum samples per frame.
pub const MAX_FRAME_SAMPLES: usize = 4096;

/// Streaming parameters.
#[derive(Debug, Clone)]
pub struct StreamConfig {
    /// Windows per classified group.
    pub group_windows: usize,
    pub window: WindowConfig,
    /// Target rate after resampling.
    pub fs_out: f64,
    /// Band-pass applied at the source rate before resampling.
    pub low_cut: f64,
    pub high_cut: f64,
    pub filter_order: usize,
    /// Raw-sample buffer capacity per session; exceeding it drops the
    /// oldest unclassified data behind a gap marker.
    pub capacity: usize,
    /// Samples of 200 Hz left margin fed to the filter before each group.
    pub margin: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            group_windows: 25,
            window: WindowConfig::default(),
            fs_out: 200.0,
            low_cut: 0.5,
            high_cut: 40.0,
            filter_order: 2,
            capacity: 1 << 17,
            margin: 512,
        }
    }
}

impl StreamConfig {
    /// 200 Hz samples between group starts.
    pub fn group_stride(&self) -> usize {
        self.group_windows * self.window.stride
    }

    /// 200 Hz samples covered by one group.
    pub fn group_span(&self) -> usize {
        (self.group_windows - 1) * self.window.stride + self.window.window_len
    }
}

/// One rhythm prediction for a group of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct RhythmPrediction {
    pub session: String,
    /// Monotonic per-session group index.
    pub group: u64,
    pub t_start_ms: i64,
    pub t_end_ms: i64,
    pub probs: Vec<f64>,
    pub class: RhythmClass,
}

/// Per-session stream state: raw buffer for the current contiguous segment
/// plus classification progress.
#[derive(Debug)]
pub struct StreamSession {
    pub id: String,
    config: StreamConfig,
    fs: u32,
    /// Rate ratio fs / fs_out as a reduced fraction p/q.
    p: usize,
    q: usize,
    coeffs: IirCoefficients,
    last_seq: Option<u64>,
    /// Capture timestamp of the current segment's first sample.
    seg_t0_ms: i64,
    /// Raw samples dropped from the front of the current segment.
    seg_dropped: usize,
    seg_buf: Vec<f64>,
    /// Groups classified in the current segment.
    seg_groups: usize,
    /// Total predictions emitted over the session lifetime.
    pub emitted: u64,
    /// Gap markers recorded (sequence gaps and overflows).
    pub gaps: u64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl StreamSession {
    /// Opens a session at the rate of its first frame (200 or 300 Hz).
    pub fn new(id: &str, fs: u32, config: &StreamConfig) -> Result<StreamSession, StreamError> {
        if fs != 200 && fs != 300 {
            return Err(StreamError::RateMismatch { session_fs: fs, frame_fs: fs });
        }
        let coeffs = dsp::design_bandpass(&BandPassSpec {
            low_cut: config.low_cut,
            high_cut: config.high_cut,
            order: config.filter_order,
            fs: fs as f64,
        })?;
        let g = gcd(fs as usize, config.fs_out as usize);
        Ok(StreamSession {
            id: id.to_string(),
            config: config.clone(),
            fs,
            p: fs as usize / g,
            q: config.fs_out as usize / g,
            coeffs,
            last_seq: None,
            seg_t0_ms: 0,
            seg_dropped: 0,
            seg_buf: Vec::new(),
            seg_groups: 0,
            emitted: 0,
            gaps: 0,
        })
    }

    pub fn fs(&self) -> u32 {
        self.fs
    }

    /// Raw samples currently part of the live segment.
    pub fn segment_raw_len(&self) -> usize {
        self.seg_dropped + self.seg_buf.len()
    }

    /// Conceptual 200 Hz samples available in the live segment.
    pub fn preprocessed_available(&self) -> usize {
        self.segment_raw_len() * self.q / self.p
    }

    /// Raw samples past the last classified group (an incomplete group).
    pub fn unclassified_raw_len(&self) -> usize {
        let consumed = (self.seg_groups * self.config.group_stride() * self.p).div_ceil(self.q);
        self.segment_raw_len().saturating_sub(consumed)
    }

    fn reset_segment(&mut self, t0_ms: i64) {
        self.seg_t0_ms = t0_ms;
        self.seg_dropped = 0;
        self.seg_buf.clear();
        self.seg_groups = 0;
    }

    /// Appends a frame's samples. Out-of-order frames are rejected with the
    /// session unchanged; a jump in sequence numbers closes the current
    /// segment behind a gap marker, so windows never span the gap.
    pub fn ingest(&mut self, frame: &TelemetryFrame) -> Result<(), StreamError> {
        if frame.session != self.id {
            return Err(StreamError::BadFrame(format!(
                "frame for session {:?} fed to session {:?}",
                frame.session, self.id
            )));
        }
        if frame.fs != self.fs {
            return Err(StreamError::RateMismatch { session_fs: self.fs, frame_fs: frame.fs });
        }
        if frame.samples.is_empty() || frame.samples.len() > MAX_FRAME_SAMPLES {
            return Err(StreamError::BadFrame(format!(
                "{} samples in one frame",
                frame.samples.len()
            )));
        }
        match self.last_seq {
            Some(last) if frame.seq <= last => {
                return Err(StreamError::OutOfOrder { last, got: frame.seq });
            }
            Some(last) if frame.seq > last + 1 => {
                log::warn!(
                    "session {}: gap between seq {last} and {}; suppressing windows that span it",
                    self.id,
                    frame.seq
                );
                self.gaps += 1;
                self.reset_segment(frame.t0_ms);
            }
            Some(_) => {}
            None => {
                self.reset_segment(frame.t0_ms);
            }
        }
        self.last_seq = Some(frame.seq);
        self.seg_buf.extend(frame.samples.iter().map(|&v| v as f64));

        if self.seg_buf.len() > self.config.capacity {
            // Keep the newest samples; everything older is lost behind a
            // gap marker and the segment restarts.
            let dropped = self.segment_raw_len() - self.config.capacity;
            log::warn!(
                "session {}: buffer overflow, dropping {dropped} oldest unclassified samples",
                self.id
            );
            let keep_from = self.seg_buf.len() - self.config.capacity;
            let new_t0 = self.seg_t0_ms
                + ((self.seg_dropped + keep_from) as f64 / self.fs as f64 * 1000.0).round() as i64;
            self.seg_buf.drain(..keep_from);
            let kept = std::mem::take(&mut self.seg_buf);
            self.reset_segment(new_t0);
            self.seg_buf = kept;
            self.gaps += 1;
        }
        Ok(())
    }

    /// Raw index (segment-relative) where the slice for group `g` starts,
    /// aligned so that its 200 Hz image is an integer index.
    fn slice_start(&self, g: usize) -> (usize, usize) {
        let m_target = g * self.config.group_stride();
        let m_margin = m_target.saturating_sub(self.config.margin);
        let m0 = (m_margin / self.q) * self.q;
        (m0 / self.q * self.p, m0)
    }

    /// Classifies every complete, gap-free, not-yet-classified group.
    pub fn maybe_classify(
        &mut self,
        params: &ModelParams,
    ) -> Result<Vec<RhythmPrediction>, StreamError> {
        let mut out = Vec::new();
        loop {
            let g = self.seg_groups;
            let stride = self.config.group_stride();
            let span = self.config.group_span();
            let m_target = g * stride;
            let needed_m_end = m_target + span;
            let r1 = (needed_m_end * self.p).div_ceil(self.q);
            if self.segment_raw_len() < r1 {
                break;
            }
            let (r0, m0) = self.slice_start(g);
            debug_assert!(r0 >= self.seg_dropped);
            let slice = &self.seg_buf[r0 - self.seg_dropped..r1 - self.seg_dropped];

            let filtered = dsp::filtfilt(&self.coeffs, slice)?;
            let at_out_rate = if self.p == self.q {
                filtered
            } else {
                dsp::resample(&filtered, self.fs as f64, self.config.fs_out)?
            };
            let local = m_target - m0;
            if at_out_rate.len() < local + span {
                break;
            }
            let group = &at_out_rate[local..local + span];
            let scaled = match dsp::standardize_per_signal(group) {
                Ok(s) => s,
                Err(DspError::ZeroVariance) => {
                    log::debug!(
                        "session {}: group {} has zero variance, classifying unscaled",
                        self.id,
                        self.emitted
                    );
                    group.to_vec()
                }
                Err(e) => return Err(e.into()),
            };
            let tensor = pipeline::extract_windows(&self.id, &scaled, 0, &self.config.window)?;
            debug_assert_eq!(tensor.nw, self.config.group_windows);
            let (probs, _) = nn::model_forward(&tensor, params, Phase::Eval)?;
            let class = argmax_class(&probs);
            let ms_per_sample = 1000.0 / self.config.fs_out;
            out.push(RhythmPrediction {
                session: self.id.clone(),
                group: self.emitted,
                t_start_ms: self.seg_t0_ms + (m_target as f64 * ms_per_sample).round() as i64,
                t_end_ms: self.seg_t0_ms
                    + ((m_target + span) as f64 * ms_per_sample).round() as i64,
                probs,
                class,
            });
            self.emitted += 1;
            self.seg_groups += 1;

            // Drop raw samples no later group can need.
            let (r0_next, _) = self.slice_start(self.seg_groups);
            if r0_next > self.seg_dropped {
                self.seg_buf.drain(..r0_next - self.seg_dropped);
                self.seg_dropped = r0_next;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::testutil::tone;

    fn tiny_params() -> ModelParams {
        nn::init_params(&ModelConfig::shrunken(16), 5).unwrap()
    }

    fn frame(session: &str, seq: u64, fs: u32, samples: Vec<i16>) -> TelemetryFrame {
        TelemetryFrame { session: session.into(), seq, fs, t0_ms: 0, samples }
    }

    fn tone_i16(len: usize, fs: f64) -> Vec<i16> {
        tone(len, fs, 7.0, 400.0).iter().map(|&v| v as i16).collect()
    }

    #[test]
    fn ingest_length_arithmetic_300_to_200() {
        let cfg = StreamConfig::default();
        let mut s = StreamSession::new("a", 300, &cfg).unwrap();
        s.ingest(&frame("a", 1, 300, tone_i16(1500, 300.0))).unwrap();
        s.ingest(&frame("a", 2, 300, tone_i16(1500, 300.0))).unwrap();
        assert_eq!(s.preprocessed_available(), 2000);
    }

    #[test]
    fn ingest_rejects_out_of_order_and_rate_changes() {
        let cfg = StreamConfig::default();
        let mut s = StreamSession::new("a", 300, &cfg).unwrap();
        s.ingest(&frame("a", 5, 300, tone_i16(100, 300.0))).unwrap();
        let before = s.segment_raw_len();
        assert!(matches!(
            s.ingest(&frame("a", 5, 300, tone_i16(100, 300.0))),
            Err(StreamError::OutOfOrder { last: 5, got: 5 })
        ));
        assert!(matches!(
            s.ingest(&frame("a", 4, 300, tone_i16(100, 300.0))),
            Err(StreamError::OutOfOrder { .. })
        ));
        assert_eq!(s.segment_raw_len(), before);

        assert!(matches!(
            s.ingest(&frame("a", 6, 200, tone_i16(100, 200.0))),
            Err(StreamError::RateMismatch { session_fs: 300, frame_fs: 200 })
        ));
        assert_eq!(s.segment_raw_len(), before);
    }

    #[test]
    fn session_rejects_unsupported_rates() {
        let cfg = StreamConfig::default();
        assert!(matches!(
            StreamSession::new("a", 250, &cfg),
            Err(StreamError::RateMismatch { .. })
        ));
    }

    #[test]
    fn group_boundary_at_exactly_6656_samples() {
        let cfg = StreamConfig::default();
        let params = tiny_params();

        // 6655 samples at 200 Hz: no prediction yet.
        let mut s = StreamSession::new("a", 200, &cfg).unwrap();
        let samples = tone_i16(6655, 200.0);
        for (i, chunk) in samples.chunks(4000).enumerate() {
            s.ingest(&frame("a", i as u64 + 1, 200, chunk.to_vec())).unwrap();
        }
        assert!(s.maybe_classify(&params).unwrap().is_empty());

        // One more sample completes the group.
        let next_seq = samples.chunks(4000).count() as u64 + 1;
        s.ingest(&frame("a", next_seq, 200, vec![0])).unwrap();
        let preds = s.maybe_classify(&params).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].group, 0);
        let sum: f64 = preds[0].probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // 25 windows of 512 at stride 256 cover 33.28 s.
        assert_eq!(preds[0].t_end_ms - preds[0].t_start_ms, 33_280);
    }

    #[test]
    fn two_groups_from_13312_samples() {
        let cfg = StreamConfig::default();
        let params = tiny_params();
        let mut s = StreamSession::new("a", 200, &cfg).unwrap();
        let samples = tone_i16(13_312, 200.0);
        for (i, chunk) in samples.chunks(4096).enumerate() {
            s.ingest(&frame("a", i as u64 + 1, 200, chunk.to_vec())).unwrap();
        }
        let preds = s.maybe_classify(&params).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].group, 0);
        assert_eq!(preds[1].group, 1);
        // Non-overlapping groups: 32 s apart (25 windows * 256 samples).
        assert_eq!(preds[1].t_start_ms - preds[0].t_start_ms, 32_000);
    }

    #[test]
    fn sequence_gap_suppresses_spanning_windows() {
        let cfg = StreamConfig::default();
        let params = tiny_params();

        // Continuous: 8000 + 8000 samples -> 16000 samples -> 2 groups.
        let mut cont = StreamSession::new("a", 200, &cfg).unwrap();
        cont.ingest(&frame("a", 1, 200, tone_i16(4000, 200.0))).unwrap();
        cont.ingest(&frame("a", 2, 200, tone_i16(4000, 200.0))).unwrap();
        cont.ingest(&frame("a", 3, 200, tone_i16(4000, 200.0))).unwrap();
        cont.ingest(&frame("a", 4, 200, tone_i16(4000, 200.0))).unwrap();
        assert_eq!(cont.maybe_classify(&params).unwrap().len(), 2);

        // Same sample count split by a gap after 8000: each segment has
        // 8000 samples -> 1 group each, and the group that would span the
        // gap never exists. Oracle: windows enumerated over the gapped
        // index set {0..8000} u {8000..16000} with no window crossing the
        // boundary give floor(max_windows(8000)/25) = 1 group per run.
        let mut gapped = StreamSession::new("a", 200, &cfg).unwrap();
        gapped.ingest(&frame("a", 1, 200, tone_i16(4000, 200.0))).unwrap();
        gapped.ingest(&frame("a", 2, 200, tone_i16(4000, 200.0))).unwrap();
        let first = gapped.maybe_classify(&params).unwrap();
        assert_eq!(first.len(), 1);
        gapped.ingest(&frame("a", 4, 200, tone_i16(4000, 200.0))).unwrap(); // seq 3 missing
        assert_eq!(gapped.gaps, 1);
        gapped.ingest(&frame("a", 5, 200, tone_i16(4000, 200.0))).unwrap();
        let second = gapped.maybe_classify(&params).unwrap();
        assert_eq!(second.len(), 1);
        assert_eq!(second[0].group, 1);
        assert_eq!(gapped.emitted, 2);
    }

    #[test]
    fn chunking_does_not_change_predictions() {
        let cfg = StreamConfig::default();
        let params = tiny_params();
        let samples = tone_i16(20_000, 300.0);

        let mut reference: Option<Vec<RhythmPrediction>> = None;
        for chunk_len in [64usize, 500, 4096] {
            let mut s = StreamSession::new("a", 300, &cfg).unwrap();
            let mut preds = Vec::new();
            for (i, chunk) in samples.chunks(chunk_len).enumerate() {
                s.ingest(&frame("a", i as u64 + 1, 300, chunk.to_vec())).unwrap();
                preds.extend(s.maybe_classify(&params).unwrap());
            }
            match &reference {
                None => reference = Some(preds),
                Some(r) => assert_eq!(&preds, r, "chunk {chunk_len}"),
            }
        }
    }

    #[test]
    fn overflow_drops_oldest_behind_gap_marker() {
        let mut cfg = StreamConfig::default();
        cfg.capacity = 10_000;
        let mut s = StreamSession::new("a", 200, &cfg).unwrap();
        for i in 0..5 {
            s.ingest(&frame("a", i + 1, 200, tone_i16(4000, 200.0))).unwrap();
        }
        assert!(s.segment_raw_len() <= 10_000);
        assert!(s.gaps >= 1);
    }

    #[test]
    fn no_window_classified_twice() {
        let cfg = StreamConfig::default();
        let params = tiny_params();
        let mut s = StreamSession::new("a", 200, &cfg).unwrap();
        let mut all = Vec::new();
        for i in 0..10 {
            s.ingest(&frame("a", i + 1, 200, tone_i16(3000, 200.0))).unwrap();
            all.extend(s.maybe_classify(&params).unwrap());
        }
        // 30000 samples -> 4 complete groups; indices strictly increasing.
        assert_eq!(all.len(), 4);
        for (i, p) in all.iter().enumerate() {
            assert_eq!(p.group, i as u64);
        }
        // Calling classify again with no new data emits nothing.
        assert!(s.maybe_classify(&params).unwrap().is_empty());
    }
}
