//! Turns preprocessed records into augmented, windowed, zero-padded batches.
//!
//! Records are cut into 512-sample windows with 50% overlap. During training
//! each record may be sign-flipped, stretched by up to +/-5%, and windowed
//! from a random offset; records are then sorted by duration and grouped so
//! that zero-padding inside a batch stays small. All randomness is derived
//! from a run seed plus the epoch and record indices, so batch construction
//! is reproducible regardless of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp;
use crate::record_io::RhythmClass;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("signal of {len} samples is shorter than the minimum {min}")]
    TooShort { len: usize, min: usize },
    #[error("offset {offset} with {nw} windows overruns {len} samples")]
    BadOffset { offset: usize, nw: usize, len: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// Sliding-window geometry: 512-sample windows, stride 256 (50% overlap).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub window_len: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { window_len: 512, stride: 256 }
    }
}

impl WindowConfig {
    fn validate(&self) -> Result<(), PipelineError> {
        if self.stride == 0 || self.stride > self.window_len {
            return Err(PipelineError::BadConfig(format!(
                "need 0 < stride ({}) <= window_len ({})",
                self.stride, self.window_len
            )));
        }
        Ok(())
    }
}

/// Training-time augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    /// Probability of negating the signal.
    pub flip_prob: f64,
    /// Probability of stretching the signal.
    pub resample_prob: f64,
    /// Length-change interval, e.g. [-0.05, 0.05].
    pub stretch_min: f64,
    pub stretch_max: f64,
    pub enabled: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_prob: 0.5,
            resample_prob: 0.8,
            stretch_min: -0.05,
            stretch_max: 0.05,
            enabled: true,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig { enabled: false, ..Default::default() }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=1.0).contains(&self.resample_prob)
            && self.stretch_min > -1.0
            && self.stretch_max < 1.0
            && self.stretch_min <= self.stretch_max;
        if ok {
            Ok(())
        } else {
            Err(PipelineError::BadConfig(format!("{self:?}")))
        }
    }
}

/// A record's sliding windows: `nw x window_len x 1` values, with
/// `pad_count` leading all-zero windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTensor {
    pub record_id: String,
    pub nw: usize,
    pub window_len: usize,
    pub pad_count: usize,
    /// Row-major `nw * window_len` values (single channel).
    pub values: Vec<f64>,
}

impl WindowTensor {
    pub fn window(&self, k: usize) -> &[f64] {
        &self.values[k * self.window_len..(k + 1) * self.window_len]
    }
}

/// Tensors sharing one window count, plus their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tensors: Vec<WindowTensor>,
    pub labels: Vec<RhythmClass>,
}

/// One preprocessed record ready for batching.
#[derive(Debug, Clone)]
pub struct LabeledSignal {
    pub id: String,
    pub samples: Vec<f64>,
    pub label: RhythmClass,
}

/// Batches plus the records that had to be skipped.
#[derive(Debug)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub skipped: Vec<(String, PipelineError)>,
}

/// Maximum number of windows in a signal of `n` samples:
/// `floor((n - window_len) / stride) + 1`.
pub fn max_windows(n: usize, cfg: &WindowConfig) -> Result<usize, PipelineError> {
    cfg.validate()?;
    if n < cfg.window_len {
        return Err(PipelineError::TooShort { len: n, min: cfg.window_len });
    }
    Ok((n - cfg.window_len) / cfg.stride + 1)
}

/// Largest valid start offset for the first of `nw` windows.
pub fn max_offset(n: usize, nw: usize, cfg: &WindowConfig) -> usize {
    n - (nw - 1) * cfg.stride - cfg.window_len
}

/// Draws the first-window offset uniformly from
/// `{0, 1, ..., n - (nw - 1) * stride - window_len}`.
pub fn sample_offset(n: usize, nw: usize, cfg: &WindowConfig, rng: &mut impl Rng) -> usize {
    rng.random_range(0..=max_offset(n, nw, cfg))
}

/// Slices out the maximum number of windows starting at `offset`.
pub fn extract_windows(
    id: &str,
    x: &[f64],
    offset: usize,
    cfg: &WindowConfig,
) -> Result<WindowTensor, PipelineError> {
    let nw = max_windows(x.len(), cfg)?;
    let span = offset + (nw - 1) * cfg.stride + cfg.window_len;
    if span > x.len() {
        return Err(PipelineError::BadOffset { offset, nw, len: x.len() });
    }
    let mut values = Vec::with_capacity(nw * cfg.window_len);
    for k in 0..nw {
        let start = offset + k * cfg.stride;
        values.extend_from_slice(&x[start..start + cfg.window_len]);
    }
    Ok(WindowTensor {
        record_id: id.to_string(),
        nw,
        window_len: cfg.window_len,
        pad_count: 0,
        values,
    })
}

/// Applies stretch-then-flip augmentation.
///
/// With probability `resample_prob` the signal length is rescaled by a
/// factor `1 + u`, `u` uniform over the stretch interval; independently,
/// with probability `flip_prob` the sign is flipped. Disabled configurations
/// return the input unchanged.
pub fn augment(
    x: &[f64],
    cfg: &AugmentationConfig,
    wcfg: &WindowConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, PipelineError> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(x.to_vec());
    }
    // Worst-case shrink must still leave one full window.
    let min = (wcfg.window_len as f64 / (1.0 + cfg.stretch_min)).ceil() as usize;
    if x.len() < min {
        return Err(PipelineError::TooShort { len: x.len(), min });
    }

    let mut out = if cfg.resample_prob > 0.0 && rng.random_bool(cfg.resample_prob) {
        let u = rng.random_range(cfg.stretch_min..=cfg.stretch_max);
        dsp::resample(x, 1.0, 1.0 + u).expect("stretch factor is positive and input len >= 2")
    } else {
        x.to_vec()
    };
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        for v in out.iter_mut() {
            *v = -*v;
        }
    }
    Ok(out)
}

/// Derives an independent RNG stream from a run seed and a list of indices
/// (epoch, record, purpose, ...). SplitMix64-style mixing keeps streams
/// decorrelated while staying reproducible under any parallel schedule.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    let mut state = mix(seed ^ 0x9e3779b97f4a7c15);
    for &p in parts {
        state = mix(state.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        state = mix(state.wrapping_add(i as u64 + 1));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Builds duration-sorted, zero-padded batches for one epoch.
///
/// Each record is augmented (when enabled) and windowed from a random offset
/// with its own derived RNG stream; evaluation passes (augmentation
/// disabled) always use offset zero. Records are sorted by length, grouped
/// into runs of `batch_size` (the remainder forms a short batch), and padded
/// by prepending all-zero windows up to the batch maximum window count.
/// Records too short to window are skipped and reported.
pub fn make_batches(
    records: &[LabeledSignal],
    batch_size: usize,
    aug: &AugmentationConfig,
    wcfg: &WindowConfig,
    seed: u64,
    epoch: u64,
) -> Result<BatchPlan, PipelineError> {
    if batch_size == 0 {
        return Err(PipelineError::BadConfig("batch_size must be >= 1".into()));
    }
    wcfg.validate()?;
    aug.validate()?;

    struct Prepared {
        index: usize,
        samples: Vec<f64>,
        nw: usize,
        offset: usize,
        label: RhythmClass,
        id: String,
    }

    let mut prepared: Vec<Prepared> = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let mut rng = derive_rng(seed, &[epoch, i as u64]);
        let samples = if aug.enabled {
            match augment(&rec.samples, aug, wcfg, &mut rng) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("skipping record {}: {e}", rec.id);
                    skipped.push((rec.id.clone(), e));
                    continue;
                }
            }
        } else {
            rec.samples.clone()
        };
        let nw = match max_windows(samples.len(), wcfg) {
            Ok(nw) => nw,
            Err(e) => {
                log::warn!("skipping record {}: {e}", rec.id);
                skipped.push((rec.id.clone(), e));
                continue;
            }
        };
        let offset = if aug.enabled { sample_offset(samples.len(), nw, wcfg, &mut rng) } else { 0 };
        prepared.push(Prepared {
            index: i,
            samples,
            nw,
            offset,
            label: rec.label,
            id: rec.id.clone(),
        });
    }

    prepared.sort_by_key(|p| (p.samples.len(), p.index));

    let mut batches = Vec::new();
    for group in prepared.chunks(batch_size) {
        let batch_nw = group.iter().map(|p| p.nw).max().unwrap();
        let mut tensors = Vec::with_capacity(group.len());
        let mut labels = Vec::with_capacity(group.len());
        for p in group {
            let mut t = extract_windows(&p.id, &p.samples, p.offset, wcfg)?;
            let pad = batch_nw - t.nw;
            if pad > 0 {
                let mut values = vec![0.0; pad * wcfg.window_len];
                values.extend_from_slice(&t.values);
                t.values = values;
                t.nw = batch_nw;
                t.pad_count = pad;
            }
            tensors.push(t);
            labels.push(p.label);
        }
        batches.push(Batch { tensors, labels });
    }
    Ok(BatchPlan { batches, skipped })
}
