//! Forward pass: convolution blocks, global average pooling, LSTM, softmax.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ConvBlockParams, LstmParams, ModelParams, NnError};
use crate::pipeline::WindowTensor;

/// A `nw x len x channels` activation tensor, row-major with channels
/// innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub nw: usize,
    pub len: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(nw: usize, len: usize, channels: usize) -> FeatureMap {
        FeatureMap { nw, len, channels, data: vec![0.0; nw * len * channels] }
    }

    #[inline]
    pub fn at(&self, w: usize, t: usize, c: usize) -> f64 {
        self.data[(w * self.len + t) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, w: usize, t: usize, c: usize) -> &mut f64 {
        &mut self.data[(w * self.len + t) * self.channels + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nw, self.len, self.channels)
    }
}

/// A `nw x dim` sequence of feature vectors (one per window).
#[derive(Debug, Clone, PartialEq)]
pub struct SeqFeatures {
    pub nw: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SeqFeatures {
    pub fn step(&self, w: usize) -> &[f64] {
        &self.data[w * self.dim..(w + 1) * self.dim]
    }
}

/// Train-mode forward passes carry an RNG for the dropout masks; eval mode
/// is deterministic.
pub enum Phase<'r> {
    Train(&'r mut ChaCha8Rng),
    Eval,
}

/// Inverted-dropout masks, drawn once per sequence and reused at every
/// timestep (variational style). Entries are 0 or `1 / keep`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub input: Vec<f64>,
    pub recurrent: Vec<f64>,
}

impl DropoutMasks {
    fn ones(input_dim: usize, units: usize) -> DropoutMasks {
        DropoutMasks { input: vec![1.0; input_dim], recurrent: vec![1.0; units] }
    }

    fn draw(input_dim: usize, units: usize, rate: f64, rng: &mut ChaCha8Rng) -> DropoutMasks {
        let keep = 1.0 - rate;
        let mut draw_one = |_: usize| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 };
        DropoutMasks {
            input: (0..input_dim).map(&mut draw_one).collect(),
            recurrent: (0..units).map(&mut draw_one).collect(),
        }
    }
}

/// Convolution with zero padding (same length), bias, ReLU, then max pool of
/// width two. Returns the pre-activation map alongside the pooled output;
/// the backward pass needs both.
pub(crate) fn conv_block_forward_full(
    x: &FeatureMap,
    p: &ConvBlockParams,
) -> Result<(FeatureMap, FeatureMap), NnError> {
    if x.channels != p.in_channels {
        return Err(NnError::ShapeMismatch(format!(
            "conv block expects {} input channels, got {}",
            p.in_channels, x.channels
        )));
    }
    if x.len < 2 || x.len % 2 != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "conv block needs an even temporal length >= 2, got {}",
            x.len
        )));
    }
    let half = p.kernel_len / 2;
    let (nw, len, cin, cout) = (x.nw, x.len, p.in_channels, p.out_channels);
    let mut pre = FeatureMap::zeros(nw, len, cout);
    let mut acc = vec![0.0f64; cout];
    for w in 0..nw {
        for t in 0..len {
            acc.copy_from_slice(&p.bias);
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(len - 1);
            for ti in lo..=hi {
                let tap = ti + half - t;
                let xrow = &x.data[(w * len + ti) * cin..(w * len + ti + 1) * cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv != 0.0 {
                        let krow = &p.kernel[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                        for (co, &kv) in krow.iter().enumerate() {
                            acc[co] += xv * kv;
                        }
                    }
                }
            }
            pre.data[(w * len + t) * cout..(w * len + t + 1) * cout].copy_from_slice(&acc);
        }
    }

    // ReLU then max pool (width 2, stride 2); ties go to the first element.
    let out_len = len / 2;
    let mut pooled = FeatureMap::zeros(nw, out_len, cout);
    for w in 0..nw {
        for t in 0..out_len {
            for c in 0..cout {
                let a0 = pre.at(w, 2 * t, c).max(0.0);
                let a1 = pre.at(w, 2 * t + 1, c).max(0.0);
                *pooled.at_mut(w, t, c) = if a0 >= a1 { a0 } else { a1 };
            }
        }
    }
    Ok((pre, pooled))
}

/// Public single-block forward: pooled output only.
pub fn conv_block_forward(x: &FeatureMap, p: &ConvBlockParams) -> Result<FeatureMap, NnError> {
    conv_block_forward_full(x, p).map(|(_, pooled)| pooled)
}

/// Mean over the temporal axis per channel: `nw x len x c` -> `nw x c`.
pub fn global_avg_pool(x: &FeatureMap) -> Result<SeqFeatures, NnError> {
    if x.len == 0 {
        return Err(NnError::ShapeMismatch("empty temporal axis".into()));
    }
    let mut data = vec![0.0; x.nw * x.channels];
    for w in 0..x.nw {
        for t in 0..x.len {
            let row = &x.data[(w * x.len + t) * x.channels..(w * x.len + t + 1) * x.channels];
            let out = &mut data[w * x.channels..(w + 1) * x.channels];
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
    }
    let inv = 1.0 / x.len as f64;
    for v in data.iter_mut() {
        *v *= inv;
    }
    Ok(SeqFeatures { nw: x.nw, dim: x.channels, data })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step LSTM activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) struct LstmTrace {
    pub steps: usize,
    pub units: usize,
    /// Gate activations per step, each `steps * units`.
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn lstm_forward_full(
    seq: &SeqFeatures,
    p: &LstmParams,
    masks: &DropoutMasks,
) -> Result<(Vec<f64>, LstmTrace), NnError> {
    if seq.dim != p.input_dim {
        return Err(NnError::ShapeMismatch(format!(
            "LSTM expects input dim {}, got {}",
            p.input_dim, seq.dim
        )));
    }
    if seq.nw == 0 {
        return Err(NnError::ShapeMismatch("LSTM needs at least one timestep".into()));
    }
    if masks.input.len() != p.input_dim || masks.recurrent.len() != p.units {
        return Err(NnError::ShapeMismatch("dropout mask shape".into()));
    }
    let units = p.units;
    let cols = 4 * units;
    let steps = seq.nw;
    let mut trace = LstmTrace {
        steps,
        units,
        i: vec![0.0; steps * units],
        f: vec![0.0; steps * units],
        g: vec![0.0; steps * units],
        o: vec![0.0; steps * units],
        c: vec![0.0; steps * units],
        tanh_c: vec![0.0; steps * units],
        h: vec![0.0; steps * units],
    };

    let mut h_prev = vec![0.0f64; units];
    let mut c_prev = vec![0.0f64; units];
    let mut pre = vec![0.0f64; cols];
    for t in 0..steps {
        pre.copy_from_slice(&p.bias);
        let x = seq.step(t);
        for (j, (&xv, &m)) in x.iter().zip(masks.input.iter()).enumerate() {
            let xm = xv * m;
            if xm != 0.0 {
                let row = &p.w_input[j * cols..(j + 1) * cols];
                for (k, &wv) in row.iter().enumerate() {
                    pre[k] += xm * wv;
                }
            }
        }
        for (j, (&hv, &m)) in h_prev.iter().zip(masks.recurrent.iter()).enumerate() {
            let hm = hv * m;
            if hm != 0.0 {
                let row = &p.w_recurrent[j * cols..(j + 1) * cols];
                for (k, &wv) in row.iter().enumerate() {
                    pre[k] += hm * wv;
                }
            }
        }
        let base = t * units;
        for u in 0..units {
            let iv = sigmoid(pre[u]);
            let fv = sigmoid(pre[units + u]);
            let gv = pre[2 * units + u].tanh();
            let ov = sigmoid(pre[3 * units + u]);
            let cv = fv * c_prev[u] + iv * gv;
            let tc = cv.tanh();
            let hv = ov * tc;
            trace.i[base + u] = iv;
            trace.f[base + u] = fv;
            trace.g[base + u] = gv;
            trace.o[base + u] = ov;
            trace.c[base + u] = cv;
            trace.tanh_c[base + u] = tc;
            trace.h[base + u] = hv;
            c_prev[u] = cv;
            h_prev[u] = hv;
        }
    }
    Ok((h_prev, trace))
}

/// LSTM over the window sequence; zero initial states, final hidden state
/// returned. `masks` of `None` means no dropout (eval mode).
pub fn lstm_forward(
    seq: &SeqFeatures,
    p: &LstmParams,
    masks: Option<&DropoutMasks>,
) -> Result<Vec<f64>, NnError> {
    let ones;
    let masks = match masks {
        Some(m) => m,
        None => {
            ones = DropoutMasks::ones(p.input_dim, p.units);
            &ones
        }
    };
    lstm_forward_full(seq, p, masks).map(|(h, _)| h)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) train_mode: bool,
    /// The raw input windows (block 1 input).
    pub(crate) input: FeatureMap,
    /// Pre-activation (pre-ReLU, pre-pool) map of each block.
    pub(crate) pre: Vec<FeatureMap>,
    /// Pooled output of each block; the last one feeds global pooling.
    pub(crate) pooled: Vec<FeatureMap>,
    pub(crate) gap: SeqFeatures,
    pub(crate) masks: DropoutMasks,
    pub(crate) lstm: LstmTrace,
    pub(crate) h_final: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    /// Layer output shapes as `(windows, samples, channels)` rows: input,
    /// each conv block, global pooling, LSTM, softmax (the last three with
    /// collapsed axes set to 1).
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut rows = vec![self.input.shape()];
        rows.extend(self.pooled.iter().map(|p| p.shape()));
        rows.push((self.gap.nw, 1, self.gap.dim));
        rows.push((1, 1, self.h_final.len()));
        rows.push((1, 1, self.probs.len()));
        rows
    }
}

/// Full network forward pass on one record's window tensor.
///
/// Returns class probabilities (summing to one) plus the trace for
/// [`super::model_backward`]. Eval mode applies no dropout and is
/// deterministic; padded all-zero windows are processed like any other
/// timestep.
pub fn model_forward(
    x: &WindowTensor,
    params: &ModelParams,
    phase: Phase<'_>,
) -> Result<(Vec<f64>, ForwardTrace), NnError> {
    let cfg = &params.config;
    if x.window_len != cfg.window_len {
        return Err(NnError::ShapeMismatch(format!(
            "window length {} != configured {}",
            x.window_len, cfg.window_len
        )));
    }
    if x.nw == 0 || x.values.len() != x.nw * x.window_len || x.pad_count >= x.nw {
        return Err(NnError::ShapeMismatch(format!(
            "malformed window tensor: nw {}, pad {}, values {}",
            x.nw,
            x.pad_count,
            x.values.len()
        )));
    }
    if x.values[..x.pad_count * x.window_len].iter().any(|&v| v != 0.0) {
        return Err(NnError::ShapeMismatch("padded windows must be exactly zero".into()));
    }

    let input = FeatureMap {
        nw: x.nw,
        len: x.window_len,
        channels: 1,
        data: x.values.clone(),
    };

    let mut pre = Vec::with_capacity(cfg.n_blocks());
    let mut pooled: Vec<FeatureMap> = Vec::with_capacity(cfg.n_blocks());
    for (b, block) in params.conv.iter().enumerate() {
        let src = if b == 0 { &input } else { &pooled[b - 1] };
        let (p, y) = conv_block_forward_full(src, block)?;
        pre.push(p);
        pooled.push(y);
    }

    let gap = global_avg_pool(pooled.last().expect("at least one block"))?;

    let (train_mode, masks) = match phase {
        Phase::Train(rng) if cfg.dropout > 0.0 => (
            true,
            DropoutMasks::draw(params.lstm.input_dim, params.lstm.units, cfg.dropout, rng),
        ),
        Phase::Train(_) => (true, DropoutMasks::ones(params.lstm.input_dim, params.lstm.units)),
        Phase::Eval => (false, DropoutMasks::ones(params.lstm.input_dim, params.lstm.units)),
    };

    let (h_final, lstm) = lstm_forward_full(&gap, &params.lstm, &masks)?;

    let head = &params.head;
    let mut logits = head.bias.clone();
    for (j, &hv) in h_final.iter().enumerate() {
        let row = &head.weights[j * head.n_classes..(j + 1) * head.n_classes];
        for (k, &wv) in row.iter().enumerate() {
            logits[k] += hv * wv;
        }
    }
    let probs = softmax(&logits);

    let trace = ForwardTrace {
        train_mode,
        input,
        pre,
        pooled,
        gap,
        masks,
        lstm,
        h_final,
        logits: logits.clone(),
        probs: probs.clone(),
    };
    Ok((probs, trace))
}
