//! The convolutional-recurrent network: seven 1-D convolution + max-pool
//! blocks, global average pooling, a 128-unit LSTM, and a softmax head.
//!
//! Everything runs in `f64` with hand-written forward and reverse passes, so
//! gradients can be checked sharply against finite differences. Parameters
//! live in plain vectors with a documented canonical order (conv blocks 1-7
//! as kernel then bias, LSTM as input/recurrent/bias, head as weights then
//! bias); the checkpoint format serializes exactly that order.

mod backward;
mod checkpoint;
mod forward;
#[cfg(test)]
mod tests;

pub use backward::model_backward;
pub use checkpoint::{CheckpointMeta, CheckpointMetrics, load_checkpoint, save_checkpoint};
pub use forward::{
    DropoutMasks, FeatureMap, ForwardTrace, Phase, SeqFeatures, conv_block_forward,
    global_avg_pool, lstm_forward, model_forward, softmax,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale or unusable trace: {0}")]
    StaleTrace(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
///
/// The default is the production configuration: window length 512, channel
/// progression 1 -> 8 -> 16 -> 32 -> 64 -> 128 -> 256 -> 512 over seven
/// blocks, 128 LSTM units, four classes. `shrunken` divides the widths down
/// for fast tests while keeping the same depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of each convolutional block.
    pub conv_channels: Vec<usize>,
    pub kernel_len: usize,
    pub lstm_units: usize,
    pub n_classes: usize,
    pub window_len: usize,
    /// Dropout rate on LSTM input and recurrent state (train mode only).
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_channels: vec![8, 16, 32, 64, 128, 256, 512],
            kernel_len: 5,
            lstm_units: 128,
            n_classes: 4,
            window_len: 512,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    /// Same depth, channel widths and LSTM size divided by `divisor`
    /// (rounding up, floor of one).
    pub fn shrunken(divisor: usize) -> ModelConfig {
        let base = ModelConfig::default();
        ModelConfig {
            conv_channels: base
                .conv_channels
                .iter()
                .map(|&c| (c / divisor).max(1))
                .collect(),
            lstm_units: (base.lstm_units / divisor).max(1),
            ..base
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.conv_channels.len()
    }

    /// Temporal length after all max-pool halvings.
    pub fn final_temporal_len(&self) -> usize {
        self.window_len >> self.n_blocks()
    }

    /// LSTM input width: channels of the last block.
    pub fn feature_dim(&self) -> usize {
        *self.conv_channels.last().expect("at least one block")
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.conv_channels.is_empty() || self.conv_channels.iter().any(|&c| c == 0) {
            return Err(NnError::ShapeMismatch("empty or zero conv channels".into()));
        }
        if self.window_len % (1 << self.n_blocks()) != 0 || self.final_temporal_len() == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "window length {} does not survive {} halvings",
                self.window_len,
                self.n_blocks()
            )));
        }
        if self.kernel_len % 2 == 0 || self.kernel_len == 0 {
            return Err(NnError::ShapeMismatch("kernel length must be odd".into()));
        }
        if self.lstm_units == 0 || self.n_classes == 0 {
            return Err(NnError::ShapeMismatch("zero-sized layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::ShapeMismatch(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One convolution block: `kernel_len x in x out` weights plus a bias per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_len: usize,
    /// Indexed `[tap][in][out]`, row-major.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvBlockParams {
    pub fn zeros(kernel_len: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvBlockParams {
            in_channels,
            out_channels,
            kernel_len,
            kernel: vec![0.0; kernel_len * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn k(&self, tap: usize, ci: usize, co: usize) -> f64 {
        self.kernel[(tap * self.in_channels + ci) * self.out_channels + co]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// LSTM weights with gate order (input, forget, cell, output); gate `g` of
/// unit `u` lives at column `g * units + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub units: usize,
    /// Indexed `[input][4 * units]`, row-major.
    pub w_input: Vec<f64>,
    /// Indexed `[unit][4 * units]`, row-major.
    pub w_recurrent: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, units: usize) -> Self {
        LstmParams {
            input_dim,
            units,
            w_input: vec![0.0; input_dim * 4 * units],
            w_recurrent: vec![0.0; units * 4 * units],
            bias: vec![0.0; 4 * units],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_input.len() + self.w_recurrent.len() + self.bias.len()
    }
}

/// Dense softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxParams {
    pub in_dim: usize,
    pub n_classes: usize,
    /// Indexed `[in][class]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxParams {
    pub fn zeros(in_dim: usize, n_classes: usize) -> Self {
        SoftmaxParams {
            in_dim,
            n_classes,
            weights: vec![0.0; in_dim * n_classes],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// All trainable weights. Gradients and optimizer moments reuse this type,
/// since they share the shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv: Vec<ConvBlockParams>,
    pub lstm: LstmParams,
    pub head: SoftmaxParams,
}

impl ModelParams {
    /// All-zero parameters for a configuration.
    pub fn zeros(config: &ModelConfig) -> Result<ModelParams, NnError> {
        config.validate()?;
        let mut conv = Vec::with_capacity(config.n_blocks());
        let mut cin = 1;
        for &cout in &config.conv_channels {
            conv.push(ConvBlockParams::zeros(config.kernel_len, cin, cout));
            cin = cout;
        }
        let lstm = LstmParams::zeros(config.feature_dim(), config.lstm_units);
        let head = SoftmaxParams::zeros(config.lstm_units, config.n_classes);
        Ok(ModelParams { config: config.clone(), conv, lstm, head })
    }

    /// Parameter tensors in canonical (checkpoint) order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for block in &self.conv {
            out.push(&block.kernel);
            out.push(&block.bias);
        }
        out.push(&self.lstm.w_input);
        out.push(&self.lstm.w_recurrent);
        out.push(&self.lstm.bias);
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for block in &mut self.conv {
            out.push(&mut block.kernel);
            out.push(&mut block.bias);
        }
        out.push(&mut self.lstm.w_input);
        out.push(&mut self.lstm.w_recurrent);
        out.push(&mut self.lstm.bias);
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    pub fn conv_param_count(&self) -> usize {
        self.conv.iter().map(|b| b.param_count()).sum()
    }

    pub fn lstm_param_count(&self) -> usize {
        self.lstm.param_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.param_count()
    }

    /// Reads the flat parameter vector at `index` (canonical order).
    pub fn flat_get(&self, index: usize) -> f64 {
        let mut i = index;
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("flat index {index} out of range");
    }

    /// Adds `delta` to the flat parameter vector at `index`.
    pub fn flat_add(&mut self, index: usize, delta: f64) {
        let mut i = index;
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] += delta;
                return;
            }
            i -= s.len();
        }
        panic!("flat index {index} out of range");
    }
}

/// Total trainable scalar count.
pub fn count_params(params: &ModelParams) -> usize {
    params.conv_param_count() + params.lstm_param_count() + params.head_param_count()
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform initialization; biases start at zero except the LSTM
/// forget-gate bias, which starts at one. Conv kernels use the
/// receptive-field fan convention `fan_in = k * Cin`, `fan_out = k * Cout`.
/// Deterministic in the seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, NnError> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |v: &mut [f64], limit: f64| {
        for w in v.iter_mut() {
            *w = rng.random_range(-limit..=limit);
        }
    };

    for block in &mut params.conv {
        let limit = glorot_limit(
            block.kernel_len * block.in_channels,
            block.kernel_len * block.out_channels,
        );
        fill(&mut block.kernel, limit);
    }
    let lstm_cols = 4 * params.lstm.units;
    let limit = glorot_limit(params.lstm.input_dim, lstm_cols);
    fill(&mut params.lstm.w_input, limit);
    let limit = glorot_limit(params.lstm.units, lstm_cols);
    fill(&mut params.lstm.w_recurrent, limit);
    let limit = glorot_limit(params.head.in_dim, params.head.n_classes);
    fill(&mut params.head.weights, limit);

    // Unit forget-gate bias (second gate block).
    let units = params.lstm.units;
    for b in &mut params.lstm.bias[units..2 * units] {
        *b = 1.0;
    }
    Ok(params)
}
