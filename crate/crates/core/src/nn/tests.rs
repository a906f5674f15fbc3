//! Forward/backward tests: shape conformance, hand oracles, and
//! finite-difference gradient checks.

use super::*;
use crate::pipeline::WindowTensor;
use crate::record_io::RhythmClass;
use crate::train::cross_entropy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor_from(values: Vec<f64>, nw: usize, window_len: usize, pad_count: usize) -> WindowTensor {
    WindowTensor { record_id: "t".into(), nw, window_len, pad_count, values }
}

fn random_tensor(cfg: &ModelConfig, nw: usize, pad: usize, seed: u64) -> WindowTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; nw * cfg.window_len];
    for v in values.iter_mut().skip(pad * cfg.window_len) {
        *v = rng.random_range(-1.0..1.0);
    }
    tensor_from(values, nw, cfg.window_len, pad)
}

#[test]
fn conv_block_identity_kernel_is_maxpool() {
    let mut p = ConvBlockParams::zeros(5, 1, 1);
    p.kernel[2] = 1.0; // centered tap
    let x = FeatureMap { nw: 1, len: 8, channels: 1, data: (0..8).map(|i| i as f64).collect() };
    let y = conv_block_forward(&x, &p).unwrap();
    assert_eq!(y.data, vec![1.0, 3.0, 5.0, 7.0]);
}

#[test]
fn conv_block_zero_input_zero_bias() {
    let p = ConvBlockParams::zeros(5, 2, 3);
    let x = FeatureMap::zeros(2, 16, 2);
    let y = conv_block_forward(&x, &p).unwrap();
    assert!(y.data.iter().all(|&v| v == 0.0));
}

/// Direct O(L*K) oracle: zero-padded convolution, bias, ReLU, width-2 max
/// pool, written independently of the production loops.
fn conv_oracle(x: &FeatureMap, p: &ConvBlockParams) -> FeatureMap {
    let half = p.kernel_len / 2;
    let mut out = FeatureMap::zeros(x.nw, x.len / 2, p.out_channels);
    for w in 0..x.nw {
        let mut act = vec![0.0; x.len * p.out_channels];
        for t in 0..x.len {
            for co in 0..p.out_channels {
                let mut acc = p.bias[co];
                for tap in 0..p.kernel_len {
                    let ti = t as i64 + tap as i64 - half as i64;
                    if ti >= 0 && (ti as usize) < x.len {
                        for ci in 0..p.in_channels {
                            acc += x.at(w, ti as usize, ci) * p.k(tap, ci, co);
                        }
                    }
                }
                act[t * p.out_channels + co] = acc.max(0.0);
            }
        }
        for t in 0..x.len / 2 {
            for co in 0..p.out_channels {
                let a = act[2 * t * p.out_channels + co];
                let b = act[(2 * t + 1) * p.out_channels + co];
                *out.at_mut(w, t, co) = a.max(b);
            }
        }
    }
    out
}

#[test]
fn conv_block_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (nw, len, cin, cout) in [(1, 8, 1, 1), (2, 16, 3, 5), (3, 32, 4, 2)] {
        let mut p = ConvBlockParams::zeros(5, cin, cout);
        for v in p.kernel.iter_mut().chain(p.bias.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = FeatureMap {
            nw,
            len,
            channels: cin,
            data: (0..nw * len * cin).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let got = conv_block_forward(&x, &p).unwrap();
        let want = conv_oracle(&x, &p);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data.iter().zip(want.data.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv_block_rejects_bad_shapes() {
    let p = ConvBlockParams::zeros(5, 2, 3);
    let x = FeatureMap::zeros(1, 8, 1);
    assert!(matches!(conv_block_forward(&x, &p), Err(NnError::ShapeMismatch(_))));
    let x = FeatureMap::zeros(1, 7, 2); // odd length
    assert!(matches!(conv_block_forward(&x, &p), Err(NnError::ShapeMismatch(_))));
}

#[test]
fn global_avg_pool_examples() {
    let x = FeatureMap { nw: 1, len: 4, channels: 1, data: vec![1.0, 2.0, 3.0, 4.0] };
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.data, vec![2.5]);

    let x = FeatureMap { nw: 2, len: 3, channels: 1, data: vec![7.0; 6] };
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.data, vec![7.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = FeatureMap {
        nw: 2,
        len: 4,
        channels: 3,
        data: (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let y = global_avg_pool(&x).unwrap();
    for w in 0..2 {
        for c in 0..3 {
            let sum: f64 = (0..4).map(|t| x.at(w, t, c)).sum();
            assert!((y.step(w)[c] - sum / 4.0).abs() < 1e-15);
        }
    }
}

#[test]
fn lstm_zero_params_zero_output() {
    let p = LstmParams::zeros(6, 4);
    let seq = SeqFeatures { nw: 3, dim: 6, data: (0..18).map(|i| i as f64).collect() };
    let h = lstm_forward(&seq, &p, None).unwrap();
    assert_eq!(h, vec![0.0; 4]);
}

/// One-step oracle: the gate equations written out directly.
fn lstm_one_step_oracle(x: &[f64], p: &LstmParams) -> Vec<f64> {
    let units = p.units;
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = vec![0.0; units];
    for u in 0..units {
        let mut pre = [0.0f64; 4];
        for (gate, pg) in pre.iter_mut().enumerate() {
            *pg = p.bias[gate * units + u];
            for (j, &xv) in x.iter().enumerate() {
                *pg += xv * p.w_input[j * 4 * units + gate * units + u];
            }
            // h_prev is zero, so the recurrent term vanishes.
        }
        let i = sigmoid(pre[0]);
        let f = sigmoid(pre[1]);
        let g = pre[2].tanh();
        let o = sigmoid(pre[3]);
        let c = f * 0.0 + i * g;
        h[u] = o * c.tanh();
    }
    h
}

#[test]
fn lstm_single_step_matches_gate_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = LstmParams::zeros(5, 3);
    for v in p
        .w_input
        .iter_mut()
        .chain(p.w_recurrent.iter_mut())
        .chain(p.bias.iter_mut())
    {
        *v = rng.random_range(-1.0..1.0);
    }
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let seq = SeqFeatures { nw: 1, dim: 5, data: x.clone() };
    let got = lstm_forward(&seq, &p, None).unwrap();
    let want = lstm_one_step_oracle(&x, &p);
    for (a, b) in got.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn lstm_consumes_prepended_zero_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = LstmParams::zeros(4, 3);
    for v in p
        .w_input
        .iter_mut()
        .chain(p.w_recurrent.iter_mut())
        .chain(p.bias.iter_mut())
    {
        *v = rng.random_range(-0.5..0.5);
    }
    let data: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let seq = SeqFeatures { nw: 2, dim: 4, data: data.clone() };
    let mut padded = vec![0.0; 4];
    padded.extend_from_slice(&data);
    let seq_padded = SeqFeatures { nw: 3, dim: 4, data: padded };
    let a = lstm_forward(&seq, &p, None).unwrap();
    let b = lstm_forward(&seq_padded, &p, None).unwrap();
    // Zero windows are processed, not skipped: the output must change.
    assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-12));
}

#[test]
fn model_forward_zero_params_uniform_probs() {
    let cfg = ModelConfig::shrunken(16);
    let params = ModelParams::zeros(&cfg).unwrap();
    let x = random_tensor(&cfg, 2, 0, 1);
    let (probs, _) = model_forward(&x, &params, Phase::Eval).unwrap();
    assert_eq!(probs, vec![0.25, 0.25, 0.25, 0.25]);
}

#[test]
fn model_forward_shapes_match_architecture_table() {
    let cfg = ModelConfig::default();
    let params = ModelParams::zeros(&cfg).unwrap();
    for nw in [1usize, 5, 22] {
        let x = random_tensor(&cfg, nw, 0, nw as u64);
        let (_, trace) = model_forward(&x, &params, Phase::Eval).unwrap();
        let expected = vec![
            (nw, 512, 1),
            (nw, 256, 8),
            (nw, 128, 16),
            (nw, 64, 32),
            (nw, 32, 64),
            (nw, 16, 128),
            (nw, 8, 256),
            (nw, 4, 512),
            (nw, 1, 512),
            (1, 1, 128),
            (1, 1, 4),
        ];
        assert_eq!(trace.shapes(), expected, "Nw = {nw}");
    }
}

#[test]
fn model_forward_eval_is_deterministic() {
    let cfg = ModelConfig::shrunken(8);
    let params = init_params(&cfg, 3).unwrap();
    let x = random_tensor(&cfg, 3, 1, 9);
    let (p1, _) = model_forward(&x, &params, Phase::Eval).unwrap();
    let (p2, _) = model_forward(&x, &params, Phase::Eval).unwrap();
    for (a, b) in p1.iter().zip(p2.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let sum: f64 = p1.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn model_forward_rejects_malformed_tensors() {
    let cfg = ModelConfig::shrunken(16);
    let params = ModelParams::zeros(&cfg).unwrap();
    // Nonzero values inside the padded region.
    let mut x = random_tensor(&cfg, 2, 1, 4);
    x.values[3] = 1.0;
    assert!(matches!(model_forward(&x, &params, Phase::Eval), Err(NnError::ShapeMismatch(_))));
    // pad_count not below nw.
    let x = tensor_from(vec![0.0; 512], 1, 512, 1);
    assert!(matches!(model_forward(&x, &params, Phase::Eval), Err(NnError::ShapeMismatch(_))));
}

#[test]
fn softmax_is_stable_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-100.0..100.0)).collect();
        let p = softmax(&logits);
        assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn backward_softmax_cross_entropy_identity() {
    // Zero parameters give uniform probabilities; the head-bias gradient is
    // then 0.25 - onehot(label).
    let cfg = ModelConfig::shrunken(16);
    let params = ModelParams::zeros(&cfg).unwrap();
    let x = random_tensor(&cfg, 2, 0, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, trace) = model_forward(&x, &params, Phase::Train(&mut rng)).unwrap();
    let grads = model_backward(&trace, RhythmClass::AtrialFibrillation, &params).unwrap();
    let expected = [0.25, -0.75, 0.25, 0.25];
    for (a, b) in grads.head.bias.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_confident_prediction_has_small_head_gradient() {
    let cfg = ModelConfig::shrunken(16);
    let mut params = ModelParams::zeros(&cfg).unwrap();
    params.head.bias = vec![40.0, 0.0, 0.0, 0.0]; // near-one-hot on class 0
    let x = random_tensor(&cfg, 1, 0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (probs, trace) = model_forward(&x, &params, Phase::Train(&mut rng)).unwrap();
    assert!(probs[0] > 1.0 - 1e-12);
    let grads = model_backward(&trace, RhythmClass::NormalRhythm, &params).unwrap();
    for g in &grads.head.bias {
        assert!(g.abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_eval_traces() {
    let cfg = ModelConfig::shrunken(16);
    let params = ModelParams::zeros(&cfg).unwrap();
    let x = random_tensor(&cfg, 1, 0, 3);
    let (_, trace) = model_forward(&x, &params, Phase::Eval).unwrap();
    assert!(matches!(
        model_backward(&trace, RhythmClass::Noise, &params),
        Err(NnError::StaleTrace(_))
    ));
}

/// Central-difference loss derivative at one flat coordinate.
fn fd_at(
    params: &ModelParams,
    x: &WindowTensor,
    label: RhythmClass,
    index: usize,
    h: f64,
    rng_seed: u64,
) -> f64 {
    let loss_at = |delta: f64| {
        let mut p = params.clone();
        p.flat_add(index, delta);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (probs, _) = model_forward(x, &p, Phase::Train(&mut rng)).unwrap();
        cross_entropy(&probs, label).unwrap()
    };
    (loss_at(h) - loss_at(-h)) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

#[test]
fn gradients_match_finite_differences_everywhere_on_tiny_model() {
    let mut cfg = ModelConfig::shrunken(16);
    cfg.dropout = 0.0;
    let params = init_params(&cfg, 1234).unwrap();
    let x = random_tensor(&cfg, 2, 0, 55);
    let label = RhythmClass::OtherRhythm;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (_, trace) = model_forward(&x, &params, Phase::Train(&mut rng)).unwrap();
    let analytic = model_backward(&trace, label, &params).unwrap();

    let n = count_params(&params);
    let mut worst = (0usize, 0.0f64);
    for idx in 0..n {
        let fd = fd_at(&params, &x, label, idx, 1e-5, 7);
        let an = analytic.flat_get(idx);
        let err = rel_err(fd, an);
        if err > worst.1 {
            worst = (idx, err);
        }
        assert!(err < 1e-4, "index {idx}: fd {fd} vs analytic {an} (rel {err})");
    }
    // Keep the worst case visible when debugging tolerance changes.
    eprintln!("worst relative error: {:?} at flat index {}", worst.1, worst.0);
}

#[test]
fn gradients_match_finite_differences_with_dropout_masks() {
    // Fixed RNG seed means every forward draws identical masks, so the
    // masked loss is a deterministic function and finite differences apply.
    // A perturbation can still step across a ReLU/max-pool tie, where the
    // loss is not differentiable; those few coordinates are detected with a
    // half-step probe and skipped rather than smoothed over.
    // No padded window here: an all-zero window puts pre-activations
    // exactly on the ReLU kink (biases initialize to zero), where the
    // ReLU'(0) = 0 convention and a central difference legitimately differ.
    let mut cfg = ModelConfig::shrunken(16);
    cfg.dropout = 0.5;
    let params = init_params(&cfg, 42).unwrap();
    let x = random_tensor(&cfg, 2, 0, 77);
    let label = RhythmClass::NormalRhythm;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (_, trace) = model_forward(&x, &params, Phase::Train(&mut rng)).unwrap();
    let analytic = model_backward(&trace, label, &params).unwrap();

    let n = count_params(&params);
    let mut check = ChaCha8Rng::seed_from_u64(3);
    let mut kinks = 0usize;
    let mut checked = 0usize;
    for _ in 0..200 {
        let idx = check.random_range(0..n);
        let fd = fd_at(&params, &x, label, idx, 1e-5, 13);
        let fd_half = fd_at(&params, &x, label, idx, 5e-6, 13);
        if rel_err(fd, fd_half) > 1e-5 {
            // The secant slope is not converging: a kink sits inside the
            // probe interval.
            kinks += 1;
            continue;
        }
        let an = analytic.flat_get(idx);
        assert!(rel_err(fd, an) < 1e-4, "index {idx}: fd {fd} vs analytic {an}");
        checked += 1;
    }
    assert!(checked >= 180, "only {checked} smooth coordinates ({kinks} kinks)");
}

#[test]
fn padded_windows_do_not_disturb_real_window_convolutions() {
    let cfg = ModelConfig::shrunken(8);
    let mut params = init_params(&cfg, 10).unwrap();
    // Nonzero biases make zero windows produce nonzero features; at a fresh
    // Glorot initialization (zero biases) an all-zero window maps to an
    // all-zero feature vector, which provably leaves the LSTM state at zero.
    let mut rng = ChaCha8Rng::seed_from_u64(87);
    for block in &mut params.conv {
        for b in &mut block.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let bare = random_tensor(&cfg, 2, 0, 31);
    let mut padded_values = vec![0.0; cfg.window_len];
    padded_values.extend_from_slice(&bare.values);
    let padded = tensor_from(padded_values, 3, cfg.window_len, 1);

    let (probs_bare, trace_bare) = model_forward(&bare, &params, Phase::Eval).unwrap();
    let (probs_padded, trace_padded) = model_forward(&padded, &params, Phase::Eval).unwrap();

    // Convolution arithmetic on the real windows is unchanged; only the
    // window axis offset moves.
    for b in 0..trace_bare.pooled.len() {
        let (fb, fp) = (&trace_bare.pooled[b], &trace_padded.pooled[b]);
        let per_window = fb.len * fb.channels;
        assert_eq!(&fp.data[per_window..], &fb.data[..]);
    }
    // The LSTM consumes the extra zero window, so record-level output moves.
    assert!(probs_bare.iter().zip(&probs_padded).any(|(a, b)| (a - b).abs() > 1e-15));
}

#[test]
fn equal_padding_means_equal_output_regardless_of_batch() {
    let cfg = ModelConfig::shrunken(8);
    let params = init_params(&cfg, 11).unwrap();
    let x = random_tensor(&cfg, 4, 2, 63);
    let (a, _) = model_forward(&x, &params, Phase::Eval).unwrap();
    let (b, _) = model_forward(&x.clone(), &params, Phase::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn relu_and_pool_subgradients_are_tie_consistent() {
    // The backward pass reads an inactive pre-activation only through the
    // pool-winner comparison and the ReLU mask, so moving it by less than
    // its margin to zero (and to the pool winner) must leave every gradient
    // bit unchanged.
    let mut cfg = ModelConfig::shrunken(16);
    cfg.dropout = 0.0;
    let params = init_params(&cfg, 21).unwrap();
    let x = random_tensor(&cfg, 1, 0, 91);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, trace) = model_forward(&x, &params, Phase::Train(&mut rng)).unwrap();
    let g1 = model_backward(&trace, RhythmClass::Noise, &params).unwrap();

    // A strictly negative pre-activation losing its pool pair to an active
    // first element: nudging it halfway to zero flips nothing.
    let b0 = &trace.pre[0];
    let mut pos = None;
    for t in 0..b0.len / 2 {
        for c in 0..b0.channels {
            if b0.at(0, 2 * t + 1, c) < -1e-3 && b0.at(0, 2 * t, c) > 0.0 {
                pos = Some((2 * t + 1, c));
            }
        }
    }
    let (t, c) = pos.expect("some strictly inactive pool loser exists");
    let mut trace2 = trace.clone();
    let v = trace2.pre[0].at(0, t, c);
    *trace2.pre[0].at_mut(0, t, c) = v * 0.5;
    let g2 = model_backward(&trace2, RhythmClass::Noise, &params).unwrap();

    for (s1, s2) in g1.slices().iter().zip(g2.slices().iter()) {
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
