//! Reverse-mode gradients of the cross-entropy loss through the softmax
//! head, the LSTM (backpropagation through time), global average pooling,
//! and the convolution blocks.
//!
//! Conventions: the ReLU derivative at exactly zero is zero, and max-pool
//! ties route their gradient to the first maximal element. Both match the
//! forward pass's pooling choice, so perturbing a strictly inactive unit
//! below the tie margin never changes the backward output.

use super::forward::{FeatureMap, ForwardTrace};
use super::{ModelParams, NnError};
use crate::record_io::RhythmClass;

/// Gradient of `-log p[label]` with respect to every trainable scalar.
///
/// The trace must come from a train-mode forward pass over the same
/// parameter shapes; anything else is reported as a stale trace.
pub fn model_backward(
    trace: &ForwardTrace,
    label: RhythmClass,
    params: &ModelParams,
) -> Result<ModelParams, NnError> {
    if !trace.train_mode {
        return Err(NnError::StaleTrace("trace came from an eval-mode forward".into()));
    }
    if trace.pre.len() != params.conv.len()
        || trace.gap.dim != params.lstm.input_dim
        || trace.lstm.units != params.lstm.units
        || trace.h_final.len() != params.lstm.units
        || trace.probs.len() != params.head.n_classes
        || trace.input.len != params.config.window_len
    {
        return Err(NnError::StaleTrace(
            "trace shapes do not match the parameter set".into(),
        ));
    }

    let mut grads = ModelParams::zeros(&params.config)?;

    // Softmax + cross-entropy: dL/dlogits = probs - onehot.
    let mut dlogits = trace.probs.clone();
    dlogits[label.index()] -= 1.0;

    let head = &params.head;
    let mut dh = vec![0.0f64; head.in_dim];
    for (j, &hv) in trace.h_final.iter().enumerate() {
        let wrow = &head.weights[j * head.n_classes..(j + 1) * head.n_classes];
        let grow = &mut grads.head.weights[j * head.n_classes..(j + 1) * head.n_classes];
        let mut acc = 0.0;
        for (k, &dz) in dlogits.iter().enumerate() {
            grow[k] += hv * dz;
            acc += wrow[k] * dz;
        }
        dh[j] = acc;
    }
    grads.head.bias.copy_from_slice(&dlogits);

    // LSTM backpropagation through time.
    let lstm = &params.lstm;
    let t_lstm = &trace.lstm;
    let units = lstm.units;
    let cols = 4 * units;
    let steps = t_lstm.steps;
    let masks = &trace.masks;

    let mut dgap = vec![0.0f64; steps * lstm.input_dim];
    let mut dh_next = dh;
    let mut dc_next = vec![0.0f64; units];
    let mut dpre = vec![0.0f64; cols];
    for t in (0..steps).rev() {
        let base = t * units;
        for u in 0..units {
            let i = t_lstm.i[base + u];
            let f = t_lstm.f[base + u];
            let g = t_lstm.g[base + u];
            let o = t_lstm.o[base + u];
            let tc = t_lstm.tanh_c[base + u];
            let c_prev = if t > 0 { t_lstm.c[base - units + u] } else { 0.0 };

            let dh_u = dh_next[u];
            let d_o = dh_u * tc;
            let dc = dc_next[u] + dh_u * o * (1.0 - tc * tc);
            let d_i = dc * g;
            let d_f = dc * c_prev;
            let d_g = dc * i;

            dpre[u] = d_i * i * (1.0 - i);
            dpre[units + u] = d_f * f * (1.0 - f);
            dpre[2 * units + u] = d_g * (1.0 - g * g);
            dpre[3 * units + u] = d_o * o * (1.0 - o);
            dc_next[u] = dc * f;
        }

        for (k, &d) in dpre.iter().enumerate() {
            grads.lstm.bias[k] += d;
        }

        let x = trace.gap.step(t);
        let dx = &mut dgap[t * lstm.input_dim..(t + 1) * lstm.input_dim];
        for (j, (&xv, &m)) in x.iter().zip(masks.input.iter()).enumerate() {
            let xm = xv * m;
            let wrow = &lstm.w_input[j * cols..(j + 1) * cols];
            let grow = &mut grads.lstm.w_input[j * cols..(j + 1) * cols];
            let mut acc = 0.0;
            for (k, &d) in dpre.iter().enumerate() {
                grow[k] += xm * d;
                acc += wrow[k] * d;
            }
            dx[j] = acc * m;
        }

        for u in 0..units {
            let h_prev = if t > 0 { t_lstm.h[base - units + u] } else { 0.0 };
            let m = masks.recurrent[u];
            let hm = h_prev * m;
            let wrow = &lstm.w_recurrent[u * cols..(u + 1) * cols];
            let grow = &mut grads.lstm.w_recurrent[u * cols..(u + 1) * cols];
            let mut acc = 0.0;
            for (k, &d) in dpre.iter().enumerate() {
                grow[k] += hm * d;
                acc += wrow[k] * d;
            }
            dh_next[u] = acc * m;
        }
    }

    // Global average pooling spreads each feature gradient evenly over the
    // temporal axis of the last block's output.
    let last = trace.pooled.last().expect("blocks present");
    let mut dpooled = FeatureMap::zeros(last.nw, last.len, last.channels);
    let inv = 1.0 / last.len as f64;
    for w in 0..last.nw {
        let dg = &dgap[w * last.channels..(w + 1) * last.channels];
        for t in 0..last.len {
            let row =
                &mut dpooled.data[(w * last.len + t) * last.channels..(w * last.len + t + 1) * last.channels];
            for (o, &d) in row.iter_mut().zip(dg.iter()) {
                *o = d * inv;
            }
        }
    }

    // Convolution blocks, last to first.
    for b in (0..params.conv.len()).rev() {
        let block = &params.conv[b];
        let input = if b == 0 { &trace.input } else { &trace.pooled[b - 1] };
        let pre = &trace.pre[b];
        let (nw, len, cin, cout) = (pre.nw, pre.len, block.in_channels, block.out_channels);
        let half = block.kernel_len / 2;

        // Un-pool and apply the ReLU mask in one step.
        let mut dpre = FeatureMap::zeros(nw, len, cout);
        for w in 0..nw {
            for t in 0..len / 2 {
                for c in 0..cout {
                    let p0 = pre.at(w, 2 * t, c);
                    let p1 = pre.at(w, 2 * t + 1, c);
                    let (chosen_t, chosen_p) =
                        if p0.max(0.0) >= p1.max(0.0) { (2 * t, p0) } else { (2 * t + 1, p1) };
                    if chosen_p > 0.0 {
                        *dpre.at_mut(w, chosen_t, c) = dpooled.at(w, t, c);
                    }
                }
            }
        }

        let need_dinput = b > 0;
        let mut dinput = FeatureMap::zeros(input.nw, input.len, input.channels);
        for w in 0..nw {
            for t in 0..len {
                let drow = &dpre.data[(w * len + t) * cout..(w * len + t + 1) * cout];
                if drow.iter().all(|&d| d == 0.0) {
                    continue;
                }
                for (co, &d) in drow.iter().enumerate() {
                    grads.conv[b].bias[co] += d;
                }
                let lo = t.saturating_sub(half);
                let hi = (t + half).min(len - 1);
                for ti in lo..=hi {
                    let tap = ti + half - t;
                    let xrow = &input.data[(w * len + ti) * cin..(w * len + ti + 1) * cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let krow =
                            &block.kernel[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                        let grow = &mut grads.conv[b].kernel
                            [(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                        let mut acc = 0.0;
                        for (co, &d) in drow.iter().enumerate() {
                            grow[co] += xv * d;
                            acc += krow[co] * d;
                        }
                        if need_dinput {
                            dinput.data[(w * len + ti) * cin + ci] += acc;
                        }
                    }
                }
            }
        }
        dpooled = dinput;
    }

    Ok(grads)
}
