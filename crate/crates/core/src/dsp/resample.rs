//! Polyphase windowed-sinc sample-rate conversion.
//!
//! A Kaiser-windowed (beta = 8) sinc prototype is tabulated at a fine phase
//! resolution; each output sample interpolates linearly between the two
//! nearest phase rows. The low-pass cutoff tracks the lower of the two
//! Nyquist rates, so downsampling is anti-aliased.

use super::DspError;

/// FIR taps per polyphase row.
const TAPS: usize = 64;
/// Tabulated phases per input-sample step.
const PHASES: usize = 128;
/// Kaiser window shape parameter.
const BETA: f64 = 8.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (series expansion).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = x * x / 4.0;
    for k in 1..=30 {
        term *= half_sq / (k * k) as f64;
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

/// Kaiser window of the prototype length; cutoff-independent, so it is
/// computed once. Augmentation stretches rebuild the sinc part per call.
fn kaiser_window() -> &'static [f64] {
    use std::sync::OnceLock;
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        let len = TAPS * PHASES + 1;
        let center = (TAPS * PHASES / 2) as f64;
        let i0_beta = bessel_i0(BETA);
        (0..len)
            .map(|m| {
                let u = (m as f64 - center) / center; // -1 ..= 1
                bessel_i0(BETA * (1.0 - u * u).max(0.0).sqrt()) / i0_beta
            })
            .collect()
    })
}

/// Windowed-sinc prototype: `TAPS * PHASES + 1` coefficients with cutoff at
/// `cutoff` (as a fraction of the input Nyquist frequency).
fn prototype(cutoff: f64) -> Vec<f64> {
    let len = TAPS * PHASES + 1;
    let center = (TAPS * PHASES / 2) as f64;
    let window = kaiser_window();
    (0..len)
        .map(|m| {
            let t = (m as f64 - center) / PHASES as f64;
            cutoff * sinc(cutoff * t) * window[m]
        })
        .collect()
}

/// Mirror (even) reflection for out-of-range sample indices.
fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Resamples `x` from `fs_in` to `fs_out` Hz.
///
/// The output holds `round(len * fs_out / fs_in)` samples. Equal rates
/// return the input unchanged.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>, DspError> {
    if !(fs_in > 0.0) || !(fs_out > 0.0) || !fs_in.is_finite() || !fs_out.is_finite() {
        return Err(DspError::BadRate(format!("fs_in {fs_in}, fs_out {fs_out}")));
    }
    if x.len() < 2 {
        return Err(DspError::SignalTooShort { len: x.len(), min: 2 });
    }
    if fs_in == fs_out {
        return Ok(x.to_vec());
    }

    let ratio = fs_out / fs_in;
    let out_len = ((x.len() as f64) * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let table = prototype(cutoff);

    let n = x.len() as i64;
    let mut out = Vec::with_capacity(out_len.max(1));
    for m in 0..out_len.max(1) {
        let pos = m as f64 / ratio;
        let i = pos.floor() as i64;
        let frac = pos - pos.floor();
        let u = frac * PHASES as f64;
        let iu = u.floor() as usize;
        let w = u - iu as f64;
        let start = i - (TAPS as i64) / 2 + 1;
        let mut acc = 0.0;
        for k in 0..TAPS {
            let base = PHASES * (k + 1) - iu;
            let coeff = table[base] * (1.0 - w) + table[base - 1] * w;
            acc += coeff * x[reflect(start + k as i64, n)];
        }
        out.push(acc);
    }
    Ok(out)
}
