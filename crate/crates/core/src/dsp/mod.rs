//! Signal preprocessing: zero-phase Butterworth band-pass filtering,
//! polyphase resampling, and amplitude scaling.
//!
//! The offline path filters each record between 0.5 and 40 Hz (forward and
//! backward, so the cascade has squared magnitude and no phase shift),
//! downsamples to 200 Hz, and divides by a scale factor derived from the
//! training set. The streaming path reuses the same primitives per
//! classification group.

mod resample;

pub use resample::resample;

use thiserror::Error;

use crate::record_io::EcgRecord;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid band-pass specification: {0}")]
    BadSpec(String),
    #[error("signal of {len} samples is too short (minimum {min})")]
    SignalTooShort { len: usize, min: usize },
    #[error("invalid sampling rate: {0}")]
    BadRate(String),
    #[error("input is empty")]
    EmptyInput,
    #[error("signal has zero variance")]
    ZeroVariance,
}

/// Band-pass design request.
///
/// `order` is the per-direction Butterworth order in the usual low-pass
/// prototype sense: the band-pass cascade has `order` biquad sections and
/// twice that many poles, and its magnitude at each cutoff is exactly
/// 1/sqrt(2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPassSpec {
    pub low_cut: f64,
    pub high_cut: f64,
    pub order: usize,
    pub fs: f64,
}

impl BandPassSpec {
    fn validate(&self) -> Result<(), DspError> {
        let ok = self.low_cut > 0.0
            && self.low_cut < self.high_cut
            && self.high_cut < self.fs / 2.0
            && self.fs.is_finite()
            && self.order >= 1;
        if ok {
            Ok(())
        } else {
            Err(DspError::BadSpec(format!(
                "need 0 < low ({}) < high ({}) < fs/2 ({}) and order >= 1 ({})",
                self.low_cut,
                self.high_cut,
                self.fs / 2.0,
                self.order
            )))
        }
    }
}

/// One second-order section with `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sos {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Sos {
    /// Poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }
}

/// A cascade of second-order sections plus an overall gain.
#[derive(Debug, Clone, PartialEq)]
pub struct IirCoefficients {
    pub sections: Vec<Sos>,
    pub gain: f64,
}

impl IirCoefficients {
    /// Magnitude of the single-pass response at `freq_hz` for signals sampled
    /// at `fs`.
    pub fn magnitude_at(&self, freq_hz: f64, fs: f64) -> f64 {
        let theta = 2.0 * std::f64::consts::PI * freq_hz / fs;
        let z1 = Complex::new(theta.cos(), -theta.sin());
        let z2 = z1.mul(z1);
        let mut h = Complex::new(self.gain, 0.0);
        for s in &self.sections {
            let num = Complex::new(s.b0, 0.0)
                .add(z1.scale(s.b1))
                .add(z2.scale(s.b2));
            let den = Complex::new(1.0, 0.0)
                .add(z1.scale(s.a1))
                .add(z2.scale(s.a2));
            h = h.mul(num.div(den));
        }
        h.abs()
    }
}

// Minimal complex arithmetic for filter design; the crate does not need a
// full complex-number dependency for this.
#[derive(Debug, Clone, Copy)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    fn new(re: f64, im: f64) -> Complex {
        Complex { re, im }
    }

    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }

    fn div(self, o: Complex) -> Complex {
        let d = o.re * o.re + o.im * o.im;
        Complex::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }

    fn scale(self, k: f64) -> Complex {
        Complex::new(self.re * k, self.im * k)
    }

    fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    /// Principal square root.
    fn sqrt(self) -> Complex {
        let r = self.abs();
        let re = ((r + self.re) / 2.0).max(0.0).sqrt();
        let im = ((r - self.re) / 2.0).max(0.0).sqrt();
        Complex::new(re, if self.im < 0.0 { -im } else { im })
    }
}

/// Designs a digital Butterworth band-pass filter as second-order sections.
///
/// Analog low-pass prototype of order `spec.order`, low-pass to band-pass
/// transform against the pre-warped cutoffs, then the bilinear transform.
/// The numerator keeps `order` zeros at z = 1 and `order` at z = -1, so the
/// DC response is exactly zero.
pub fn design_bandpass(spec: &BandPassSpec) -> Result<IirCoefficients, DspError> {
    spec.validate()?;
    let fs2 = 2.0 * spec.fs;
    let warp = |f: f64| fs2 * (std::f64::consts::PI * f / spec.fs).tan();
    let w1 = warp(spec.low_cut);
    let w2 = warp(spec.high_cut);
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    let n = spec.order;
    // Left-half-plane prototype poles on the unit circle.
    let prototype: Vec<Complex> = (0..n)
        .map(|k| {
            let angle = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex::new(angle.cos(), angle.sin())
        })
        .collect();

    // Low-pass to band-pass: each prototype pole p yields the roots of
    // s^2 - bw*p*s + w0^2 = 0.
    let mut analog = Vec::with_capacity(2 * n);
    for p in prototype {
        let half = p.scale(bw / 2.0);
        let disc = half.mul(half).sub(Complex::new(w0_sq, 0.0)).sqrt();
        analog.push(half.add(disc));
        analog.push(half.sub(disc));
    }

    // Bilinear transform. The analog transfer is bw^n s^n / prod(s - s_i);
    // substituting s = 2fs (z-1)/(z+1) maps every pole to
    // (2fs + s_i)/(2fs - s_i), puts n numerator zeros at z = 1 and n at
    // z = -1, and leaves an overall gain of bw^n (2fs)^n / prod(2fs - s_i).
    let mut digital = Vec::with_capacity(2 * n);
    let mut prod = Complex::new(1.0, 0.0);
    for s in &analog {
        let den = Complex::new(fs2, 0.0).sub(*s);
        digital.push(Complex::new(fs2, 0.0).add(*s).div(den));
        prod = prod.mul(den);
    }
    let gain = bw.powi(n as i32) * fs2.powi(n as i32) / prod.re;

    let sections = pair_sections(&digital);
    if sections.len() != n {
        return Err(DspError::BadSpec(format!(
            "pole pairing produced {} sections for order {n}",
            sections.len()
        )));
    }

    for s in &sections {
        if !s.is_stable() {
            return Err(DspError::BadSpec(format!(
                "designed section is unstable: {s:?}"
            )));
        }
    }
    Ok(IirCoefficients { sections, gain })
}

/// Groups a conjugate-closed set of digital poles into real biquads.
fn pair_sections(poles: &[Complex]) -> Vec<Sos> {
    let mut complex_upper: Vec<Complex> = Vec::new();
    let mut real: Vec<f64> = Vec::new();
    for p in poles {
        if p.im.abs() > 1e-12 {
            if p.im > 0.0 {
                complex_upper.push(*p);
            }
        } else {
            real.push(p.re);
        }
    }
    let mut sections: Vec<Sos> = complex_upper
        .iter()
        .map(|z| Sos {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -2.0 * z.re,
            a2: z.re * z.re + z.im * z.im,
        })
        .collect();
    real.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in real.chunks(2) {
        if let [r1, r2] = pair {
            sections.push(Sos {
                b0: 1.0,
                b1: 0.0,
                b2: -1.0,
                a1: -(r1 + r2),
                a2: r1 * r2,
            });
        }
    }
    sections
}

/// Steady-state direct-form-II-transposed state for a unit constant input.
fn steady_state(s: &Sos) -> (f64, f64, f64) {
    let y = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    (y, y - s.b0, s.b2 - s.a2 * y)
}

/// One causal pass of the cascade, states initialized to the steady-state
/// response for a constant input at `x[0]`'s level.
fn sosfilt(coeffs: &IirCoefficients, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    let mut level = if x.is_empty() { 0.0 } else { x[0] };
    for s in &coeffs.sections {
        let (y_ss, z1_ss, z2_ss) = steady_state(s);
        let mut z1 = z1_ss * level;
        let mut z2 = z2_ss * level;
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b0 * xin + z1;
            z1 = s.b1 * xin - s.a1 * out + z2;
            z2 = s.b2 * xin - s.a2 * out;
            *v = out;
        }
        level *= y_ss;
    }
    for v in y.iter_mut() {
        *v *= coeffs.gain;
    }
    y
}

fn pad_len(coeffs: &IirCoefficients) -> usize {
    3 * 2 * coeffs.sections.len()
}

/// Odd-reflection extension of `x` by `pad` samples at both ends.
fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for j in 0..pad {
        ext.push(2.0 * x[0] - x[pad - j]);
    }
    ext.extend_from_slice(x);
    for j in 0..pad {
        ext.push(2.0 * x[n - 1] - x[n - 2 - j]);
    }
    ext
}

fn forward_backward(coeffs: &IirCoefficients, x: &[f64]) -> Vec<f64> {
    let pad = pad_len(coeffs);
    let ext = odd_extend(x, pad);
    let mut y = sosfilt(coeffs, &ext);
    y.reverse();
    let mut y = sosfilt(coeffs, &y);
    y.reverse();
    y[pad..pad + x.len()].to_vec()
}

/// Zero-phase filtering: the cascade is applied in both directions, so the
/// effective magnitude response is the square of the single-pass response
/// and the phase response is zero.
///
/// The input is extended by odd reflection (3 times twice the section count
/// on each side) and the extension is discarded afterwards. The result is
/// averaged with the time-reversed filtering of the time-reversed input,
/// which makes `filtfilt` exactly equivariant under time reversal.
pub fn filtfilt(coeffs: &IirCoefficients, x: &[f64]) -> Result<Vec<f64>, DspError> {
    let min = 3 * pad_len(coeffs);
    if x.len() <= min {
        return Err(DspError::SignalTooShort { len: x.len(), min: min + 1 });
    }
    let fwd = forward_backward(coeffs, x);
    let rev_in: Vec<f64> = x.iter().rev().copied().collect();
    let mut rev = forward_backward(coeffs, &rev_in);
    rev.reverse();
    Ok(fwd
        .iter()
        .zip(rev.iter())
        .map(|(a, b)| (a + b) / 2.0)
        .collect())
}

/// Where the scale value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleProvenance {
    /// Mean of the per-record standard deviations over the training set.
    TrainingSetMean,
    /// Standard deviation of the signal being scaled.
    PerSignalStd,
}

/// A positive, finite scaling divisor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFactor {
    pub value: f64,
    pub provenance: ScaleProvenance,
}

/// Population standard deviation (divide by n).
pub fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// The training-set scale: mean of the per-record population standard
/// deviations.
pub fn training_scale(records: &[EcgRecord]) -> Result<ScaleFactor, DspError> {
    if records.is_empty() {
        return Err(DspError::EmptyInput);
    }
    if records.iter().any(|r| r.samples.is_empty()) {
        return Err(DspError::EmptyInput);
    }
    let mean_std = records
        .iter()
        .map(|r| population_std(&r.samples))
        .sum::<f64>()
        / records.len() as f64;
    if !(mean_std > 0.0) || !mean_std.is_finite() {
        return Err(DspError::ZeroVariance);
    }
    Ok(ScaleFactor { value: mean_std, provenance: ScaleProvenance::TrainingSetMean })
}

/// Divides a signal by its own population standard deviation.
pub fn standardize_per_signal(x: &[f64]) -> Result<Vec<f64>, DspError> {
    let std = population_std(x);
    if !(std > 0.0) || !std.is_finite() {
        return Err(DspError::ZeroVariance);
    }
    Ok(x.iter().map(|v| v / std).collect())
}
