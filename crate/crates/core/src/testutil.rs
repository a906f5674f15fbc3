//! Fixtures for tests: a MAT-4 writer and synthetic ECG-like signals.
//!
//! Gated behind the `testutil` feature; nothing here is part of the
//! production surface.

/// Typed payload for [`mat4_bytes`], one variant per MAT-4 precision digit.
pub enum Mat4Values {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
    I16(Vec<i16>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl Mat4Values {
    fn precision_digit(&self) -> i32 {
        match self {
            Mat4Values::F64(_) => 0,
            Mat4Values::F32(_) => 1,
            Mat4Values::I32(_) => 2,
            Mat4Values::I16(_) => 3,
            Mat4Values::U16(_) => 4,
            Mat4Values::U8(_) => 5,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Mat4Values::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Mat4Values::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Mat4Values::I32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Mat4Values::I16(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Mat4Values::U16(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Mat4Values::U8(v) => out.extend(v.iter()),
        }
        out
    }
}

/// Serializes one named matrix as a little-endian Level-4 MAT file.
pub fn mat4_bytes(name: &str, rows: u32, cols: u32, values: &Mat4Values) -> Vec<u8> {
    let mopt = values.precision_digit() * 10;
    let mut out = Vec::new();
    out.extend(mopt.to_le_bytes());
    out.extend((rows as i32).to_le_bytes());
    out.extend((cols as i32).to_le_bytes());
    out.extend(0i32.to_le_bytes());
    out.extend(((name.len() + 1) as i32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(0);
    out.extend(values.payload());
    out
}

/// A spiky periodic waveform resembling a QRS train: Gaussian bumps every
/// `period` samples, with per-spike position jitter of up to `jitter`
/// samples. Deterministic in the seed.
pub fn spike_train(len: usize, period: usize, jitter: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0f64; len];
    let mut center = period / 2;
    while center < len + period {
        let offset: i64 = if jitter > 0 {
            rng.random_range(-(jitter as i64)..=jitter as i64)
        } else {
            0
        };
        let c = center as i64 + offset;
        for t in (c - 12).max(0)..(c + 13).min(len as i64) {
            let d = (t - c) as f64 / 4.0;
            x[t as usize] += (-0.5 * d * d).exp();
        }
        center += period;
    }
    x
}

/// A sum of sinusoids, handy as a band-limited test signal.
pub fn tone(len: usize, fs: f64, freq_hz: f64, amplitude: f64) -> Vec<f64> {
    (0..len)
        .map(|n| amplitude * (2.0 * std::f64::consts::PI * freq_hz * n as f64 / fs).sin())
        .collect()
}
