//! Sinusoidal time features shared by the teacher and both time inputs of
//! the dual-time student.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MIN_FREQUENCY: f64 = 1.0;
pub const MAX_FREQUENCY: f64 = 1000.0;

fn check_dim(m: usize) -> Result<()> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::Config(format!(
            "time embedding dimension must be even and >= 2, got {m}"
        )));
    }
    Ok(())
}

/// Geometrically spaced angular frequencies on `[MIN_FREQUENCY, MAX_FREQUENCY]`.
pub fn frequencies(m: usize) -> Result<Vec<f64>> {
    check_dim(m)?;
    let half = m / 2;
    if half == 1 {
        return Ok(vec![MIN_FREQUENCY]);
    }
    let ratio = MAX_FREQUENCY / MIN_FREQUENCY;
    Ok((0..half)
        .map(|k| MIN_FREQUENCY * ratio.powf(k as f64 / (half - 1) as f64))
        .collect())
}

/// `[sin(w_1 t), cos(w_1 t), ..., sin(w_{m/2} t), cos(w_{m/2} t)]`.
pub fn time_embed(t: f64, m: usize) -> Result<Vec<f64>> {
    let freqs = frequencies(m)?;
    let mut out = Vec::with_capacity(m);
    for w in freqs {
        let (s, c) = (w * t).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Row-wise embedding of a batch of times, shape `(times.len(), m)`.
pub fn time_embed_batch(times: &[f64], m: usize) -> Result<Array2<f64>> {
    let freqs = frequencies(m)?;
    let mut out = Array2::zeros((times.len(), m));
    for (mut row, &t) in out.outer_iter_mut().zip(times) {
        for (k, &w) in freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            row[2 * k] = s;
            row[2 * k + 1] = c;
        }
    }
    Ok(out)
}
