//! Linear-interpolation resampling of signal and annotations onto a uniform
//! grid. Polyphase filtering would be the drop-in replacement if aliasing
//! ever matters; at 100 Hz the QRS band is well inside Nyquist.

use crate::error::{Error, Result};

use super::Annotation;

fn check_rates(source_hz: f64, target_hz: f64) -> Result<()> {
    if !(source_hz.is_finite() && source_hz > 0.0 && target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::arg(format!("sampling rates must be positive, got {source_hz} -> {target_hz}")));
    }
    Ok(())
}

/// Number of output samples covering the same duration as `n` input samples.
pub fn resampled_len(n: usize, source_hz: f64, target_hz: f64) -> usize {
    (n as f64 * target_hz / source_hz).round() as usize
}

pub fn resample_signal(signal: &[f64], source_hz: f64, target_hz: f64) -> Result<Vec<f64>> {
    check_rates(source_hz, target_hz)?;
    let n_out = resampled_len(signal.len(), source_hz, target_hz);
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let last = signal.len() - 1;
    Ok((0..n_out)
        .map(|j| {
            let pos = j as f64 * source_hz / target_hz;
            let i0 = (pos.floor() as usize).min(last);
            if i0 == last {
                return signal[last];
            }
            let frac = pos - i0 as f64;
            signal[i0] + frac * (signal[i0 + 1] - signal[i0])
        })
        .collect())
}

/// Maps annotation indices to `round(i * target / source)`, dropping any that
/// land at or past `n_out` and keeping only the first of colliding
/// annotations. Returns the mapped list and the number of collisions.
pub fn resample_annotations(
    annotations: &[Annotation],
    source_hz: f64,
    target_hz: f64,
    n_out: usize,
) -> Result<(Vec<Annotation>, usize)> {
    check_rates(source_hz, target_hz)?;
    let mut out: Vec<Annotation> = Vec::with_capacity(annotations.len());
    let mut collisions = 0;
    for a in annotations {
        let idx = (a.sample_index as f64 * target_hz / source_hz).round() as usize;
        if idx >= n_out {
            continue;
        }
        match out.last() {
            Some(prev) if prev.sample_index >= idx => collisions += 1,
            _ => out.push(Annotation { sample_index: idx, ..*a }),
        }
    }
    Ok((out, collisions))
}
