//! Turning records into network inputs and back: QRS label streams,
//! overlapping windows, per-window z-scoring, and OR-aggregation of
//! per-window decisions onto the record timeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wfdb::EcgRecord;

/// Samples labelled on each side of an annotated R-peak: 0.05 s at 100 Hz,
/// giving an 11-sample QRS region.
pub const DEFAULT_LABEL_HALF_WIDTH: usize = 5;

/// Below this standard deviation a window is treated as flat.
const FLAT_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Window length in samples.
    pub window: usize,
    /// Distance between consecutive window starts.
    pub stride: usize,
}

impl WindowConfig {
    pub fn from_seconds(window_s: f64, overlap_s: f64, fs: f64) -> Result<Self> {
        let window = (window_s * fs).round() as usize;
        let overlap = (overlap_s * fs).round() as usize;
        if window == 0 || overlap >= window {
            return Err(Error::arg(format!(
                "window {window_s}s with overlap {overlap_s}s at {fs} Hz leaves no stride"
            )));
        }
        Ok(Self { window, stride: window - overlap })
    }
}

impl Default for WindowConfig {
    /// 3 s windows overlapping by 2 s at 100 Hz.
    fn default() -> Self {
        Self { window: 300, stride: 100 }
    }
}

/// One network input window.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Position of the first sample on the record timeline.
    pub start: usize,
    pub values: Vec<f64>,
    pub labels: Vec<bool>,
    /// Samples past this point are zero padding (short records only).
    pub valid_len: usize,
}

impl Segment {
    /// Loss mask: true for real samples.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.values.len()).map(|i| i < self.valid_len).collect()
    }
}

/// Binary QRS labels: ones within `half_width` samples of each annotation,
/// clipped to the record.
pub fn make_label_stream(record: &EcgRecord, half_width: usize) -> Vec<bool> {
    let n = record.len();
    let mut bits = vec![false; n];
    for a in &record.annotations {
        let lo = a.sample_index.saturating_sub(half_width);
        let hi = (a.sample_index + half_width).min(n.saturating_sub(1));
        for b in bits.iter_mut().take(hi + 1).skip(lo) {
            *b = true;
        }
    }
    bits
}

/// Window start positions for a record of `len` samples.
///
/// Regular strides, plus a final window flush with the record end when the
/// strides do not land there exactly. Records shorter than one window get a
/// single window at 0.
pub fn window_starts(len: usize, cfg: &WindowConfig) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if len <= cfg.window {
        return vec![0];
    }
    let last = len - cfg.window;
    let mut starts: Vec<usize> = (0..=last).step_by(cfg.stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Population z-score. Flat input maps to zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < FLAT_STD {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Slices signal and labels into windows. Values are left raw; short
/// records are zero padded with padding labelled 0.
pub fn segmentize(signal: &[f64], labels: &[bool], cfg: &WindowConfig) -> Result<Vec<Segment>> {
    if signal.len() != labels.len() {
        return Err(Error::arg(format!("signal has {} samples but labels have {}", signal.len(), labels.len())));
    }
    Ok(window_starts(signal.len(), cfg)
        .into_iter()
        .map(|start| {
            let end = (start + cfg.window).min(signal.len());
            let mut values = signal[start..end].to_vec();
            let mut window_labels = labels[start..end].to_vec();
            let valid_len = values.len();
            values.resize(cfg.window, 0.0);
            window_labels.resize(cfg.window, false);
            Segment { start, values, labels: window_labels, valid_len }
        })
        .collect())
}

/// Labels, windows and z-scores a record: the network-ready form.
pub fn prepare_segments(record: &EcgRecord, half_width: usize, cfg: &WindowConfig) -> Result<Vec<Segment>> {
    let labels = make_label_stream(record, half_width);
    let mut segments = segmentize(&record.signal, &labels, cfg)?;
    for s in &mut segments {
        let normalized = zscore(&s.values[..s.valid_len]);
        s.values[..s.valid_len].copy_from_slice(&normalized);
    }
    Ok(segments)
}

/// Per-window binary decisions positioned on the record timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBits {
    pub start: usize,
    pub bits: Vec<bool>,
    /// Only the first `valid_len` bits are real samples.
    pub valid_len: usize,
}

/// ORs every window's valid bits into a record-length stream.
pub fn aggregate_or(windows: &[WindowBits], record_len: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; record_len];
    for w in windows {
        let valid = w.valid_len.min(w.bits.len());
        if w.start + valid > record_len {
            return Err(Error::arg(format!(
                "window at {} with {valid} valid samples exceeds record length {record_len}",
                w.start
            )));
        }
        for (o, &b) in out[w.start..w.start + valid].iter_mut().zip(&w.bits) {
            *o |= b;
        }
    }
    Ok(out)
}
