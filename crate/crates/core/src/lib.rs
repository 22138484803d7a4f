//! QRS detection toolkit.
//!
//! ECG records are read from WFDB files (or synthesized), resampled to
//! 100 Hz and cut into overlapping 3 s windows. A small convolutional
//! network labels every sample as QRS or not; the per-window decisions are
//! OR-ed back onto the record timeline and cleaned up either by rule-based
//! post-processing or by a GRU trained to repair the stream. Detected
//! R-peaks are scored against annotations with PPV, sensitivity and F1.

pub mod container;
pub mod convnet;
pub mod error;
pub mod eval;
pub mod gru;
pub mod model_io;
pub mod postprocess;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod wfdb;

pub use error::{Error, Result};
