//! WFDB record access: headers, format 212/16 signal files, MIT annotation
//! files, and resampling onto the common pipeline rate.

mod annotation;
mod header;
mod resample;
mod signal;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use log::debug;
use serde::{Deserialize, Serialize};

pub use annotation::{
    code_for, encode_annotations, filter_beats, mnemonic, parse_annotations, Annotation, BeatSet, DEFAULT_BEAT_CODES,
};
pub use header::{format_header, parse_header, RecordHeader, SignalSpec, StorageFormat, DEFAULT_ADC_GAIN};
pub use resample::{resample_annotations, resample_signal, resampled_len};
pub use signal::{decode_16, decode_212, encode_16, encode_212};

use crate::error::{Error, Result};

/// Sampling rate every downstream stage assumes.
pub const PIPELINE_HZ: f64 = 100.0;

/// Where a record came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: String,
    pub source_hz: f64,
    pub source_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<RecordHeader>,
    /// Annotations dropped because they mapped onto an occupied index.
    #[serde(default)]
    pub collisions: usize,
}

impl Provenance {
    /// Generated in-process at the pipeline rate.
    pub fn synthetic(samples: usize) -> Self {
        Self { origin: "synth".into(), source_hz: PIPELINE_HZ, source_samples: samples, header: None, collisions: 0 }
    }
}

/// A single-lead ECG in millivolts with its beat annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub name: String,
    pub fs: f64,
    pub signal: Vec<f64>,
    pub annotations: Vec<Annotation>,
    pub source: Provenance,
}

impl EcgRecord {
    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    pub fn annotation_indices(&self) -> Vec<usize> {
        self.annotations.iter().map(|a| a.sample_index).collect()
    }
}

fn sibling(base: &Path, ext: &str) -> PathBuf {
    let mut s = OsString::from(base.as_os_str());
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_existing(path: &Path, what: &'static str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { what, path: path.to_path_buf() },
        _ => Error::Io(e),
    })
}

/// Reads the first lead of `<base>.hea` / its signal file / `<base>.<ann_ext>`
/// at the record's own sampling rate. Annotations are unfiltered.
pub fn read_record(base: &Path, ann_ext: &str) -> Result<EcgRecord> {
    let header_bytes = read_existing(&sibling(base, "hea"), "header file")?;
    let header = parse_header(&String::from_utf8_lossy(&header_bytes))?;
    let ann_bytes = read_existing(&sibling(base, ann_ext), "annotation file")?;

    let first = &header.signals[0];
    let group: Vec<&SignalSpec> = header.signals.iter().filter(|s| s.file_name == first.file_name).collect();
    if group.iter().any(|s| s.storage_format != first.storage_format) {
        return Err(Error::UnsupportedFormat(format!("mixed storage formats in `{}`", first.file_name)));
    }
    let frame = group.len();
    let dir = base.parent().unwrap_or(Path::new(""));
    let dat = read_existing(&dir.join(&first.file_name), "signal file")?;
    let payload = dat.get(first.byte_offset as usize..).unwrap_or_default();
    let n_total = header.n_samples * frame;
    let interleaved = match first.storage_format {
        StorageFormat::Packed212 => decode_212(payload, n_total)?,
        StorageFormat::Le16 => {
            let needed = n_total * 2;
            if payload.len() < needed {
                return Err(Error::parse(format!(
                    "format 16: {n_total} samples need {needed} bytes, got {}",
                    payload.len()
                )));
            }
            decode_16(&payload[..needed])?
        }
    };
    let signal: Vec<f64> = interleaved.iter().step_by(frame).map(|&adu| first.to_physical(adu)).collect();

    let annotations: Vec<Annotation> =
        parse_annotations(&ann_bytes)?.into_iter().filter(|a| a.sample_index < header.n_samples).collect();

    Ok(EcgRecord {
        name: header.record_name.clone(),
        fs: header.sampling_hz,
        signal,
        annotations,
        source: Provenance {
            origin: "wfdb".into(),
            source_hz: header.sampling_hz,
            source_samples: header.n_samples,
            header: Some(header),
            collisions: 0,
        },
    })
}

/// Resamples signal and annotations to `target_hz`.
pub fn resample_record(record: &EcgRecord, target_hz: f64) -> Result<EcgRecord> {
    let signal = resample_signal(&record.signal, record.fs, target_hz)?;
    let (annotations, collisions) = resample_annotations(&record.annotations, record.fs, target_hz, signal.len())?;
    if collisions > 0 {
        debug!("{}: {collisions} annotation(s) collided after resampling", record.name);
    }
    Ok(EcgRecord {
        name: record.name.clone(),
        fs: target_hz,
        signal,
        annotations,
        source: Provenance { collisions: record.source.collisions + collisions, ..record.source.clone() },
    })
}

/// Read, keep valid beats, resample to the pipeline rate.
pub fn load_record(base: &Path, ann_ext: &str, beats: &BeatSet) -> Result<EcgRecord> {
    let mut record = read_record(base, ann_ext)?;
    record.annotations = filter_beats(&record.annotations, beats);
    resample_record(&record, PIPELINE_HZ)
}

/// Writes `record` as a single-signal WFDB record `<dir>/<name>.{hea,dat,atr}`
/// and returns the base path. Samples are quantized with `adc_gain` and
/// saturated to the format's range.
pub fn write_record(dir: &Path, record: &EcgRecord, format: StorageFormat, adc_gain: f64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (lo, hi) = match format {
        StorageFormat::Packed212 => (-2048, 2047),
        StorageFormat::Le16 => (i16::MIN as i32, i16::MAX as i32),
    };
    let adu: Vec<i32> =
        record.signal.iter().map(|v| ((v * adc_gain).round() as i64).clamp(lo as i64, hi as i64) as i32).collect();
    let dat_name = format!("{}.dat", record.name);
    let header = RecordHeader {
        record_name: record.name.clone(),
        n_signals: 1,
        sampling_hz: record.fs,
        n_samples: adu.len(),
        signals: vec![SignalSpec {
            file_name: dat_name.clone(),
            storage_format: format,
            byte_offset: 0,
            adc_gain,
            baseline: 0,
            adc_zero: 0,
            lead_name: "synthetic".into(),
        }],
    };
    let bytes = match format {
        StorageFormat::Packed212 => encode_212(&adu),
        StorageFormat::Le16 => encode_16(&adu),
    };
    let base = dir.join(&record.name);
    fs::write(sibling(&base, "hea"), format_header(&header))?;
    fs::write(dir.join(dat_name), bytes)?;
    fs::write(sibling(&base, "atr"), encode_annotations(&record.annotations)?)?;
    Ok(base)
}
