//! `.hea` header parsing.
//!
//! Only single-segment records are understood. The record line must carry
//! all four of `name n_signals fs n_samples`; signal lines need at least the
//! file name and format, everything after falls back to WFDB defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ADC gain WFDB assumes when the header leaves it out (or writes 0).
pub const DEFAULT_ADC_GAIN: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageFormat {
    /// Two 12-bit samples packed into three bytes.
    #[serde(rename = "212")]
    Packed212,
    /// 16-bit little-endian two's complement.
    #[serde(rename = "16")]
    Le16,
}

impl StorageFormat {
    pub fn code(self) -> u32 {
        match self {
            StorageFormat::Packed212 => 212,
            StorageFormat::Le16 => 16,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            212 => Ok(StorageFormat::Packed212),
            16 => Ok(StorageFormat::Le16),
            other => Err(Error::UnsupportedFormat(format!("WFDB signal format {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub file_name: String,
    pub storage_format: StorageFormat,
    /// Bytes to skip at the start of the signal file (`+offset` suffix).
    pub byte_offset: u64,
    /// ADC units per millivolt.
    pub adc_gain: f64,
    /// Sample value that maps to 0 mV. Defaults to `adc_zero`.
    pub baseline: i32,
    pub adc_zero: i32,
    pub lead_name: String,
}

impl SignalSpec {
    pub fn to_physical(&self, adu: i32) -> f64 {
        (adu - self.baseline) as f64 / self.adc_gain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub record_name: String,
    pub n_signals: usize,
    pub sampling_hz: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

pub fn parse_header(text: &str) -> Result<RecordHeader> {
    let mut lines =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (line_no, record_line) = lines.next().ok_or_else(|| Error::parse("empty header"))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(Error::parse_at(
            line_no,
            format!("record line needs `name n_signals fs n_samples`, got {} field(s)", fields.len()),
        ));
    }
    let record_name = fields[0];
    if record_name.contains('/') {
        return Err(Error::UnsupportedFormat(format!("multi-segment record `{record_name}`")));
    }
    let n_signals: usize =
        fields[1].parse().map_err(|_| Error::parse_at(line_no, format!("bad signal count `{}`", fields[1])))?;
    if n_signals == 0 {
        return Err(Error::parse_at(line_no, "record has no signals"));
    }
    // fs may be written as `fs/counter_freq(base_counter)`.
    let fs_text = fields[2].split('/').next().unwrap_or_default();
    let sampling_hz: f64 = fs_text
        .parse()
        .ok()
        .filter(|fs: &f64| fs.is_finite() && *fs > 0.0)
        .ok_or_else(|| Error::parse_at(line_no, format!("bad sampling frequency `{}`", fields[2])))?;
    let n_samples: usize =
        fields[3].parse().map_err(|_| Error::parse_at(line_no, format!("bad sample count `{}`", fields[3])))?;

    let mut signals = Vec::with_capacity(n_signals);
    for (line_no, line) in lines.by_ref().take(n_signals) {
        signals.push(parse_signal_line(line_no, line)?);
    }
    if signals.len() != n_signals {
        return Err(Error::parse(format!(
            "header declares {n_signals} signal(s) but has {} signal line(s)",
            signals.len()
        )));
    }

    Ok(RecordHeader { record_name: record_name.to_string(), n_signals, sampling_hz, n_samples, signals })
}

fn parse_signal_line(line_no: usize, line: &str) -> Result<SignalSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(Error::parse_at(line_no, "signal line needs at least `file format`"));
    }
    let file_name = fields[0].to_string();

    let fmt = fields[1];
    let digits_end = fmt.find(|c: char| !c.is_ascii_digit()).unwrap_or(fmt.len());
    let code: u32 =
        fmt[..digits_end].parse().map_err(|_| Error::parse_at(line_no, format!("bad format field `{fmt}`")))?;
    let storage_format = StorageFormat::from_code(code)?;
    let mut byte_offset = 0;
    let mut rest = &fmt[digits_end..];
    while !rest.is_empty() {
        let (tag, tail) = rest.split_at(1);
        let end = tail.find(|c: char| !c.is_ascii_digit()).unwrap_or(tail.len());
        let value: u64 =
            tail[..end].parse().map_err(|_| Error::parse_at(line_no, format!("bad format modifier in `{fmt}`")))?;
        match tag {
            "+" => byte_offset = value,
            "x" if value <= 1 => {}
            "x" => return Err(Error::UnsupportedFormat(format!("{value} samples per frame in `{file_name}`"))),
            ":" if value == 0 => {}
            ":" => return Err(Error::UnsupportedFormat(format!("skewed signal `{file_name}`"))),
            _ => return Err(Error::parse_at(line_no, format!("bad format modifier in `{fmt}`"))),
        }
        rest = &tail[end..];
    }

    let (mut adc_gain, baseline) = match fields.get(2) {
        Some(text) => parse_gain(line_no, text)?,
        None => (DEFAULT_ADC_GAIN, None),
    };
    if adc_gain == 0.0 {
        adc_gain = DEFAULT_ADC_GAIN;
    }
    let adc_zero = match fields.get(4) {
        Some(text) => text.parse().map_err(|_| Error::parse_at(line_no, format!("bad ADC zero `{text}`")))?,
        None => 0,
    };
    let lead_name = if fields.len() > 8 { fields[8..].join(" ") } else { String::new() };

    Ok(SignalSpec {
        file_name,
        storage_format,
        byte_offset,
        adc_gain,
        baseline: baseline.unwrap_or(adc_zero),
        adc_zero,
        lead_name,
    })
}

/// `gain[(baseline)][/units]`
fn parse_gain(line_no: usize, text: &str) -> Result<(f64, Option<i32>)> {
    let text = text.split('/').next().unwrap_or_default();
    let bad = || Error::parse_at(line_no, format!("bad ADC gain `{text}`"));
    match text.split_once('(') {
        Some((gain, rest)) => {
            let baseline = rest.strip_suffix(')').ok_or_else(bad)?;
            Ok((gain.parse().map_err(|_| bad())?, Some(baseline.parse().map_err(|_| bad())?)))
        }
        None => Ok((text.parse().map_err(|_| bad())?, None)),
    }
}

/// Renders a header that [`parse_header`] reads back to the same value.
pub fn format_header(header: &RecordHeader) -> String {
    let mut out = format!("{} {} {} {}\n", header.record_name, header.n_signals, header.sampling_hz, header.n_samples);
    for s in &header.signals {
        let fmt = if s.byte_offset > 0 {
            format!("{}+{}", s.storage_format.code(), s.byte_offset)
        } else {
            s.storage_format.code().to_string()
        };
        let gain = if s.baseline != s.adc_zero {
            format!("{}({})/mV", s.adc_gain, s.baseline)
        } else {
            format!("{}/mV", s.adc_gain)
        };
        let resolution = match s.storage_format {
            StorageFormat::Packed212 => 12,
            StorageFormat::Le16 => 16,
        };
        out.push_str(&format!(
            "{} {} {} {} {} 0 0 0 {}\n",
            s.file_name, fmt, gain, resolution, s.adc_zero, s.lead_name
        ));
    }
    out
}
