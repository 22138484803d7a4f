//! Beat matching, PPV/sensitivity/F1 and the cross-validation protocol.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::convnet::{predict_windows, ModelParams};
use crate::error::{Error, Result};
use crate::gru::{repair_stream, GruParams};
use crate::postprocess::{group_ones, localize, postprocess, salt_pepper, AdvancedConfig, Level, QrsNode};
use crate::preprocess::{aggregate_or, WindowBits, WindowConfig};
use crate::wfdb::{EcgRecord, PIPELINE_HZ};

/// ±150 ms at 100 Hz.
pub const DEFAULT_TOL: usize = 15;

pub fn tol_from_ms(ms: f64) -> Result<usize> {
    if !(ms.is_finite() && ms >= 0.0) {
        return Err(Error::arg(format!("tolerance {ms} ms is not a non-negative number")));
    }
    Ok((ms * PIPELINE_HZ / 1000.0).round() as usize)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(predicted, annotated)` index pairs, in increasing order.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pairs: Vec<(usize, usize)>,
}

fn check_sorted(xs: &[usize], what: &str) -> Result<()> {
    if xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg(format!("{what} indices must be strictly increasing")));
    }
    Ok(())
}

/// One-to-one matching of predicted to annotated beats within `tol`
/// samples. Maximizes the number of matched pairs and, among maximal
/// matchings, minimizes the summed distance.
///
/// Beats are split into clusters wherever two neighbours (in merged order)
/// are more than `tol` apart; no pair can straddle such a gap, so each
/// cluster is solved on its own by an in-order dynamic program.
pub fn match_beats(pred: &[usize], ann: &[usize], tol: usize) -> Result<MatchResult> {
    check_sorted(pred, "predicted")?;
    check_sorted(ann, "annotated")?;
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < pred.len() || j < ann.len() {
        let (i0, j0) = (i, j);
        let mut last = match (pred.get(i), ann.get(j)) {
            (Some(&p), Some(&a)) if p <= a => {
                i += 1;
                p
            }
            (Some(&p), None) => {
                i += 1;
                p
            }
            (_, Some(&a)) => {
                j += 1;
                a
            }
            (None, None) => unreachable!(),
        };
        loop {
            let next = match (pred.get(i), ann.get(j)) {
                (Some(&p), Some(&a)) => p.min(a),
                (Some(&p), None) => p,
                (None, Some(&a)) => a,
                (None, None) => break,
            };
            if next - last > tol {
                break;
            }
            if pred.get(i) == Some(&next) {
                i += 1;
            } else {
                j += 1;
            }
            last = next;
        }
        match_cluster(&pred[i0..i], &ann[j0..j], tol, &mut pairs);
    }
    let tp = pairs.len();
    Ok(MatchResult { tp, fp: pred.len() - tp, fn_: ann.len() - tp, pairs })
}

fn match_cluster(pred: &[usize], ann: &[usize], tol: usize, pairs: &mut Vec<(usize, usize)>) {
    if pred.is_empty() || ann.is_empty() {
        return;
    }
    let (n, m) = (pred.len(), ann.len());
    // best[i][j]: (matches, -distance) over pred[i..], ann[j..].
    let w = m + 1;
    let mut best = vec![(0usize, 0i64); (n + 1) * w];
    for a in (0..n).rev() {
        for b in (0..m).rev() {
            let mut v = best[(a + 1) * w + b].max(best[a * w + b + 1]);
            let d = pred[a].abs_diff(ann[b]);
            if d <= tol {
                let (k, s) = best[(a + 1) * w + b + 1];
                v = v.max((k + 1, s - d as i64));
            }
            best[a * w + b] = v;
        }
    }
    let (mut a, mut b) = (0, 0);
    while a < n && b < m {
        let here = best[a * w + b];
        let d = pred[a].abs_diff(ann[b]);
        if d <= tol {
            let (k, s) = best[(a + 1) * w + b + 1];
            if (k + 1, s - d as i64) == here {
                pairs.push((pred[a], ann[b]));
                a += 1;
                b += 1;
                continue;
            }
        }
        if best[(a + 1) * w + b] == here {
            a += 1;
        } else {
            b += 1;
        }
    }
}

pub fn ppv(tp: usize, fp: usize) -> f64 {
    ratio(tp, tp + fp)
}

pub fn sensitivity(tp: usize, fn_: usize) -> f64 {
    ratio(tp, tp + fn_)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of PPV and sensitivity; 0 when both are 0.
pub fn f1(ppv: f64, sensitivity: f64) -> f64 {
    let den = ppv + sensitivity;
    if den == 0.0 {
        0.0
    } else {
        2.0 * ppv * sensitivity / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ppv: f64,
    pub sensitivity: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let (p, s) = (ppv(tp, fp), sensitivity(tp, fn_));
        Self { ppv: p, sensitivity: s, f1: f1(p, s) }
    }
}

/// Post-processing applied to a record-timeline prediction stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Salt,
    Moderate,
    Advanced,
    /// GRU repair, then salt-and-pepper.
    Gru,
}

impl Path {
    pub const ALL: [Path; 4] = [Path::Salt, Path::Moderate, Path::Advanced, Path::Gru];

    pub fn name(self) -> &'static str {
        match self {
            Path::Salt => "salt",
            Path::Moderate => "moderate",
            Path::Advanced => "advanced",
            Path::Gru => "gru",
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Path {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Path::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown path '{s}' (expected salt, moderate, advanced or gru)")))
    }
}

/// Where the GRU sees the CNN output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamLevel {
    /// The OR-aggregated record stream.
    #[default]
    Record,
    /// Each window before aggregation.
    Segment,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Pool counts over a database, then score.
    #[default]
    Micro,
    /// Mean of per-record F1.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub tol: usize,
    pub window: WindowConfig,
    pub advanced: AdvancedConfig,
    pub aggregation: Aggregation,
    pub stream_level: StreamLevel,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            window: WindowConfig::default(),
            advanced: AdvancedConfig::default(),
            aggregation: Aggregation::Micro,
            stream_level: StreamLevel::Record,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub record: String,
    #[serde(flatten)]
    pub counts: MatchResult,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Nodes surviving the chosen path on a record-timeline stream.
pub fn detect_nodes(
    signal: &[f64],
    bits: &[bool],
    path: Path,
    gru: Option<&GruParams>,
    advanced: &AdvancedConfig,
) -> Result<Vec<QrsNode>> {
    match path {
        Path::Salt => postprocess(bits, signal, Level::Salt, advanced),
        Path::Moderate => postprocess(bits, signal, Level::Moderate, advanced),
        Path::Advanced => postprocess(bits, signal, Level::Advanced, advanced),
        Path::Gru => salt_pepper(&group_ones(&repair_stream(require_gru(gru)?, bits)?)),
    }
}

fn require_gru(gru: Option<&GruParams>) -> Result<&GruParams> {
    gru.ok_or_else(|| Error::arg("the gru path needs GRU parameters"))
}

/// Scores one record given its prediction stream on the record timeline.
pub fn evaluate_record(
    record: &EcgRecord,
    bits: &[bool],
    path: Path,
    gru: Option<&GruParams>,
    opts: &EvalOptions,
) -> Result<RecordReport> {
    if bits.len() != record.len() {
        return Err(Error::arg(format!(
            "prediction stream has {} samples, record {} has {}",
            bits.len(),
            record.name,
            record.len()
        )));
    }
    let nodes = detect_nodes(&record.signal, bits, path, gru, &opts.advanced)?;
    report_for(record, &localize(&nodes), opts.tol)
}

fn report_for(record: &EcgRecord, peaks: &[usize], tol: usize) -> Result<RecordReport> {
    let counts = match_beats(peaks, &record.annotation_indices(), tol)?;
    let scores = Scores::from_counts(counts.tp, counts.fp, counts.fn_);
    Ok(RecordReport { record: record.name.clone(), counts, scores })
}

/// Runs a CNN over a record and applies the chosen path. With
/// segment-level streams the GRU repairs each window before aggregation.
pub fn model_nodes(
    model: &ModelParams,
    record: &EcgRecord,
    path: Path,
    gru: Option<&GruParams>,
    opts: &EvalOptions,
) -> Result<Vec<QrsNode>> {
    let windows = predict_windows(model, record, &opts.window)?;
    if path == Path::Gru && opts.stream_level == StreamLevel::Segment {
        let gru = require_gru(gru)?;
        let repaired = windows
            .into_iter()
            .map(|w| {
                let mut bits = repair_stream(gru, &w.bits[..w.valid_len])?;
                bits.resize(w.bits.len(), false);
                Ok(WindowBits { bits, ..w })
            })
            .collect::<Result<Vec<_>>>()?;
        return salt_pepper(&group_ones(&aggregate_or(&repaired, record.len())?));
    }
    let bits = aggregate_or(&windows, record.len())?;
    detect_nodes(&record.signal, &bits, path, gru, &opts.advanced)
}

/// Runs a model over a record and scores the chosen path.
pub fn evaluate_model_on_record(
    model: &ModelParams,
    record: &EcgRecord,
    path: Path,
    gru: Option<&GruParams>,
    opts: &EvalOptions,
) -> Result<RecordReport> {
    let nodes = model_nodes(model, record, path, gru, opts)?;
    report_for(record, &localize(&nodes), opts.tol)
}

#[derive(Debug, Clone)]
pub struct Database {
    pub name: String,
    pub records: Vec<EcgRecord>,
}

/// Fold models of one network depth.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub depth: usize,
    pub models: Vec<ModelParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: usize,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub records: Vec<RecordReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub database: String,
    pub depth: usize,
    pub path: Path,
    pub mean_f1: f64,
    pub std_f1: f64,
    /// Totals over all models.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub models: Vec<ModelScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tol: usize,
    pub aggregation: Aggregation,
    pub stream_level: StreamLevel,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("database,depth,path,mean_f1,std_f1,tp,fp,fn\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{},{}",
                r.database, r.depth, r.path, r.mean_f1, r.std_f1, r.tp, r.fp, r.fn_
            );
        }
        out
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
/// Identical inputs give exactly zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let Some(&first) = values.first() else {
        return (0.0, 0.0);
    };
    let n = values.len() as f64;
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Every model of every set against every database; one row per
/// `(depth, database)` with the spread of F1 across models.
pub fn cross_validate(
    sets: &[ModelSet],
    databases: &[Database],
    path: Path,
    gru: Option<&GruParams>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if path == Path::Gru && gru.is_none() {
        return Err(Error::arg("the gru path needs GRU parameters"));
    }
    let mut rows = Vec::new();
    for set in sets {
        if set.models.is_empty() {
            return Err(Error::arg(format!("no models for depth {}", set.depth)));
        }
        for db in databases {
            let mut models = Vec::with_capacity(set.models.len());
            for (k, model) in set.models.iter().enumerate() {
                let records = db
                    .records
                    .iter()
                    .map(|r| evaluate_model_on_record(model, r, path, gru, opts))
                    .collect::<Result<Vec<_>>>()?;
                let tp = records.iter().map(|r| r.counts.tp).sum();
                let fp = records.iter().map(|r| r.counts.fp).sum();
                let fn_ = records.iter().map(|r| r.counts.fn_).sum();
                let f1 = match opts.aggregation {
                    Aggregation::Micro => Scores::from_counts(tp, fp, fn_).f1,
                    Aggregation::Macro => mean_std(&records.iter().map(|r| r.scores.f1).collect::<Vec<_>>()).0,
                };
                models.push(ModelScore { model: k, f1, tp, fp, fn_, records });
            }
            let (mean_f1, std_f1) = mean_std(&models.iter().map(|m| m.f1).collect::<Vec<_>>());
            rows.push(ReportRow {
                database: db.name.clone(),
                depth: set.depth,
                path,
                mean_f1,
                std_f1,
                tp: models.iter().map(|m| m.tp).sum(),
                fp: models.iter().map(|m| m.fp).sum(),
                fn_: models.iter().map(|m| m.fn_).sum(),
                models,
            });
        }
    }
    Ok(EvalReport { tol: opts.tol, aggregation: opts.aggregation, stream_level: opts.stream_level, rows })
}
