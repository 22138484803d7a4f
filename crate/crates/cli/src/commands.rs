use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use qrs_core::container::{read_container, read_container_dir, write_container};
use qrs_core::convnet::{self, ModelParams, Subject};
use qrs_core::eval::{cross_validate, model_nodes, tol_from_ms, Aggregation, Database, ModelSet, Path as EvalPath};
use qrs_core::gru::{repair_corpus, train_gru, GruConfig, GruParams, StreamPair};
use qrs_core::model_io::{load_cnn, load_gru, save_cnn, save_gru, SaveMeta};
use qrs_core::postprocess::{derivative, localize, nodes_csv, peaks_text};
use qrs_core::preprocess::prepare_segments;
use qrs_core::synth::gen_corpus;
use qrs_core::train::history_csv;
use qrs_core::wfdb::{load_record, write_record, BeatSet, EcgRecord, StorageFormat};
use qrs_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{
    Cli, Command, ConvertArgs, EvaluateArgs, GruFlags, PredictArgs, SweepArgs, SynthArgs, TrainCnnArgs, TrainGruArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Convert(a) => convert(cfg, a),
        Command::Synth(a) => synth(cfg, a),
        Command::TrainCnn(a) => train_cnn(cfg, a),
        Command::TrainGru(a) => train_gru_cmd(cfg, a),
        Command::Predict(a) => predict(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::SweepGruGrid(a) => sweep(cfg, a),
    }
}

#[derive(Serialize)]
struct Artifact {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    inputs: Vec<String>,
    artifacts: Vec<Artifact>,
}

/// Writes `manifest.json` into `out` covering the listed artifact files.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], files: &[PathBuf]) -> Result<()> {
    let mut artifacts = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(f)?;
        let file = f.strip_prefix(out).unwrap_or(f).display().to_string();
        artifacts.push(Artifact { file, sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let manifest = RunManifest {
        command,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        artifacts,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn require(value: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Argument(format!("missing {flag} (or paths.{key} in the config)")))
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text)?;
    Ok(path)
}

fn meta(cfg: &RunConfig, info: BTreeMap<String, Value>) -> SaveMeta {
    SaveMeta { seed: cfg.seed, config_hash: cfg.hash(), info }
}

fn read_records(dir: &Path) -> Result<Vec<EcgRecord>> {
    let records = read_container_dir(dir)?;
    if records.is_empty() {
        return Err(Error::NotFound { what: "record containers", path: dir.into() });
    }
    Ok(records)
}

fn convert(cfg: RunConfig, a: ConvertArgs) -> Result<()> {
    let cfg = cfg.finalize()?;
    let mut beats = BeatSet::new(&cfg.beat_codes);
    if a.no_paced {
        beats = beats.without_paced();
    }
    let mut files = Vec::new();
    for base in &a.records {
        let base = if base.extension().is_some_and(|e| e == "hea") { base.with_extension("") } else { base.clone() };
        let record = load_record(&base, &a.ann, &beats)?;
        info!("{}: {} samples, {} beats", record.name, record.len(), record.annotations.len());
        files.push(write_container(&a.out, &record)?);
        files.push(a.out.join(format!("{}.f32", record.name)));
    }
    let inputs: Vec<&Path> = a.records.iter().map(|p| p.as_path()).collect();
    write_manifest(&a.out, "convert", &cfg, &inputs, &files)
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    if let Some(d) = a.duration_s {
        cfg.synth.duration_s = d;
    }
    if let Some(n) = a.noise_sigma {
        cfg.synth.noise_sigma = n;
    }
    let cfg = cfg.finalize()?;
    if a.subjects == 0 {
        return Err(Error::Argument("--subjects must be positive".into()));
    }
    let corpus = gen_corpus(&a.prefix, a.subjects, &cfg.synth)?;
    let mut files = Vec::new();
    for r in &corpus {
        if a.wfdb {
            let base = write_record(&a.out, &r.record, StorageFormat::Packed212, 200.0)?;
            for ext in ["hea", "dat", "atr"] {
                files.push(base.with_extension(ext));
            }
        } else {
            files.push(write_container(&a.out, &r.record)?);
            files.push(a.out.join(format!("{}.f32", r.record.name)));
        }
    }
    write_manifest(&a.out, "synth", &cfg, &[], &files)
}

fn train_cnn(mut cfg: RunConfig, a: TrainCnnArgs) -> Result<()> {
    if let Some(d) = a.depth {
        cfg.convnet.depth = d;
    }
    if let Some(f) = a.folds {
        cfg.train_cnn.folds = f;
    }
    if let Some(e) = a.max_epochs {
        cfg.train_cnn.max_epochs = e;
    }
    let data = require(a.data.or(cfg.paths.data_dir.clone()), "--data", "data_dir")?;
    let out = require(a.out.or(cfg.paths.model_dir.clone()), "--out", "model_dir")?;
    let cfg = cfg.finalize()?;
    let records = read_records(&data)?;
    if records.len() < cfg.train_cnn.folds {
        return Err(Error::Argument(format!(
            "{} folds requested but only {} subjects available",
            cfg.train_cnn.folds,
            records.len()
        )));
    }
    let subjects = records
        .iter()
        .map(|r| {
            Ok(Subject { id: r.name.clone(), segments: prepare_segments(r, cfg.label_half_width, &cfg.eval.window)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let models = convnet::train(&subjects, &cfg.train_cnn, &cfg.convnet)?;
    fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    for m in &models {
        let info = BTreeMap::from([
            ("fold".to_string(), json!(m.fold)),
            ("depth".to_string(), json!(cfg.convnet.depth)),
            ("best_epoch".to_string(), json!(m.best_epoch)),
            ("epochs".to_string(), json!(m.history.len())),
            ("held_out".to_string(), json!(m.held_out)),
        ]);
        let stem = format!("fold{}", m.fold);
        let path = save_cnn(&out, &stem, &m.params, &meta(&cfg, info))?;
        files.push(path.clone());
        files.push(path.with_extension("f32"));
        files.push(write_text(out.join(format!("{stem}_history.csv")), &history_csv(&m.history))?);
    }
    write_manifest(&out, "train-cnn", &cfg, &[&data], &files)
}

fn apply_gru_flags(cfg: &mut RunConfig, g: &GruFlags) {
    if let Some(l) = g.layers {
        cfg.gru.hidden_layers = l;
    }
    if let Some(s) = g.seq_len_s {
        cfg.gru.seq_len_s = s;
    }
    if let Some(h) = g.hidden_size {
        cfg.gru.hidden_size = h;
    }
    if let Some(e) = g.max_epochs {
        cfg.train_gru.max_epochs = e;
    }
}

fn cnn_fold_model(dir: &Path, fold: usize) -> Result<ModelParams> {
    let path = dir.join(format!("fold{fold}.json"));
    if !path.exists() {
        return Err(Error::NotFound { what: "CNN model", path });
    }
    Ok(load_cnn(&path)?.0)
}

fn gru_corpus(cfg: &RunConfig, cnn_dir: &Path, data: &Path) -> Result<Vec<StreamPair>> {
    let cnn = cnn_fold_model(cnn_dir, cfg.cnn_fold)?;
    let records = read_records(data)?;
    repair_corpus(&cnn, &records, &cfg.eval.window, cfg.label_half_width, &cfg.corruption)
}

fn train_gru_cmd(mut cfg: RunConfig, a: TrainGruArgs) -> Result<()> {
    apply_gru_flags(&mut cfg, &a.gru);
    if let Some(f) = a.cnn_fold {
        cfg.cnn_fold = f;
    }
    let data = require(a.data.or(cfg.paths.data_dir.clone()), "--data", "data_dir")?;
    let out = require(a.out.or(cfg.paths.model_dir.clone()), "--out", "model_dir")?;
    let cfg = cfg.finalize()?;
    let pairs = gru_corpus(&cfg, &a.cnn, &data)?;
    let model = train_gru(&pairs, &cfg.gru, &cfg.train_gru)?;
    info!("GRU: {} epochs, best {}", model.history.len(), model.best_epoch);
    fs::create_dir_all(&out)?;
    let info = BTreeMap::from([
        ("best_epoch".to_string(), json!(model.best_epoch)),
        ("epochs".to_string(), json!(model.history.len())),
        ("cnn_fold".to_string(), json!(cfg.cnn_fold)),
    ]);
    let path = save_gru(&out, "gru", &model.params, &meta(&cfg, info))?;
    let files = vec![
        path.clone(),
        path.with_extension("f32"),
        write_text(out.join("gru_history.csv"), &history_csv(&model.history))?,
    ];
    write_manifest(&out, "train-gru", &cfg, &[&data, &a.cnn], &files)
}

fn load_gru_opt(path: Option<&Path>, route: EvalPath) -> Result<Option<GruParams>> {
    match (path, route) {
        (Some(p), _) => Ok(Some(load_gru(p)?.0)),
        (None, EvalPath::Gru) => Err(Error::Argument("--path gru needs --gru <model manifest>".into())),
        (None, _) => Ok(None),
    }
}

fn predict(mut cfg: RunConfig, a: PredictArgs) -> Result<()> {
    cfg.eval.advanced.strict |= a.strict_support;
    let cfg = cfg.finalize()?;
    let gru = load_gru_opt(a.gru.as_deref(), a.path)?;
    let (model, _) = load_cnn(&a.model)?;
    let record = read_container(&a.record)?;
    let nodes = model_nodes(&model, &record, a.path, gru.as_ref(), &cfg.eval)?;
    fs::create_dir_all(&a.out)?;
    let d = derivative(&record.signal);
    let files = vec![
        write_text(a.out.join(format!("{}.peaks.txt", record.name)), &peaks_text(&localize(&nodes)))?,
        write_text(a.out.join(format!("{}.nodes.csv", record.name)), &nodes_csv(&nodes, &d, &cfg.eval.advanced))?,
    ];
    write_manifest(&a.out, "predict", &cfg, &[&a.model, &a.record], &files)
}

/// Every `fold*.json` CNN manifest in `dir` and its immediate
/// subdirectories, grouped by depth.
fn collect_models(dir: &Path) -> Result<BTreeMap<usize, Vec<ModelParams>>> {
    fn fold_files(dir: &Path, descend: bool, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound { what: "model directory", path: dir.into() },
            _ => e.into(),
        })?;
        let mut paths: Vec<PathBuf> = entries.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        paths.sort();
        for p in paths {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if p.is_dir() && descend {
                fold_files(&p, false, out)?;
            } else if name.starts_with("fold") && name.ends_with(".json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    fold_files(dir, true, &mut files)?;
    if files.is_empty() {
        return Err(Error::NotFound { what: "CNN model", path: dir.into() });
    }
    let mut by_depth: BTreeMap<usize, Vec<ModelParams>> = BTreeMap::new();
    for f in files {
        let (params, _) = load_cnn(&f)?;
        by_depth.entry(params.config.depth).or_default().push(params);
    }
    Ok(by_depth)
}

fn read_databases(dirs: &[PathBuf]) -> Result<Vec<Database>> {
    if dirs.is_empty() {
        return Err(Error::Argument("at least one --data directory is required".into()));
    }
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok(Database { name, records: read_records(d)? })
        })
        .collect()
}

fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    if let Some(ms) = a.tol_ms {
        cfg.eval.tol = tol_from_ms(ms)?;
    }
    if a.macro_avg {
        cfg.eval.aggregation = Aggregation::Macro;
    }
    cfg.eval.advanced.strict |= a.strict_support;
    if let Some(level) = a.stream_level {
        cfg.eval.stream_level = level;
    }
    let models_dir = require(a.models.or(cfg.paths.model_dir.clone()), "--models", "model_dir")?;
    let out = require(a.out.or(cfg.paths.report_dir.clone()), "--out", "report_dir")?;
    let mut db_dirs = a.databases;
    if db_dirs.is_empty() {
        db_dirs.extend(cfg.paths.data_dir.clone());
    }
    let cfg = cfg.finalize()?;
    let gru = load_gru_opt(a.gru.as_deref(), a.path)?;
    let mut by_depth = collect_models(&models_dir)?;
    if let Some(d) = a.depth {
        by_depth.retain(|&k, _| k == d);
        if by_depth.is_empty() {
            return Err(Error::NotFound { what: "CNN model of the requested depth", path: models_dir });
        }
    } else if by_depth.len() > 1 && !a.sweep_depth {
        return Err(Error::Argument(format!(
            "models of depths {:?} found; pass --depth or --sweep-depth",
            by_depth.keys().collect::<Vec<_>>()
        )));
    }
    let sets: Vec<ModelSet> = by_depth.into_iter().map(|(depth, models)| ModelSet { depth, models }).collect();
    let databases = read_databases(&db_dirs)?;
    let report = cross_validate(&sets, &databases, a.path, gru.as_ref(), &cfg.eval)?;
    for r in &report.rows {
        info!("{} depth {} {}: F1 {:.4} ± {:.4}", r.database, r.depth, r.path, r.mean_f1, r.std_f1);
    }
    fs::create_dir_all(&out)?;
    let files = vec![
        write_text(out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?,
        write_text(out.join("report.csv"), &report.to_csv())?,
    ];
    let mut inputs: Vec<&Path> = vec![&models_dir];
    inputs.extend(db_dirs.iter().map(|p| p.as_path()));
    write_manifest(&out, "evaluate", &cfg, &inputs, &files)
}

fn sweep(mut cfg: RunConfig, a: SweepArgs) -> Result<()> {
    let flags = GruFlags { layers: None, seq_len_s: None, hidden_size: a.hidden_size, max_epochs: a.max_epochs };
    apply_gru_flags(&mut cfg, &flags);
    if let Some(ms) = a.tol_ms {
        cfg.eval.tol = tol_from_ms(ms)?;
    }
    let data = require(a.data.or(cfg.paths.data_dir.clone()), "--data", "data_dir")?;
    let out = require(a.out.or(cfg.paths.report_dir.clone()), "--out", "report_dir")?;
    let cfg = cfg.finalize()?;
    let pairs = gru_corpus(&cfg, &a.cnn, &data)?;
    let by_depth = collect_models(&a.cnn)?;
    let sets: Vec<ModelSet> = by_depth.into_iter().map(|(depth, models)| ModelSet { depth, models }).collect();
    let databases = read_databases(&a.databases)?;

    let mut csv = String::from("layers,seq_len_s,dataset,mean_f1,std_f1\n");
    for &layers in &a.layers {
        for &seq in &a.seq_lens {
            let gcfg = GruConfig { hidden_layers: layers, seq_len_s: seq, ..cfg.gru.clone() };
            let model = train_gru(&pairs, &gcfg, &cfg.train_gru)?;
            let report = cross_validate(&sets, &databases, EvalPath::Gru, Some(&model.params), &cfg.eval)?;
            for r in &report.rows {
                info!("layers {layers} seq {seq}s {}: F1 {:.4}", r.database, r.mean_f1);
                csv.push_str(&format!("{layers},{seq},{},{:.6},{:.6}\n", r.database, r.mean_f1, r.std_f1));
            }
        }
    }
    fs::create_dir_all(&out)?;
    let files = vec![write_text(out.join("grid.csv"), &csv)?];
    let mut inputs: Vec<&Path> = vec![&data, &a.cnn];
    inputs.extend(a.databases.iter().map(|p| p.as_path()));
    write_manifest(&out, "sweep-gru-grid", &cfg, &inputs, &files)
}
