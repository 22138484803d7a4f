//! Model files: a JSON manifest next to a little-endian float32 blob.
//!
//! Values are stored as f32, so a reloaded model differs from the trained
//! one by rounding only. Saving the reloaded model reproduces the files
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{read_f32_le, write_f32_le};
use crate::convnet::{ConvNetConfig, ModelParams};
use crate::error::{Error, Result};
use crate::gru::{GruConfig, GruParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `cnn` or `gru`.
    pub kind: String,
    pub config: Value,
    pub seed: u64,
    pub config_hash: String,
    pub optimizer: String,
    /// Whether optimizer moments are stored (never, currently).
    pub optimizer_state: bool,
    pub blob: String,
    pub tensors: Vec<Tensor>,
    #[serde(default)]
    pub info: BTreeMap<String, Value>,
}

/// Run metadata recorded alongside the weights.
#[derive(Debug, Clone, Default)]
pub struct SaveMeta {
    pub seed: u64,
    pub config_hash: String,
    pub info: BTreeMap<String, Value>,
}

fn tensor(name: String, shape: &[usize]) -> Tensor {
    Tensor { name, shape: shape.to_vec() }
}

fn cnn_tensors(p: &ModelParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (i, l) in p.layers.iter().enumerate() {
        out.push(tensor(format!("conv{i}.weight"), &[l.out_ch, l.in_ch, l.kernel]));
        for part in ["bias", "gamma", "beta", "running_mean", "running_var"] {
            out.push(tensor(format!("conv{i}.{part}"), &[l.out_ch]));
        }
    }
    out.push(tensor("score.weight".into(), &[1, p.config.channels]));
    out.push(tensor("score.bias".into(), &[1]));
    out
}

fn gru_tensors(p: &GruParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (i, l) in p.layers.iter().enumerate() {
        for gate in ["z", "r", "h"] {
            out.push(tensor(format!("gru{i}.w_{gate}"), &[l.hidden_size, l.input_size]));
            out.push(tensor(format!("gru{i}.u_{gate}"), &[l.hidden_size, l.hidden_size]));
            out.push(tensor(format!("gru{i}.b_{gate}"), &[l.hidden_size]));
        }
    }
    out.push(tensor("head.weight".into(), &[1, p.config.hidden_size]));
    out.push(tensor("head.bias".into(), &[1]));
    out
}

fn save(
    dir: &Path,
    stem: &str,
    kind: &str,
    config: Value,
    tensors: Vec<Tensor>,
    values: Vec<f64>,
    meta: &SaveMeta,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let blob = format!("{stem}.f32");
    write_f32_le(&dir.join(&blob), values)?;
    let manifest = Manifest {
        kind: kind.into(),
        config,
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        optimizer: "adam".into(),
        optimizer_state: false,
        blob,
        tensors,
        info: meta.info.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

fn load(json_path: &Path, kind: &str) -> Result<(Manifest, Vec<f64>)> {
    let text = fs::read_to_string(json_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { what: "model file", path: json_path.to_path_buf() },
        _ => e.into(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.kind != kind {
        return Err(Error::arg(format!("{} holds a {} model, expected {kind}", json_path.display(), manifest.kind)));
    }
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let blob_path = dir.join(&manifest.blob);
    if !blob_path.exists() {
        return Err(Error::NotFound { what: "model blob", path: blob_path });
    }
    let values = read_f32_le(&blob_path)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if values.len() != expected {
        return Err(Error::parse(format!("model blob has {} values, manifest declares {expected}", values.len())));
    }
    Ok((manifest, values))
}

pub fn save_cnn(dir: &Path, stem: &str, params: &ModelParams, meta: &SaveMeta) -> Result<PathBuf> {
    params.validate()?;
    save(dir, stem, "cnn", serde_json::to_value(&params.config)?, cnn_tensors(params), params.all_values(), meta)
}

pub fn load_cnn(json_path: &Path) -> Result<(ModelParams, Manifest)> {
    let (manifest, values) = load(json_path, "cnn")?;
    let config: ConvNetConfig = serde_json::from_value(manifest.config.clone())?;
    let mut params = ModelParams::zeros(&config)?;
    if cnn_tensors(&params) != manifest.tensors {
        return Err(Error::parse("model tensors do not match the stored configuration"));
    }
    params.set_all_values(&values)?;
    params.validate()?;
    Ok((params, manifest))
}

pub fn save_gru(dir: &Path, stem: &str, params: &GruParams, meta: &SaveMeta) -> Result<PathBuf> {
    params.validate()?;
    save(dir, stem, "gru", serde_json::to_value(&params.config)?, gru_tensors(params), params.flat(), meta)
}

pub fn load_gru(json_path: &Path) -> Result<(GruParams, Manifest)> {
    let (manifest, values) = load(json_path, "gru")?;
    let config: GruConfig = serde_json::from_value(manifest.config.clone())?;
    let mut params = GruParams::zeros(&config)?;
    if gru_tensors(&params) != manifest.tensors {
        return Err(Error::parse("model tensors do not match the stored configuration"));
    }
    params.set_flat(&values)?;
    params.validate()?;
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rounded(values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| v as f32 as f64).collect()
    }

    #[test]
    fn cnn_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(&ConvNetConfig::with_depth(4), 9).unwrap();
        let meta = SaveMeta { seed: 9, config_hash: "abc".into(), ..Default::default() };
        let path = save_cnn(dir.path(), "m", &p, &meta).unwrap();
        let (q, manifest) = load_cnn(&path).unwrap();
        assert_eq!(q.all_values(), rounded(&p.all_values()));
        assert_eq!((manifest.seed, manifest.config_hash.as_str(), manifest.optimizer.as_str()), (9, "abc", "adam"));
        assert_eq!(manifest.tensors[0].shape, vec![24, 1, 5]);

        let first = fs::read(dir.path().join("m.f32")).unwrap();
        save_cnn(dir.path(), "m", &q, &meta).unwrap();
        assert_eq!(fs::read(dir.path().join("m.f32")).unwrap(), first);
        assert!(load_gru(&path).is_err());
    }

    #[test]
    fn gru_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GruConfig { hidden_layers: 2, hidden_size: 4, ..Default::default() };
        let p = GruParams::init(&cfg, 1).unwrap();
        let path = save_gru(dir.path(), "g", &p, &SaveMeta::default()).unwrap();
        let (q, _) = load_gru(&path).unwrap();
        assert_eq!(q.flat(), rounded(&p.flat()));
        assert_eq!(q.config, cfg);
    }

    #[test]
    fn missing_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cnn(&dir.path().join("none.json")), Err(Error::NotFound { .. })));
        let p = ModelParams::init(&ConvNetConfig::default(), 1).unwrap();
        let path = save_cnn(dir.path(), "m", &p, &SaveMeta::default()).unwrap();
        let blob = dir.path().join("m.f32");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_cnn(&path), Err(Error::Parse { .. })));
        fs::remove_file(&blob).unwrap();
        assert!(matches!(load_cnn(&path), Err(Error::NotFound { .. })));
    }
}
