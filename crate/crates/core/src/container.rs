//! Portable record container: `<name>.json` metadata next to a raw
//! little-endian float32 signal file `<name>.f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wfdb::{Annotation, EcgRecord, Provenance};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationEntry {
    index: usize,
    code: char,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerMeta {
    name: String,
    fs: f64,
    n_samples: usize,
    signal_file: String,
    annotations: Vec<AnnotationEntry>,
    source: Provenance,
}

pub fn write_f32_le(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { what: "float32 blob", path: path.into() },
        _ => Error::Io(e),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect())
}

/// Writes the container and returns the path of its JSON file.
pub fn write_container(dir: &Path, record: &EcgRecord) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let signal_file = format!("{}.f32", record.name);
    let meta = ContainerMeta {
        name: record.name.clone(),
        fs: record.fs,
        n_samples: record.signal.len(),
        signal_file: signal_file.clone(),
        annotations: record
            .annotations
            .iter()
            .map(|a| AnnotationEntry { index: a.sample_index, code: a.beat_code })
            .collect(),
        source: record.source.clone(),
    };
    write_f32_le(&dir.join(&signal_file), record.signal.iter().copied())?;
    let json_path = dir.join(format!("{}.json", record.name));
    fs::write(&json_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(json_path)
}

pub fn read_container(json_path: &Path) -> Result<EcgRecord> {
    let text = fs::read_to_string(json_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { what: "record container", path: json_path.into() },
        _ => Error::Io(e),
    })?;
    let meta: ContainerMeta = serde_json::from_str(&text)?;
    let dir = json_path.parent().unwrap_or(Path::new(""));
    let signal = read_f32_le(&dir.join(&meta.signal_file))?;
    if signal.len() != meta.n_samples {
        return Err(Error::parse(format!(
            "{}: expected {} samples, signal file has {}",
            json_path.display(),
            meta.n_samples,
            signal.len()
        )));
    }
    if let Some(a) = meta.annotations.iter().find(|a| a.index >= meta.n_samples) {
        return Err(Error::parse(format!("annotation at {} beyond {} samples", a.index, meta.n_samples)));
    }
    Ok(EcgRecord {
        name: meta.name,
        fs: meta.fs,
        signal,
        annotations: meta.annotations.into_iter().map(|a| Annotation::new(a.index, a.code)).collect(),
        source: meta.source,
    })
}

/// Every container in `dir` (any `.json` file except `manifest.json`),
/// sorted by file name.
pub fn read_container_dir(dir: &Path) -> Result<Vec<EcgRecord>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { what: "data directory", path: dir.into() },
        _ => Error::Io(e),
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") && path.file_name().is_some_and(|n| n != "manifest.json") {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| read_container(p)).collect()
}
