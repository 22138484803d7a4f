//! Run configuration: JSON file merged over built-in defaults, then
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use qrs_core::convnet::ConvNetConfig;
use qrs_core::eval::EvalOptions;
use qrs_core::gru::GruConfig;
use qrs_core::preprocess::DEFAULT_LABEL_HALF_WIDTH;
use qrs_core::synth::{CorruptionSpec, SynthSpec};
use qrs_core::train::{derive_seed, TrainConfig};
use qrs_core::wfdb::DEFAULT_BEAT_CODES;
use qrs_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Drives every random stream; nested `seed` fields are overwritten.
    pub seed: u64,
    pub paths: Paths,
    pub beat_codes: String,
    pub label_half_width: usize,
    pub convnet: ConvNetConfig,
    pub train_cnn: TrainConfig,
    pub train_gru: TrainConfig,
    pub gru: GruConfig,
    /// Which CNN fold model produces the GRU training streams.
    pub cnn_fold: usize,
    pub corruption: CorruptionSpec,
    pub synth: SynthSpec,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            beat_codes: DEFAULT_BEAT_CODES.into(),
            label_half_width: DEFAULT_LABEL_HALF_WIDTH,
            convnet: ConvNetConfig::default(),
            train_cnn: TrainConfig::cnn(),
            train_gru: TrainConfig::gru(),
            gru: GruConfig::default(),
            cnn_fold: 0,
            corruption: CorruptionSpec::default(),
            synth: SynthSpec::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Overlays `patch` onto `base`. Every key in `patch` must already exist in
/// `base`, so typos fail loudly instead of being ignored.
fn merge(base: &mut Value, patch: Value, at: &str) -> Result<(), Error> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| Error::Argument(format!("unknown config key '{key}'")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::NotFound { what: "config file", path: path.into() },
                _ => e.into(),
            })?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&cfg)?;
            merge(&mut merged, patch, "")?;
            cfg = serde_json::from_value(merged).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        }
        Ok(cfg)
    }

    /// Pushes the top-level seed into every component and validates.
    pub fn finalize(mut self) -> Result<Self, Error> {
        self.train_cnn.seed = self.seed;
        self.train_gru.seed = derive_seed(self.seed, 1);
        self.synth.seed = self.seed;
        self.corruption.seed = derive_seed(self.seed, 2);
        self.convnet.validate()?;
        self.train_cnn.validate()?;
        self.train_gru.validate()?;
        self.gru.validate()?;
        self.corruption.validate()?;
        self.synth.validate()?;
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
