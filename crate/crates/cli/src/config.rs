//! Run configuration files: a JSON document over the core training,
//! model and evaluation settings plus file locations.

use std::fs;
use std::path::{Path, PathBuf};

use protoshift::model::ModelConfig;
use protoshift::synth::{EDGES_FILE, MANIFEST_FILE, VECTORS_FILE};
use protoshift::trainer::{EvalConfig, TrainConfig};
use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "PROTO_SHIFT_SEED";

/// Every field is optional; missing ones take the documented defaults.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Benchmark directory holding `manifest.json`, `edges.tsv` and `vectors.txt`.
    #[serde(default = "default_data")]
    pub data: PathBuf,
    /// Overrides for individual files; default to the names above inside `data`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub edges: Option<PathBuf>,
    #[serde(default)]
    pub vectors: Option<PathBuf>,
    /// Directory for checkpoints, logs and tables.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Sets both the training and the evaluation seed when present.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Named base schedule (`desk`, `office-home`, `mini-imagenet`) that
    /// `train` entries are layered on.
    #[serde(default)]
    pub train_preset: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_data() -> PathBuf {
    PathBuf::from("bench")
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl RunConfig {
    /// Parses a config document. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        if let Some(preset) = obj.get("train_preset").and_then(Value::as_str) {
            let base_train = TrainConfig::preset(preset)
                .ok_or_else(|| CliError::Config(format!("unknown train_preset {preset:?}")))?;
            let mut merged = serde_json::to_value(base_train).expect("serializable");
            if let Some(Value::Object(over)) = obj.get("train") {
                let target = merged.as_object_mut().expect("object");
                for (k, v) in over {
                    target.insert(k.clone(), v.clone());
                }
            }
            obj.insert("train".into(), merged);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        for p in [&mut cfg.data, &mut cfg.output] {
            *p = resolve(base, p);
        }
        for p in [&mut cfg.manifest, &mut cfg.edges, &mut cfg.vectors].into_iter().flatten() {
            *p = resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data.join(MANIFEST_FILE))
    }

    pub fn edges_path(&self) -> PathBuf {
        self.edges.clone().unwrap_or_else(|| self.data.join(EDGES_FILE))
    }

    pub fn vectors_path(&self) -> PathBuf {
        self.vectors.clone().unwrap_or_else(|| self.data.join(VECTORS_FILE))
    }

    /// Applies the seed precedence (flag, file, environment) to train and eval.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        let seed = match (flag, self.seed) {
            (Some(s), _) | (None, Some(s)) => Some(s),
            (None, None) => env_seed()?,
        };
        if let Some(s) = seed {
            self.seed = Some(s);
            self.train.seed = s;
            self.eval.seed = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.n_way < 2 || self.eval.k_shot == 0 || self.eval.n_query == 0 || self.eval.episodes == 0 {
            return Err(CliError::Config(
                "eval needs n_way >= 2 and positive k_shot, n_query and episodes".into(),
            ));
        }
        if self.eval.workers == 0 {
            return Err(CliError::Config("eval.workers must be at least 1".into()));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
