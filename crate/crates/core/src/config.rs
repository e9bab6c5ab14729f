//! Pipeline configuration: one JSON document with a section per stage.
//!
//! Unknown keys are rejected at every level. Command-line overrides use
//! dotted paths (`train.steps=1000`, `eval.trees.rounds=50`) and are applied
//! to the JSON tree before it is deserialized, so they obey the same rules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::downstream::{EvalSettings, MlpConfig};
use crate::metrics::{MetricSettings, DEFAULT_BINS, OMES_ALPHA, PRUNE_THRESHOLD};
use crate::nn::AdamConfig;
use crate::synthgen::DatasetScale;
use crate::trees::GbtConfig;
use crate::vae::{FinetuneConfig, Objective, TrainConfig, PROTOCOL_BETAS, PROTOCOL_SEEDS};
use crate::{Error, Result};

/// Environment variable naming the data root.
pub const DATA_ENV: &str = "DISENTLAB_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub scale: DatasetScale,
    pub freeze: Vec<String>,
    /// Maximum number of images to render.
    pub budget: usize,
    /// Fraction of rows marked as test in the manifest.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            scale: DatasetScale::Desk,
            freeze: vec!["PosX".into(), "PosY".into()],
            budget: 1_000_000,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub image_side: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            image_side: 224,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    pub objective: Objective,
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch: usize,
    pub k: usize,
    pub latent: usize,
    pub hidden: Option<Vec<usize>>,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            seeds: PROTOCOL_SEEDS.to_vec(),
            betas: PROTOCOL_BETAS.to_vec(),
            objective: Objective::Ada,
            steps: t.steps,
            warmup_steps: t.warmup_steps,
            batch: t.batch,
            k: t.k,
            latent: t.latent,
            hidden: t.hidden,
            adam: t.adam,
        }
    }
}

impl TrainSection {
    /// Training settings for one ensemble member.
    pub fn member(&self, seed: u64, beta: f64) -> TrainConfig {
        TrainConfig {
            beta,
            steps: self.steps,
            batch: self.batch,
            warmup_steps: self.warmup_steps,
            adam: self.adam,
            seed,
            k: self.k,
            latent: self.latent,
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bins: usize,
    pub omes_alpha: f64,
    pub prune_threshold: f64,
    pub trees: GbtConfig,
    pub mlp: MlpConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            omes_alpha: OMES_ALPHA,
            prune_threshold: PRUNE_THRESHOLD,
            trees: GbtConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

impl EvalSection {
    pub fn metrics(&self) -> MetricSettings {
        MetricSettings {
            bins: self.bins,
            omes_alpha: self.omes_alpha,
            trees: self.trees,
        }
    }

    pub fn downstream(&self) -> EvalSettings {
        EvalSettings {
            prune_threshold: self.prune_threshold,
            trees: self.trees,
            mlp: self.mlp.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Base for relative data paths; falls back to the environment variable
    /// `DISENTLAB_DATA`, then the working directory.
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub generate: GenerateSection,
    pub ingest: IngestSection,
    pub train: TrainSection,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let defaults = serde_json::to_value(PipelineConfig::default())?;
    let mut known = &defaults;
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let fields = known.as_object().ok_or_else(|| Error::invalid(format!("unknown config key `{key}`")))?;
        known = fields.get(*part).ok_or_else(|| Error::invalid(format!("unknown config key `{key}`")))?;
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("config key `{key}` crosses a non-object value")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::invalid("empty config key"))
}

impl PipelineConfig {
    /// Reads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for (k, v) in overrides {
            set_path(&mut root, k, parse_value(v))?;
        }
        let config: Self = serde_json::from_value(root).map_err(|e| Error::invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.member(0, 1.0).validate()?;
        self.eval.trees.validate()?;
        if self.train.seeds.is_empty() || self.train.betas.is_empty() {
            return Err(Error::invalid("train.seeds and train.betas must be non-empty"));
        }
        for (name, f) in [("generate.test_fraction", self.generate.test_fraction), ("ingest.test_fraction", self.ingest.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        if self.eval.bins < 2 {
            return Err(Error::invalid("eval.bins must be at least 2"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Resolves a data path against the configured or environment data root.
    pub fn data_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match self.paths.data_root.clone().or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from)) {
            Some(root) => root.join(p),
            None => p.to_path_buf(),
        }
    }
}

/// Envelope written around every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub config: PipelineConfig,
}

impl Provenance {
    pub fn of(config: &PipelineConfig) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
        }
    }
}
