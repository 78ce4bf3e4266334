//! Experiment config file: schema, overrides, and the content hash that
//! ties every artifact back to the exact settings that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hashkit::backbone::BackboneConfig;
use hashkit::data::{DatasetProtocol, ProtocolKind, SyntheticConfig};
use hashkit::head::HashHeadConfig;
use hashkit::loss::LossConfig;
use hashkit::trainer::{Preprocess, TrainConfig};
use hashkit::types::SplitSpec;

use crate::error::{usage, CliError};

/// Where the images come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSection {
    Synthetic(SyntheticConfig),
    Manifest(ManifestSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSpec {
    pub path: String,
}

/// Split protocol: a named preset or an explicit custom plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default)]
    pub protocol: Option<String>,
    #[serde(default)]
    pub custom: Option<ProtocolKind>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSection {
    pub fn resolve(&self) -> Result<DatasetProtocol, CliError> {
        match (&self.protocol, &self.custom) {
            (Some(name), None) => DatasetProtocol::preset(name).ok_or_else(|| {
                usage(format!(
                    "[split] unknown protocol preset {name:?}; presets: cifar10, nuswide, coco, imagenet"
                ))
            }),
            (None, Some(kind)) => Ok(DatasetProtocol {
                name: "custom".into(),
                kind: kind.clone(),
            }),
            (Some(_), Some(_)) => Err(usage("[split] give either protocol or custom, not both")),
            (None, None) => Err(usage("[split] needs a protocol preset or a custom block")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// ranking depth of the mAP measurement
    pub map_k: usize,
    /// default result count for retrieval
    pub top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { map_k: 50, top_k: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: Option<SplitSection>,
    pub backbone: BackboneConfig,
    pub head: HashHeadConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// default output root; --out and then this, then the environment
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.dataset {
            DatasetSection::Synthetic(s) => {
                s.validate()
                    .map_err(|e| usage(format!("[dataset.synthetic] {e}")))?;
                let (h, w) = self.backbone.input_size;
                if (s.side, s.side) != (h, w) {
                    return Err(usage(format!(
                        "[dataset.synthetic] side {} does not match backbone input {h}x{w}",
                        s.side
                    )));
                }
            }
            DatasetSection::Manifest(m) => {
                if m.path.is_empty() {
                    return Err(usage("[dataset.manifest] path must not be empty"));
                }
            }
        }
        if let Some(split) = &self.split {
            split.resolve()?;
        }
        self.backbone
            .validate()
            .map_err(|e| usage(format!("[backbone] {e}")))?;
        self.head
            .validate()
            .map_err(|e| usage(format!("[head] {e}")))?;
        self.loss
            .validate()
            .map_err(|e| usage(format!("[loss] {e}")))?;
        self.train
            .validate()
            .map_err(|e| usage(format!("[train] {e}")))?;
        self.preprocess
            .validate()
            .map_err(|e| usage(format!("[preprocess] {e}")))?;
        if self.eval.map_k == 0 || self.eval.top_k == 0 {
            return Err(usage("[eval] map_k and top_k must be positive"));
        }
        Ok(())
    }
}

/// Parsed config plus its content hash and the overrides that shaped it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
    pub overrides: Vec<String>,
}

/// SHA-256 of the canonical JSON form of the effective config. Overrides
/// land before hashing, so the hash identifies what actually ran.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(table) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override {spec:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(usage(format!("override {spec:?} has an empty key")));
    }
    let value = parse_override_value(raw.trim());
    let parts: Vec<&str> = path.split('.').collect();
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| usage(format!("override {path:?}: {part:?} is not a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let last = parts[parts.len() - 1];
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| usage(format!("override {path:?}: parent of {last:?} is not a table")))?;
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads, overrides, validates, and hashes a config file. `seed_override`
/// maps the --seed flag onto a command-specific config key.
pub fn load_config(
    path: &Path,
    seed_override: Option<(&'static str, u64)>,
    overrides: &[String],
) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let mut applied: Vec<String> = overrides.to_vec();
    if let Some((key, seed)) = seed_override {
        applied.push(format!("{key}={seed}"));
    }
    for spec in &applied {
        apply_override(&mut value, spec)?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    config.validate()?;
    let hash = config_hash(&config);
    Ok(LoadedConfig {
        config,
        hash,
        overrides: applied,
    })
}

/// Metadata string stored inside every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub run: usize,
    pub run_seed: u64,
    pub config: ExperimentConfig,
}

/// First line of every training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogHeader {
    pub config_hash: String,
    pub run: usize,
    pub run_seed: u64,
    pub overrides: Vec<String>,
}

/// Sidecar written next to every encoded database.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbMeta {
    pub config_hash: String,
    pub run: usize,
    pub run_seed: u64,
    pub dataset: String,
    pub loss: String,
    pub backbone_width: usize,
    pub bits: usize,
    pub map_k: usize,
    pub part: String,
    pub count: usize,
}

/// Split file written by the split command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub config_hash: String,
    pub protocol: String,
    pub seed: u64,
    pub retained_classes: Option<Vec<u32>>,
    pub retained_tags: Option<Vec<u32>>,
    pub split: SplitSpec,
}

/// Short name for the dataset, used in report rows.
pub fn dataset_name(config: &ExperimentConfig) -> String {
    match &config.dataset {
        DatasetSection::Synthetic(_) => "synthetic".into(),
        DatasetSection::Manifest(m) => Path::new(&m.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| m.path.clone()),
    }
}
