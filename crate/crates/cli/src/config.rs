//! Run configs: JSON files overlaid with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use mtlsent::combiner::Pooling;
use mtlsent::eval::{ClassifierConfig, PoolConfig, SimilarityMode};
use mtlsent::multitask::{ModelConfig, TaskKind, TrainConfig};
use mtlsent::text::Schema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Reads `path` (if any) as a JSON object and overlays the non-null fields
/// of `flags` on top, one level deep for nested objects.
pub fn resolve<T: DeserializeOwned>(path: Option<&Path>, flags: Value) -> Result<T, CliError> {
    let mut base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config("config", format!("{}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| CliError::config("config", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    let Value::Object(obj) = &mut base else {
        return Err(CliError::config("config", "top level must be a JSON object"));
    };
    if let Value::Object(f) = flags {
        overlay(obj, f);
    }
    serde_json::from_value(base).map_err(|e| CliError::config("config", e.to_string()))
}

fn overlay(dst: &mut Map<String, Value>, src: Map<String, Value>) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (_, Value::Null) => {}
            (Some(Value::Object(d)), Value::Object(s)) => overlay(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// SHA-256 of the config's JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Directory that relative config paths are resolved against.
pub fn base_dir(config: Option<&Path>) -> PathBuf {
    config
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Resolves `p` against `base` and fails with the field name when the file
/// does not exist.
pub fn existing(base: &Path, p: &Path, field: &str) -> Result<PathBuf, CliError> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.exists() {
        return Err(CliError::config(field, format!("no such file: {}", full.display())));
    }
    Ok(full)
}

pub fn required<T: Clone>(v: &Option<T>, field: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::config(field, "required"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFiles {
    pub name: String,
    #[serde(default = "single")]
    pub kind: TaskKind,
    pub num_classes: usize,
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

fn single() -> TaskKind {
    TaskKind::Single
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub word_vectors: Option<PathBuf>,
    pub word_dim: Option<usize>,
    #[serde(default)]
    pub tasks: Vec<TaskFiles>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Named β/γ setting applied before explicit `beta`/`gamma` values.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRun {
    pub bundle: Option<PathBuf>,
    /// Plain text, one sentence per line.
    pub input: Option<PathBuf>,
    /// Dataset TSV whose sentence column is embedded instead of `input`.
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<Schema>,
    /// 1 or 2: which sentence column of `dataset`.
    #[serde(default)]
    pub column: Option<usize>,
    pub mode: Option<String>,
    pub word_vectors: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombineRun {
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub normalize: bool,
    /// Pooling applied to contextual-vector inputs.
    #[serde(default)]
    pub pool: Pooling,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// Where a split's sentence embeddings come from when no bundle is used.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCaches {
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub dev: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    #[default]
    Logreg,
    Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub name: String,
    #[serde(default = "schema_single")]
    pub schema: Schema,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    pub test: PathBuf,
    /// Precomputed caches, one per sentence column, instead of the bundle.
    #[serde(default)]
    pub embeddings: Option<SplitCaches>,
    #[serde(default)]
    pub probe: Probe,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub report_f1: bool,
    #[serde(default)]
    pub similarity: SimilarityMode,
}

fn schema_single() -> Schema {
    Schema::Single
}

fn default_hidden() -> usize {
    512
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    #[serde(default)]
    pub bundle: Option<PathBuf>,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub word_vectors: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub tasks: Vec<EvalTask>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    /// Training-set sizes for `curve`.
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_batch() -> usize {
    128
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSet {
    /// Task whose private encoder embeds this set in `private` probes.
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "schema_single")]
    pub schema: Schema,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeEncoder {
    #[default]
    Shared,
    Private,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRun {
    #[serde(default)]
    pub bundle: Option<PathBuf>,
    #[serde(default)]
    pub encoder: ProbeEncoder,
    #[serde(default)]
    pub word_vectors: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub sets: Vec<ProbeSet>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolInput {
    pub name: String,
    pub embeddings: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeRun {
    /// Labeled single-sentence dataset aligned with every cache.
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub encoders: Vec<PoolInput>,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    #[serde(default = "default_tasks")]
    pub tasks: Vec<String>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "one")]
    pub shared_signal_weight: f64,
    #[serde(default = "one")]
    pub private_signal_weight: f64,
    #[serde(default = "default_dim")]
    pub word_dim: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn default_tasks() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

fn default_n() -> usize {
    1000
}

fn default_classes() -> usize {
    2
}

fn one() -> f64 {
    1.0
}

fn default_dim() -> usize {
    16
}
