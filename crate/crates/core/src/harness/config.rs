//! Experiment configuration files.
//!
//! A config is one TOML document. Its sections fill the library's own
//! configuration types, and an optional `[sweep]` table maps documented
//! keys to arrays of values. The experiment is the Cartesian product of
//! those arrays, enumerated with the lexicographically last key varying
//! fastest. Unknown keys anywhere are errors.
//!
//! ```toml
//! name = "batch"
//! seed = 7
//!
//! [dataset]
//! kind = "synthetic"
//! shape = [1, 12, 12]
//! num_classes = 4
//! per_class = 4
//!
//! [federation]
//! num_clients = 4
//!
//! [campaign]
//! images_per_cell = 2
//!
//! [sweep]
//! batch_size = [1, 2]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::ColumnSpec;
use crate::error::{Error, Result};
use crate::fl::FederationConfig;
use crate::model::Architecture;
use crate::tensor::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default)]
        limit: Option<usize>,
        /// Bilinear resampling to `[height, width]`.
        #[serde(default)]
        resize: Option<[usize; 2]>,
    },
    Synthetic {
        shape: Vec<usize>,
        num_classes: usize,
        per_class: usize,
        /// Identifies the generated corpus; independent of the run seed.
        #[serde(default)]
        corpus_seed: u64,
        #[serde(default)]
        resize: Option<[usize; 2]>,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        schema: Vec<ColumnSpec>,
    },
}

impl DatasetConfig {
    pub fn resize(&self) -> Option<[usize; 2]> {
        match self {
            DatasetConfig::Mnist { resize, .. } | DatasetConfig::Synthetic { resize, .. } => *resize,
            DatasetConfig::Csv { .. } => None,
        }
    }

    /// Relative file paths are taken relative to `base`.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::Mnist { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DatasetConfig::Csv { path, .. } => fix(path),
            DatasetConfig::Synthetic { .. } => {}
        }
    }
}

/// Input shape and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Defaults to LeNet for images and a one-hidden-layer MLP for vectors.
    pub architecture: Option<Architecture>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub filter_multiplier: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: None,
            activation: Activation::Sigmoid,
            dropout_rate: 0.0,
            filter_multiplier: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Shuffle with the run seed, then deal contiguous shards.
    #[default]
    Iid,
    /// Deal contiguous shards in file order.
    Sequential,
    /// Sort by label first, so each shard covers one or two classes.
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    /// Clients `0..images_per_cell` are the attack targets.
    pub images_per_cell: usize,
    pub seeds_per_image: usize,
    /// Round whose updates are intercepted; earlier rounds train normally.
    pub attack_round: usize,
    pub partition: Partition,
    /// A converged attack also counts towards `asr_quality` when its
    /// reconstruction MSE is at most this.
    pub quality_mse: f64,
    /// Worker threads; 0 uses one per core. Never changes results.
    pub workers: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            images_per_cell: 1,
            seeds_per_image: 1,
            attack_round: 1,
            partition: Partition::Iid,
            quality_mse: 1e-3,
            workers: 0,
        }
    }
}

/// Fully resolved configuration of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    #[serde(default)]
    pub name: String,
    /// Master seed. Model initialization, partitioning, client selection,
    /// noise and attack seeds all derive from it.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub campaign: CampaignConfig,
}

/// Sweepable keys and where they land in the document.
pub const SWEEP_KEYS: &[(&str, &[&str])] = &[
    ("activation", &["model", "activation"]),
    ("alpha", &["attack", "alpha"]),
    ("attack_round", &["campaign", "attack_round"]),
    ("batch_size", &["federation", "batch_size"]),
    ("client_lr", &["federation", "client_lr"]),
    ("compression", &["federation", "compression"]),
    ("distance", &["attack", "distance"]),
    ("dropout_rate", &["model", "dropout_rate"]),
    ("filter_multiplier", &["model", "filter_multiplier"]),
    ("init", &["attack", "init"]),
    ("local_iterations", &["federation", "local_iterations"]),
    ("loss_threshold", &["attack", "loss_threshold"]),
    ("max_iterations", &["attack", "max_iterations"]),
    ("noise", &["federation", "noise"]),
    ("optimizer", &["attack", "optimizer"]),
    ("participation_fraction", &["federation", "participation_fraction"]),
    ("resize", &["dataset", "resize"]),
    ("seed", &["seed"]),
    ("update_kind", &["federation", "update_kind"]),
];

/// Seeds that would silently be replaced by derived ones.
const DERIVED_SEEDS: &[&[&str]] = &[&["federation", "seed"], &["federation", "noise", "seed"], &["attack", "seed"]];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    base: toml::Table,
    sweep: Vec<(String, Vec<toml::Value>)>,
    base_dir: PathBuf,
}

fn lookup<'a>(table: &'a toml::Table, path: &[&str]) -> Option<&'a toml::Value> {
    let (last, init) = path.split_last()?;
    let mut t = table;
    for key in init {
        t = t.get(*key)?.as_table()?;
    }
    t.get(*last)
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, init) = path.split_last().expect("sweep paths are non-empty");
    let mut t = table;
    for key in init {
        t = t
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{key}` must be a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut base: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for path in DERIVED_SEEDS {
            if lookup(&base, path).is_some() {
                return Err(Error::config(format!(
                    "`{}` is derived from the top-level seed and cannot be set",
                    path.join(".")
                )));
            }
        }
        let mut sweep = Vec::new();
        if let Some(v) = base.remove("sweep") {
            let table = v.as_table().ok_or_else(|| Error::config("`sweep` must be a table"))?;
            for (key, values) in table {
                if !SWEEP_KEYS.iter().any(|(k, _)| k == key) {
                    return Err(Error::config(format!("unknown sweep key `{key}`")));
                }
                let values = values
                    .as_array()
                    .ok_or_else(|| Error::config(format!("sweep `{key}` must be an array")))?;
                if values.is_empty() {
                    return Err(Error::config(format!("sweep `{key}` is empty")));
                }
                sweep.push((key.clone(), values.clone()));
            }
        }
        let cfg = ExperimentConfig {
            base,
            sweep,
            base_dir: base_dir.to_path_buf(),
        };
        // Every cell must deserialize; semantic validation happens per cell.
        for i in 0..cfg.cell_count() {
            cfg.cell(i)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Replaces the master seed. A swept seed still takes precedence.
    pub fn set_seed(&mut self, seed: u64) {
        self.base.insert("seed".into(), toml::Value::Integer(seed as i64));
    }

    pub fn set_output_dir(&mut self, dir: &Path) {
        self.base
            .insert("output_dir".into(), toml::Value::String(dir.display().to_string()));
    }

    pub fn cell_count(&self) -> usize {
        self.sweep.iter().map(|(_, v)| v.len()).product()
    }

    /// Swept key-value pairs of cell `index`, in key order.
    pub fn cell_assignment(&self, index: usize) -> Vec<(String, toml::Value)> {
        let mut rest = index;
        let mut out = vec![];
        for (key, values) in self.sweep.iter().rev() {
            out.push((key.clone(), values[rest % values.len()].clone()));
            rest /= values.len();
        }
        out.reverse();
        out
    }

    pub fn cell(&self, index: usize) -> Result<CellConfig> {
        if index >= self.cell_count() {
            return Err(Error::config(format!("cell {index} out of range")));
        }
        let mut table = self.base.clone();
        for (key, value) in self.cell_assignment(index) {
            let path = SWEEP_KEYS.iter().find(|(k, _)| *k == key).expect("checked at parse").1;
            set_path(&mut table, path, value)?;
        }
        let mut cell: CellConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("cell {index}: {e}")))?;
        cell.dataset.resolve(&self.base_dir);
        Ok(cell)
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        lookup(&self.base, &["output_dir"])
            .and_then(|v| v.as_str())
            .map(|s| self.base_dir.join(s))
    }

    /// SHA-256 of the canonical re-serialization, sweep included.
    pub fn hash(&self) -> String {
        let mut doc = self.base.clone();
        doc.remove("output_dir");
        let sweep: toml::Table = self
            .sweep
            .iter()
            .map(|(k, v)| (k.clone(), toml::Value::Array(v.clone())))
            .collect();
        doc.insert("sweep".into(), toml::Value::Table(sweep));
        let canonical = toml::to_string(&doc).expect("tables serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn sweep_keys(&self) -> Vec<String> {
        self.sweep.iter().map(|(k, _)| k.clone()).collect()
    }
}

/// Compact inline rendering of a swept value, for row labels.
pub fn render_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Table(t) => {
            let parts: BTreeMap<&String, String> = t.iter().map(|(k, v)| (k, render_value(v))).collect();
            let inner: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("{{{}}}", inner.join(","))
        }
        toml::Value::Array(a) => format!("[{}]", a.iter().map(render_value).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
