//! Run configuration: one TOML document, unknown keys rejected, paths
//! resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{LdsConfig, DEFAULT_DAMPING_GRID};
use crate::model::{make_dataset, Dataset, DatasetKind, Loss, Mlp, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<CompressorConfig>,
    #[serde(default)]
    pub attribution: AttributionConfig,
    #[serde(default)]
    pub lds: LdsSection,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub select_mask: SelectMaskConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKindName {
    Blobs,
    Moons,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Held-out rows; defaults to a tenth of the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    2
}
fn default_classes() -> usize {
    2
}
fn default_separation() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub bias: bool,
    /// Initialization seed.
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Shuffle seed for training.
    pub train_seed: u64,
    pub weight_decay: f64,
    /// Existing checkpoint to use instead of the run directory's own.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32, 32],
            bias: true,
            seed: 0,
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            train_seed: 0,
            weight_decay: 0.0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorConfig {
    /// Flat pipeline, e.g. `mask:k=2048,seed=1+sjlt:k=512,seed=2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<String>,
    /// Per-layer spec, e.g. `factgrass:layer=*,kl=64,seed=3`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factorized: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Whole,
    Layerwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    #[default]
    Influence,
    Graddot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub mode: ModeName,
    pub method: MethodName,
    pub damping: f64,
    /// Positions among the test rows; all of them when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            mode: ModeName::Whole,
            method: MethodName::Influence,
            damping: 0.1,
            test: None,
            top_k: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorName {
    #[default]
    Influence,
    /// Uses the retrained losses themselves; a harness self-check.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdsSection {
    pub subsets: usize,
    pub fraction: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub damping_grid: Vec<f64>,
    pub null_shuffles: usize,
    pub sign: f64,
    pub predictor: PredictorName,
}

impl Default for LdsSection {
    fn default() -> Self {
        LdsSection {
            subsets: 50,
            fraction: 0.5,
            seed: 0,
            val_fraction: 0.1,
            damping_grid: DEFAULT_DAMPING_GRID.to_vec(),
            null_shuffles: 200,
            sign: -1.0,
            predictor: PredictorName::Influence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub p: usize,
    /// Any of `sjlt`, `gaussian`, `rademacher`, `fjlt`.
    pub methods: Vec<String>,
    pub ks: Vec<usize>,
    pub sparsities: Vec<usize>,
    pub nnz_fraction: f64,
    pub trials: usize,
    pub seed: u64,
    /// Factorized specs compared layer by layer on real traces.
    pub factorized: Vec<String>,
    pub samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            p: 4096,
            methods: vec!["sjlt".into(), "gaussian".into(), "fjlt".into()],
            ks: vec![256],
            sparsities: vec![1],
            nnz_fraction: 1.0,
            trials: 10,
            seed: 0,
            factorized: Vec::new(),
            samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectMaskConfig {
    /// Mask size k'; for a factorized layer, `k_in * k_out` unless those
    /// are given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Learn factor masks for this linear layer instead of a flat mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_out: Option<usize>,
    pub lambda: f64,
    pub steps: usize,
    pub step_size: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for SelectMaskConfig {
    fn default() -> Self {
        SelectMaskConfig {
            k: None,
            layer: None,
            k_in: None,
            k_out: None,
            lambda: 0.01,
            steps: 500,
            step_size: 0.1,
            t_start: 1.0,
            t_end: 0.1,
            train_samples: 64,
            test_samples: 16,
            seed: 0,
        }
    }
}

/// Applies `section.key=value` overrides; values parse as TOML, falling
/// back to a plain string.
fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut *doc;
        for part in path {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
        }
        table.insert(last.to_string(), value);
    }
    Ok(())
}

fn resolve_path(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies overrides and resolves relative paths
    /// against `base`.
    pub fn parse(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        resolve_path(base, &mut cfg.dataset.images);
        resolve_path(base, &mut cfg.dataset.labels);
        resolve_path(base, &mut cfg.model.checkpoint);
        if let Some(c) = &mut cfg.compressor {
            // An empty override clears the key.
            c.spec = c.spec.take().filter(|s| !s.is_empty());
            c.factorized = c.factorized.take().filter(|s| !s.is_empty());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let abs = std::env::current_dir().map_err(|e| Error::io(path, e))?.join(path);
        let base = abs.parent().unwrap_or(Path::new("/"));
        Self::parse(&text, overrides, base)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.kind == DatasetKindName::Idx {
            for (key, p) in [("dataset.images", &d.images), ("dataset.labels", &d.labels)] {
                match p {
                    None => return Err(Error::Config(format!("{key} is required for kind = \"idx\""))),
                    Some(p) if !p.is_file() => {
                        return Err(Error::Config(format!("{key}: file {} not found", p.display())))
                    }
                    _ => {}
                }
            }
        } else if d.n.is_none() {
            return Err(Error::Config("dataset.n is required for generated datasets".into()));
        }
        if let Some(c) = &self.compressor {
            if c.spec.is_some() == c.factorized.is_some() {
                return Err(Error::Config(
                    "compressor needs exactly one of compressor.spec and compressor.factorized".into(),
                ));
            }
            if self.attribution.mode == ModeName::Layerwise && c.factorized.is_none() {
                return Err(Error::Config(
                    "attribution.mode = \"layerwise\" needs compressor.factorized".into(),
                ));
            }
        }
        if let Some(p) = &self.model.checkpoint {
            if !p.is_file() {
                return Err(Error::Config(format!("model.checkpoint: file {} not found", p.display())));
            }
        }
        for m in &self.bench.methods {
            if !matches!(m.as_str(), "sjlt" | "gaussian" | "rademacher" | "fjlt") {
                return Err(Error::Config(format!("bench.methods: unknown method `{m}`")));
            }
        }
        self.lds_config().validate().map_err(|e| Error::Config(format!("lds: {e}")))
    }

    /// Canonical serialized form; what the sidecar holds and the hash covers.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        let kind = match d.kind {
            DatasetKindName::Blobs => DatasetKind::GaussianBlobs {
                n: d.n.unwrap_or_default(),
                dim: d.dim,
                classes: d.classes,
                separation: d.separation,
                noise: d.noise,
            },
            DatasetKindName::Moons => DatasetKind::TwoMoons {
                n: d.n.unwrap_or_default(),
                noise: d.noise,
            },
            DatasetKindName::Idx => DatasetKind::Idx {
                images: d.images.clone().unwrap_or_default(),
                labels: d.labels.clone().unwrap_or_default(),
                limit: d.limit.or(d.n),
            },
        };
        let data = make_dataset(&kind, d.seed)?;
        let test = d.test.unwrap_or((data.n / 10).max(1));
        data.with_test_split(test, d.seed)
    }

    pub fn init_model(&self, data: &Dataset) -> Result<Mlp> {
        let mut dims = vec![data.dim];
        dims.extend(&self.model.hidden);
        dims.push(data.classes);
        Mlp::new(&dims, self.model.bias, self.model.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.model.epochs,
            lr: self.model.lr,
            batch_size: self.model.batch_size,
            seed: self.model.train_seed,
            loss: Loss::CrossEntropy,
            weight_decay: self.model.weight_decay,
        }
    }

    pub fn lds_config(&self) -> LdsConfig {
        let l = &self.lds;
        LdsConfig {
            subsets: l.subsets,
            fraction: l.fraction,
            train: self.train_config(),
            seed: l.seed,
            val_fraction: l.val_fraction,
            damping_grid: l.damping_grid.clone(),
            null_shuffles: l.null_shuffles,
            sign: l.sign,
        }
    }
}
