//! Experiment configuration: JSON schema, `key=value` overrides and dataset
//! loading.
//!
//! ```json
//! {
//!   "dataset": {"source": "synthetic", "generator": {"kind": "glyphs"}, "n_train": 2000, "n_test": 500},
//!   "model": {"kind": "mlp", "hidden": [256, 128]},
//!   "regime": "nsloss",
//!   "epochs": 15,
//!   "learning_rate": 0.05,
//!   "ns": {"eps_ns": 1.0, "lambda": 0.5},
//!   "seed": 7
//! }
//! ```
//!
//! Unknown keys are rejected. `ns`, `jacobreg` and `pgd` must be present for
//! the regimes that use them.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attribution::{Explainer, GradientShap, GradientShapConfig, IntegratedGradients};
use crate::baselines::{JacobRegConfig, PgdConfig};
use crate::data::{gen_synthetic, load_idx, Dataset, Synthetic};
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::{Architecture, ModelSpec};
use crate::nsloss::NsConfig;
use crate::tensor::Tensor;

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ENV: &str = "SENSIREG_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Standard,
    Nsloss,
    Jacobreg,
    Advtrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// IDX image/label files. Without a test pair, the last fifth of the
    /// training files is held out.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Use only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
    },
    Synthetic {
        generator: Synthetic,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetSource {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                let full = load_idx(train_images, train_labels)?;
                let (train, test) = match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => (full, load_idx(ti, tl)?),
                    (None, None) => {
                        let n_train = full.len() - full.len() / 5;
                        split(&full, n_train)?
                    }
                    _ => {
                        return Err(Error::Config(
                            "test_images and test_labels must be given together".into(),
                        ))
                    }
                };
                let train = match limit {
                    Some(n) => train.head(*n)?,
                    None => train,
                };
                let classes = train.num_classes.max(test.num_classes);
                Ok(Splits {
                    train: Dataset { num_classes: classes, ..train },
                    test: Dataset { num_classes: classes, ..test },
                })
            }
            DatasetSource::Synthetic {
                generator,
                n_train,
                n_test,
                seed,
            } => {
                let all = gen_synthetic(generator, n_train + n_test, *seed)?;
                let (train, test) = split(&all, *n_train)?;
                Ok(Splits { train, test })
            }
        }
    }
}

fn split(all: &Dataset, n_train: usize) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= all.len() {
        return Err(Error::Config(format!(
            "cannot split {} samples into a training part of {n_train} and a non-empty test part",
            all.len()
        )));
    }
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..all.len()).collect();
    let (xa, ya) = all.batch(&train_idx)?;
    let (xb, yb) = all.batch(&test_idx)?;
    Ok((
        Dataset::new(all.sample_shape.clone(), xa, ya, all.num_classes)?,
        Dataset::new(all.sample_shape.clone(), xb, yb, all.num_classes)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExplainerConfig {
    IntegratedGradients {
        #[serde(default = "default_ig_steps")]
        steps: usize,
    },
    GradientShap {
        #[serde(default = "default_shap_samples")]
        n_samples: usize,
        #[serde(default = "default_shap_sigma")]
        sigma: f64,
        /// Training samples added to the zero baseline.
        #[serde(default = "default_shap_baselines")]
        baselines: usize,
    },
}

fn default_ig_steps() -> usize {
    32
}

fn default_shap_samples() -> usize {
    50
}

fn default_shap_sigma() -> f64 {
    0.09
}

fn default_shap_baselines() -> usize {
    16
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig::IntegratedGradients {
            steps: default_ig_steps(),
        }
    }
}

impl ExplainerConfig {
    pub fn build(&self, train_inputs: &Tensor, seed: u64) -> Box<dyn Explainer> {
        match self {
            ExplainerConfig::IntegratedGradients { steps } => Box::new(IntegratedGradients { steps: *steps }),
            ExplainerConfig::GradientShap {
                n_samples,
                sigma,
                baselines,
            } => Box::new(GradientShap::with_pool(
                GradientShapConfig {
                    n_samples: *n_samples,
                    sigma: *sigma,
                },
                train_inputs,
                *baselines,
                seed,
            )),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    64
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_eval_samples() -> usize {
    100
}

fn default_snapshot_samples() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: Architecture,
    pub regime: Regime,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub ns: Option<NsConfig>,
    #[serde(default)]
    pub jacobreg: Option<JacobRegConfig>,
    #[serde(default)]
    pub pgd: Option<PgdConfig>,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub explainer: ExplainerConfig,
    /// Test samples used by `evaluate` and `sweep-lambda` metric runs.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Compute max-sensitivity, faithfulness estimate and sparseness after
    /// every epoch.
    #[serde(default)]
    pub snapshot_metrics: bool,
    #[serde(default = "default_snapshot_samples")]
    pub snapshot_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Start from these parameters instead of a fresh initialization.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON file, applies `key=value` overrides and the output
    /// directory environment variable, then validates.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(dir) = env::var_os(OUTPUT_ENV) {
            value["output_dir"] = Value::String(dir.to_string_lossy().into_owned());
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.eval_samples == 0 || self.snapshot_samples == 0 {
            return bad("batch_size, eval_samples and snapshot_samples must be at least 1".into());
        }
        let missing = |block: &str| Err(Error::Config(format!("regime {:?} needs a \"{block}\" block", self.regime)));
        match self.regime {
            Regime::Nsloss if self.ns.is_none() => return missing("ns"),
            Regime::Jacobreg if self.jacobreg.is_none() => return missing("jacobreg"),
            Regime::Advtrain if self.pgd.is_none() => return missing("pgd"),
            _ => {}
        }
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        if let Some(ns) = &self.ns {
            wrap(ns.validate())?;
        }
        if let Some(j) = &self.jacobreg {
            wrap(j.validate())?;
        }
        if let Some(p) = &self.pgd {
            wrap(p.validate())?;
        }
        wrap(self.metrics.validate())
    }

    pub fn model_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let spec = ModelSpec {
            input_shape: data.sample_shape.clone(),
            num_classes: data.num_classes,
            arch: self.model.clone(),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn ns_config(&self) -> Result<&NsConfig> {
        self.ns
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs an \"ns\" block".into()))
    }
}

/// Applies `a.b.c=value` to a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise; missing objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!(
                    "override {assignment:?}: {} is not an object",
                    parts[..i].join(".")
                )));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}
