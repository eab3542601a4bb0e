//! Flat run configuration for the training subcommands.
//!
//! Values resolve in three layers: compiled-in defaults, then the JSON
//! config file, then command-line overrides (`--seed` and repeated
//! `--set KEY=VALUE`). The fully resolved struct is echoed into the run
//! directory as `config.json`, so a run can be replayed from that file
//! alone. Unknown keys are rejected rather than silently dropped.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ealign::data::{load_csv_dataset, make_long_tailed, GaussianMixture, LabeledDataset, Split};
use ealign::harness::{CilConfig, EaParams, LtConfig, ModelSpec};
use ealign::model::Head;
use ealign::training::SgdConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

// Synthetic draws use fixed sub-seeds so that train and test never share a
// sample stream; `data_seed` moves the mixture itself and the tail profile.
const TRAIN_DRAW: u64 = 1;
const TEST_DRAW: u64 = 2;

/// Long-tailed run. The defaults are the stock synthetic experiment: ten
/// Gaussian classes whose training counts ramp 100:1 from head to tail,
/// evaluated on a balanced test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtRunConfig {
    pub mode: String,
    pub seed: u64,
    pub data_seed: u64,
    pub classes: usize,
    pub feature_dim: usize,
    pub mean_spread: f64,
    pub within_sigma: f64,
    pub train_per_class: usize,
    pub imbalance_ratio: f64,
    pub test_per_class: usize,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub hidden_dims: Vec<usize>,
    pub head: Head,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ea_per_class: usize,
    pub ea_jitter_scale: f64,
    pub ea_replication: usize,
    pub candidate_clusters: Vec<usize>,
}

impl Default for LtRunConfig {
    fn default() -> Self {
        Self {
            mode: String::new(),
            seed: 2,
            data_seed: 2,
            classes: 10,
            feature_dim: 16,
            mean_spread: 0.8,
            within_sigma: 1.0,
            train_per_class: 500,
            imbalance_ratio: 100.0,
            test_per_class: 50,
            train_csv: None,
            test_csv: None,
            hidden_dims: Vec::new(),
            head: Head::Affine,
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 32,
            momentum: 0.9,
            // Strong enough to stop the head memorising the handful of tail
            // exemplars; without it the energy gap hides from the estimator.
            weight_decay: 0.02,
            ea_per_class: 64,
            ea_jitter_scale: 0.1,
            ea_replication: 8,
            candidate_clusters: vec![1, 2, 3, 4, 5],
        }
    }
}

impl LtRunConfig {
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        if let Some(pair) = csv_pair(&self.train_csv, &self.test_csv)? {
            return Ok(pair);
        }
        let mix = GaussianMixture::new(
            self.classes,
            self.feature_dim,
            self.mean_spread,
            self.within_sigma,
            self.data_seed,
        )?;
        let balanced = mix.sample(self.train_per_class, TRAIN_DRAW, Split::Train)?;
        let train = if self.imbalance_ratio > 1.0 {
            make_long_tailed(&balanced, self.imbalance_ratio, self.data_seed)?
        } else {
            balanced
        };
        let test = mix.sample(self.test_per_class, TEST_DRAW, Split::Test)?;
        Ok((train, test))
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ..SgdConfig::default()
        }
    }

    pub fn lt(&self) -> LtConfig {
        LtConfig {
            ea: EaParams {
                per_class: self.ea_per_class,
                jitter_scale: self.ea_jitter_scale,
                replication: self.ea_replication,
            },
            candidate_clusters: self.candidate_clusters.clone(),
            ..LtConfig::default()
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            hidden_dims: self.hidden_dims.clone(),
            head: self.head,
        }
    }
}

/// Class-incremental run. Defaults: ten classes arriving two at a time over
/// five steps, a 50-exemplar rehearsal buffer, shifts re-fit after every
/// step. Per-step weight decay comes from `decay_base * decay_eta^(step-1)`,
/// so there is no flat weight decay knob here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CilRunConfig {
    pub mode: String,
    pub seed: u64,
    pub data_seed: u64,
    pub classes: usize,
    pub feature_dim: usize,
    pub mean_spread: f64,
    pub within_sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub hidden_dims: Vec<usize>,
    pub head: Head,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lambda_base: f64,
    pub decay_base: f64,
    pub decay_eta: f64,
    pub rehearsal_capacity: usize,
    pub steps: usize,
    pub classes_per_step: usize,
    pub ea_enabled: bool,
    pub ea_per_class: usize,
    pub ea_jitter_scale: f64,
    pub ea_replication: usize,
}

impl Default for CilRunConfig {
    fn default() -> Self {
        Self {
            mode: String::new(),
            seed: 0,
            data_seed: 1,
            classes: 10,
            feature_dim: 16,
            mean_spread: 0.6,
            within_sigma: 1.0,
            train_per_class: 100,
            test_per_class: 20,
            train_csv: None,
            test_csv: None,
            hidden_dims: Vec::new(),
            head: Head::Affine,
            learning_rate: 0.1,
            epochs: 25,
            batch_size: 32,
            momentum: 0.9,
            lambda_base: 1.0,
            decay_base: 5e-4,
            decay_eta: 0.5,
            rehearsal_capacity: 50,
            steps: 5,
            classes_per_step: 2,
            ea_enabled: true,
            ea_per_class: 64,
            ea_jitter_scale: 0.1,
            ea_replication: 8,
        }
    }
}

impl CilRunConfig {
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        if let Some(pair) = csv_pair(&self.train_csv, &self.test_csv)? {
            return Ok(pair);
        }
        let mix = GaussianMixture::new(
            self.classes,
            self.feature_dim,
            self.mean_spread,
            self.within_sigma,
            self.data_seed,
        )?;
        let train = mix.sample(self.train_per_class, TRAIN_DRAW, Split::Train)?;
        let test = mix.sample(self.test_per_class, TEST_DRAW, Split::Test)?;
        Ok((train, test))
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            ..SgdConfig::default()
        }
    }

    pub fn cil(&self) -> CilConfig {
        CilConfig {
            lambda_base: self.lambda_base,
            decay_base: self.decay_base,
            decay_eta: self.decay_eta,
            rehearsal_capacity: self.rehearsal_capacity,
            steps: self.steps,
            classes_per_step: self.classes_per_step,
        }
    }

    pub fn ea(&self) -> EaParams {
        EaParams {
            per_class: self.ea_per_class,
            jitter_scale: self.ea_jitter_scale,
            replication: self.ea_replication,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            hidden_dims: self.hidden_dims.clone(),
            head: self.head,
        }
    }
}

/// Reads the config file (or starts from `{}`), layers `--set` pairs and the
/// `--seed` flag on top, pins the `mode` key, and deserializes.
pub fn resolve<T: DeserializeOwned>(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    mode: &str,
) -> Result<T> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::Value::Object(serde_json::Map::new()),
    };
    let obj = match value.as_object_mut() {
        Some(obj) => obj,
        None => bail!("config root must be a JSON object"),
    };
    for pair in sets {
        let Some((key, raw)) = pair.split_once('=') else {
            bail!("--set takes KEY=VALUE, got '{pair}'");
        };
        // Values are JSON fragments; bare words fall back to strings so
        // `--set head=affine` works without inner quotes.
        let parsed = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(key.to_string(), parsed);
    }
    if let Some(s) = seed {
        obj.insert("seed".to_string(), s.into());
    }
    match obj.get("mode").and_then(|m| m.as_str()) {
        Some(m) if !m.is_empty() && m != mode => {
            bail!("config has mode '{m}' but the subcommand is '{mode}'")
        }
        _ => {}
    }
    obj.insert("mode".to_string(), mode.into());
    serde_json::from_value(value).context("invalid config")
}

fn csv_pair(
    train_csv: &Option<PathBuf>,
    test_csv: &Option<PathBuf>,
) -> Result<Option<(LabeledDataset, LabeledDataset)>> {
    match (train_csv, test_csv) {
        (Some(tr), Some(te)) => {
            let train = load_csv_dataset(tr, Split::Train)
                .with_context(|| format!("loading train_csv {}", tr.display()))?;
            let test = load_csv_dataset(te, Split::Test)
                .with_context(|| format!("loading test_csv {}", te.display()))?;
            Ok(Some((train, test)))
        }
        (None, None) => Ok(None),
        _ => bail!("train_csv and test_csv must be set together"),
    }
}
