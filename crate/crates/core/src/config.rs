//! Experiment configuration: one JSON document with a block per stage.
//!
//! Parsing starts from the preset for `dataset.kind` and overlays the
//! user's document, so a file containing only `{"dataset":{"kind":"ring"}}`
//! yields the full ring defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embed::PretextConfig;
use crate::error::{invalid, Error, Result};
use crate::ganmix::GanConfig;
use crate::guide::VerifyConfig;
use crate::metrics::CappedGanConfig;
use crate::partitioner::PartitionerConfig;
use crate::synthdata::{grid_spec, ring_spec, GaussianMixtureSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Grid,
    Ring,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Grid => "grid",
            Self::Ring => "ring",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Grid side length.
    pub side: usize,
    /// Ring component count.
    pub k: usize,
    pub spacing: f64,
    pub radius: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn spec(&self) -> Result<GaussianMixtureSpec> {
        match self.kind {
            DatasetKind::Grid => grid_spec(self.side, self.spacing, self.sigma),
            DatasetKind::Ring => ring_spec(self.k, self.radius, self.sigma),
        }
    }

    pub fn modes(&self) -> usize {
        match self.kind {
            DatasetKind::Grid => self.side * self.side,
            DatasetKind::Ring => self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Grid => {
                if self.side == 0 {
                    return Err(invalid("dataset.side", "must be at least 1"));
                }
                if !(self.spacing > 0.0 && self.spacing.is_finite()) {
                    return Err(invalid("dataset.spacing", "must be positive"));
                }
            }
            DatasetKind::Ring => {
                if self.k == 0 {
                    return Err(invalid("dataset.k", "must be at least 1"));
                }
                if !(self.radius > 0.0 && self.radius.is_finite()) {
                    return Err(invalid("dataset.radius", "must be positive"));
                }
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("dataset.sigma", "must be positive"));
        }
        if self.n_train == 0 {
            return Err(invalid("dataset.n_train", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    /// Train the partitioner on raw coordinates with a geometric kNN graph.
    pub bypass: bool,
    /// Output width of the pretext projection head.
    pub dims: usize,
    pub epochs: usize,
    pub sigma_aug: f64,
    pub knn_k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub head_hidden: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            bypass: true,
            dims: 16,
            epochs: 20,
            sigma_aug: 0.05,
            knn_k: 10,
            batch_size: 256,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            tau: 0.5,
            head_hidden: 64,
        }
    }
}

impl EmbedConfig {
    pub fn pretext(&self) -> PretextConfig {
        PretextConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            sigma_aug: self.sigma_aug,
            tau: self.tau,
            embed_dim: self.dims,
            head_hidden: self.head_hidden,
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.knn_k == 0 || self.knn_k >= n_train {
            return Err(invalid(
                "embed.knn_k",
                format!("must lie in [1, n_train), got {}", self.knn_k),
            ));
        }
        if self.bypass {
            return Ok(());
        }
        if self.dims == 0 {
            return Err(invalid("embed.dims", "must be at least 1"));
        }
        if self.head_hidden == 0 {
            return Err(invalid("embed.head_hidden", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("embed.batch_size", "must be at least 2"));
        }
        if !(self.sigma_aug >= 0.0 && self.sigma_aug.is_finite()) {
            return Err(invalid("embed.sigma_aug", "must be nonnegative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("embed.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("embed.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("embed.weight_decay", "must be nonnegative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("embed.tau", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub hq_radius_sigmas: f64,
    pub hq_threshold_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            hq_radius_sigmas: 3.0,
            hq_threshold_count: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(invalid("eval.n_samples", "must be at least 1"));
        }
        if !(self.hq_radius_sigmas > 0.0 && self.hq_radius_sigmas.is_finite()) {
            return Err(invalid("eval.hq_radius_sigmas", "must be positive"));
        }
        if self.hq_threshold_count == 0 {
            return Err(invalid("eval.hq_threshold_count", "must be at least 1"));
        }
        Ok(())
    }
}

/// Settings for the capped-generator total-variation check reported in
/// the metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub enabled: bool,
    pub pi: [f64; 2],
    pub d: f64,
    pub c: f64,
    pub train: CappedGanConfig,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pi: [0.5, 0.5],
            d: 1.0,
            c: 1.0,
            train: CappedGanConfig::default(),
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        crate::metrics::TheoremOneInstance::new(self.pi.to_vec(), vec![self.d; 2], self.c)
            .map_err(|e| prefix("bound", e))?;
        self.train.validate().map_err(|e| prefix("bound.train", e))
    }
}

fn prefix(block: &str, e: Error) -> Error {
    match e {
        Error::Invalid { field, reason } => Error::Invalid {
            field: format!("{block}.{field}"),
            reason,
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub embed: EmbedConfig,
    pub partitioner: PartitionerConfig,
    pub gan: GanConfig,
    pub verify: VerifyConfig,
    pub eval: EvalConfig,
    pub bound: BoundConfig,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn preset(kind: DatasetKind) -> Self {
        let (dataset, k) = match kind {
            DatasetKind::Grid => (
                DatasetConfig {
                    kind,
                    side: 5,
                    k: 8,
                    spacing: 2.0,
                    radius: 1.0,
                    sigma: 0.05,
                    n_train: 5000,
                    seed: 0,
                },
                25,
            ),
            DatasetKind::Ring => (
                DatasetConfig {
                    kind,
                    side: 5,
                    k: 8,
                    spacing: 2.0,
                    radius: 1.0,
                    sigma: 0.01,
                    n_train: 2000,
                    seed: 0,
                },
                8,
            ),
        };
        Self {
            dataset,
            embed: EmbedConfig::default(),
            partitioner: PartitionerConfig {
                k,
                ..Default::default()
            },
            gan: GanConfig::default(),
            verify: VerifyConfig::default(),
            eval: EvalConfig::default(),
            bound: BoundConfig::default(),
            out_dir: PathBuf::from(format!("runs/{}", kind.name())),
        }
    }

    /// Parses a JSON document over the preset for its dataset kind.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| invalid("config", format!("not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(invalid("config", "top level must be a JSON object"));
        }
        let kind = match user.pointer("/dataset/kind") {
            None => DatasetKind::Grid,
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|_| invalid("dataset.kind", format!("expected \"grid\" or \"ring\", got {v}")))?,
        };
        let mut base = serde_json::to_value(Self::preset(kind))?;
        merge(&mut base, user);
        let cfg: Self = serde_json::from_value(base).map_err(|e| invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}-k{}-lam{}-s{}",
            self.dataset.kind.name(),
            self.partitioner.k,
            self.gan.lambda_start,
            self.dataset.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.embed.validate(self.dataset.n_train)?;
        self.partitioner.validate()?;
        if self.partitioner.k > self.dataset.n_train {
            return Err(invalid("partitioner.k", "cannot exceed dataset.n_train"));
        }
        self.gan.validate()?;
        self.verify.validate()?;
        self.eval.validate()?;
        self.bound.validate()?;
        if self.out_dir.as_os_str().is_empty() {
            return Err(invalid("out_dir", "must not be empty"));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(DatasetKind::Grid)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
