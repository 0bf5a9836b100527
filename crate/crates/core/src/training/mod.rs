//! Losses for the 2D branch and the staged training pipeline: stage A
//! (2D branch, automatic mode), the 3D branch, attention precompute and the
//! fusion stage with hybrid prompting.

mod data;
mod fusion;
mod loss;
mod stage2d;
mod stage3d;

pub use data::{load_split, sample_slice, slice_index, LoadedVolume};
pub use fusion::{train_stage_fusion, trainable_fusion};
pub use loss::{loss_2d, Loss2d};
pub use stage2d::{trainable_stage_a, train_stage_a2d};
pub use stage3d::{precompute_attention, train_v3d};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPipeline;
use crate::checkpoint::ModelBundle;
use crate::depth3d::{AttentionConfig, VNetConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::prompting::PromptConfig;
use crate::sam2d::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A2D,
    V3D,
    FUSION,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::A2D => "A2D",
            Stage::V3D => "V3D",
            Stage::FUSION => "FUSION",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub seed: u64,
    /// Encoder input size; overrides `model.encoder.input_size`.
    pub input_size: usize,
    pub augment: AugmentPipeline,
    pub prompt: PromptConfig,
    pub model: ModelConfig,
    pub vnet: VNetConfig,
    pub attention: AttentionConfig,
    /// Sequence tag used for training and validation; `None` takes all.
    pub sequence: Option<String>,
    /// Caps iterations per epoch, for smoke runs.
    pub max_iters_per_epoch: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::A2D,
            batch_size: 8,
            epochs: 20,
            lr: 5e-4,
            weight_decay: 0.01,
            warmup_iters: 200,
            seed: 0,
            input_size: 256,
            augment: AugmentPipeline::default(),
            prompt: PromptConfig::default(),
            model: ModelConfig::default(),
            vnet: VNetConfig::default(),
            attention: AttentionConfig::default(),
            sequence: Some("t1".into()),
            max_iters_per_epoch: None,
            eval_batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.encoder.input_size = self.input_size;
        m
    }

    pub fn iters_per_epoch(&self, samples: usize, batch: usize) -> usize {
        let n = samples.div_ceil(batch.max(1));
        self.max_iters_per_epoch.map_or(n, |c| n.min(c))
    }

    /// Checks the schedule against the number of optimizer steps it will run.
    pub fn validate(&self, total_iters: usize) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Invalid("batch size and epochs must be positive".into()));
        }
        if self.warmup_iters > total_iters {
            return Err(Error::Invalid(format!(
                "warmup of {} iterations exceeds the {} total iterations",
                self.warmup_iters, total_iters
            )));
        }
        self.augment.validate()?;
        self.attention.validate()?;
        self.model_config().encoder.validate()
    }
}

/// Linear warmup from 0 over `warmup` iterations, constant afterwards.
pub fn warmup_lr(base: f64, warmup: usize, t: usize) -> f64 {
    if t < warmup {
        base * t as f64 / warmup as f64
    } else {
        base
    }
}

pub(crate) fn adamw(vars: Vec<Var>, cfg: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: warmup_lr(cfg.lr, cfg.warmup_iters, 0),
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?)
}

pub(crate) fn set_lr(opt: &mut AdamW, cfg: &TrainConfig, iter: usize) -> f64 {
    let lr = warmup_lr(cfg.lr, cfg.warmup_iters, iter);
    opt.set_learning_rate(lr);
    lr
}

pub(crate) fn check_finite(iter: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iter, loss })
    }
}

/// Hashes of the parameters selected by `pred`.
pub fn hash_params(store: &ParamStore, pred: impl Fn(&str) -> bool) -> Result<BTreeMap<String, String>> {
    Ok(store.hashes()?.into_iter().filter(|(k, _)| pred(k)).collect())
}

/// Names whose hash differs between two snapshots.
pub fn changed_params(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Vec<String> {
    before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect()
}

pub(crate) fn assert_frozen(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Result<()> {
    let changed = changed_params(before, after);
    if changed.is_empty() {
        Ok(())
    } else {
        Err(Error::FrozenViolation(changed.join(", ")))
    }
}

/// JSON-lines training log; a no-op without a path.
pub struct TrainLog {
    out: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl TrainLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let out = path
            .map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Ok(TrainLog {
            out,
            path: path.map(Path::to_path_buf),
        })
    }

    pub fn record(&mut self, v: serde_json::Value) -> Result<()> {
        tracing::debug!(target: "train", "{v}");
        if let (Some(o), Some(p)) = (self.out.as_mut(), self.path.as_ref()) {
            writeln!(o, "{v}").map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(o), Some(p)) = (self.out.as_mut(), self.path.as_ref()) {
            o.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation DSC for 2D stages, validation loss for the 3D branch.
    pub val_metric: f64,
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best checkpoint by the stage's validation metric.
    pub bundle: ModelBundle,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub iterations: usize,
    /// Parameters whose values changed during training.
    pub changed: Vec<String>,
    /// Parameters outside the trainable set, verified unchanged.
    pub frozen: Vec<String>,
    /// Prompted iterations per epoch divided by iterations (fusion stage).
    pub prompted_fraction: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        for t in 0..200 {
            assert!((warmup_lr(5e-4, 200, t) - 5e-4 * t as f64 / 200.0).abs() <= 1e-12);
        }
        assert_eq!(warmup_lr(5e-4, 200, 200), 5e-4);
        assert_eq!(warmup_lr(5e-4, 200, 10_000), 5e-4);
        assert_eq!(warmup_lr(5e-4, 0, 0), 5e-4);
    }

    #[test]
    fn config_checks() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(1000).is_ok());
        assert!(cfg.validate(100).is_err());
        let bad = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(bad.validate(1000).is_err());
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "stage": "V3D"}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.stage, Stage::V3D);
        assert_eq!(partial.batch_size, 8);
    }
}
