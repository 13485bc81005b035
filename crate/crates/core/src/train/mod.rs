//! Optimization: learning-rate schedule, AdamW, contrastive pre-training and
//! frozen-backbone fine-tuning.

mod finetune;
mod pretrain;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{CheckpointError, EncoderError};
use crate::loss::LossError;
use crate::matching::MatchError;
use crate::numerics::{NumericsError, ParamStore, Tensor};
use crate::sampler::SamplerError;
use crate::scalar::Scalar;

pub use finetune::{finetune, FinetuneConfig, FinetuneOutcome, CLASSIFIER_CHECKPOINT};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome, PRETRAIN_CHECKPOINT};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{phase} diverged in epoch {epoch}: non-finite loss")]
    Divergence { phase: Phase, epoch: usize },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("the {0} split has only one class")]
    SingleClass(&'static str),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// One line of the metrics log, written at the end of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            peak_lr: 1e-4,
            warmup_fraction: 0.05,
            patience: 100,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} not in (0, 1)", self.warmup_fraction));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad(format!("invalid AdamW constants {o:?}"));
        }
        Ok(())
    }
}

/// Learning rate for `step` of `total_steps`: a linear ramp from 0 to
/// `peak_lr` over the first `ceil(warmup_fraction * total_steps)` steps,
/// then cosine annealing to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(TrainError::Config("schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(TrainError::Config(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = warmup_steps(total_steps, config.warmup_fraction);
    let peak = config.peak_lr;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Length of the warm-up ramp; always leaves at least one annealing step.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).ceil() as usize).min(total_steps.saturating_sub(1))
}

/// AdamW moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            config,
        }
    }

    /// One AdamW step over all non-frozen parameters: decoupled decay
    /// `p -= lr * wd * p`, then the bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(TrainError::Config("optimizer state does not match the parameter store".into()));
        }
        for p in params.iter() {
            if !p.frozen && !p.grad.all_finite() {
                return Err(TrainError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one_b1 = T::of(1.0 - c.beta1);
        let one_b2 = T::of(1.0 - c.beta2);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let eps = T::of(c.eps);
        let lr_t = T::of(lr);
        let decay = T::of(lr * c.weight_decay);
        let zero = T::zero();
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.frozen {
                continue;
            }
            let g = p.grad.data();
            let w = p.value.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..w.len() {
                w[i] -= decay * w[i];
                let gi = g[i];
                if gi == zero && m[i] == zero && v[i] == zero {
                    // untouched rows: the Adam part is exactly zero
                    continue;
                }
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Appends one JSON line per record to `dir/metrics.jsonl`.
pub(crate) fn append_metrics(dir: &Path, record: &EpochRecord) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let io = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
    writeln!(f, "{}", serde_json::to_string(record).expect("plain record")).map_err(io)
}

/// Content-addressed run identifier: SHA-256 hex of the config snapshot and
/// the checkpoint bytes, truncated to 40 characters.
pub fn run_id(config_snapshot: &str, checkpoint_bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(config_snapshot.as_bytes());
    h.update([0u8]);
    h.update(checkpoint_bytes);
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    hex[..40].to_string()
}

/// Sidecar record stored next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub phase: Phase,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub config: serde_json::Value,
    pub created_unix: u64,
}
