//! Training loop, learning-rate schedules and validation.

use hpt_core::per_module::ModuleHyperParams;
use hpt_core::scaling::{BaseHyperParams, ScaleRatios};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DataError, Split, TokenSource};
use crate::model::{build_model, Model, ModelConfig, ModelError, Probe};
use crate::ops;
use crate::optim::{self, AdamState, DecayVariant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid train config: {0}")]
    Config(String),
}

/// Shape of the learning-rate multiplier over a run, after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine from 1 down to `final_fraction` at the last step.
    Cosine { final_fraction: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine { final_fraction: 0.1 }
    }
}

impl LrSchedule {
    /// Multiplier for 0-based `step` of `total`, with linear warmup over
    /// the first `warmup` steps.
    pub fn multiplier(self, step: usize, total: usize, warmup: usize) -> f64 {
        if step < warmup {
            return (step + 1) as f64 / warmup as f64;
        }
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_fraction } => {
                let span = total.saturating_sub(warmup).saturating_sub(1);
                if span == 0 {
                    return 1.0;
                }
                let progress = (step - warmup) as f64 / span as f64;
                final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub base_hps: BaseHyperParams,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub per_module: Option<ModuleHyperParams>,
    pub decay_variant: DecayVariant,
    /// Data-order seed, independent of the initialisation seed.
    pub data_seed: u64,
    /// Held-out sequences used for the validation loss.
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    /// The desk reference run: 400 steps of 4 × 32 tokens, 10% warmup.
    fn default() -> Self {
        Self { warmup_steps: 40, ..Self::new(400, 4, 32) }
    }
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, seq_len: usize) -> Self {
        Self {
            steps,
            batch_size,
            seq_len,
            base_hps: BaseHyperParams::default(),
            schedule: LrSchedule::default(),
            warmup_steps: 0,
            per_module: None,
            decay_variant: DecayVariant::AdamW,
            data_seed: 0,
            eval_sequences: 32,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_sequences == 0 {
            return Err(TrainError::Config("batch_size, seq_len and eval_sequences must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(TrainError::Config(format!("warmup {} exceeds {} steps", self.warmup_steps, self.steps)));
        }
        if let LrSchedule::Cosine { final_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(TrainError::Config(format!("final_fraction {final_fraction} outside [0, 1]")));
            }
        }
        self.base_hps.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub status: RunStatus,
    /// Validation loss before the first step.
    pub initial_loss: f64,
    /// Validation loss after the last step; `None` when diverged.
    pub final_loss: Option<f64>,
    /// Last finite training loss (the initial validation loss if none).
    pub last_stable_loss: f64,
    /// Training loss at every completed step.
    pub curve: Vec<f64>,
}

impl TrainReport {
    /// Final validation loss, or the last stable loss for diverged runs.
    pub fn objective(&self) -> f64 {
        self.final_loss.unwrap_or(self.last_stable_loss)
    }
}

/// Model plus optimiser state; cloning it is a full checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub variant: DecayVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Per-tensor gradient RMS.
    pub grad_rms: Vec<f64>,
    /// Per-tensor update RMS; empty when the step was skipped.
    pub update_rms: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Model, variant: DecayVariant) -> Self {
        let opt = AdamState::new(&model);
        Self { model, opt, variant }
    }

    /// One optimiser step on `batch` rows of `seq + 1` tokens. The
    /// parameters are left untouched when the loss is not finite.
    pub fn step(&mut self, tokens: &[u32], batch: usize, seq: usize, lr_mult: f64, probe: Option<&mut Probe>) -> Result<StepOutcome, TrainError> {
        let mut grads = self.model.zero_grads();
        let loss = self.model.loss_and_grad(tokens, batch, seq, &mut grads, probe)?;
        let grad_rms = grads.iter().map(|g| ops::rms(g)).collect();
        if !loss.is_finite() {
            return Ok(StepOutcome { loss, grad_rms, update_rms: Vec::new() });
        }
        let update_rms = optim::apply(&mut self.model, &mut self.opt, &grads, lr_mult, self.variant);
        Ok(StepOutcome { loss, grad_rms, update_rms })
    }

    pub fn has_finite_params(&self) -> bool {
        self.model.params.iter().all(|p| p.data.iter().all(|x| x.is_finite()))
    }
}

/// Mean validation loss over `count` held-out sequences of `seq + 1`
/// tokens (always the same sequences, regardless of the data seed).
pub fn validation_loss(model: &Model, data: &dyn TokenSource, seq: usize, count: usize) -> Result<f64, TrainError> {
    const CHUNK: usize = 16;
    let mut total = 0.0;
    let mut first = 0;
    while first < count {
        let n = CHUNK.min(count - first);
        let tokens = data.sequences(Split::Validation, 0, first as u64, n, seq + 1)?;
        total += model.loss(&tokens, n, seq)? * n as f64;
        first += n;
    }
    Ok(total / count as f64)
}

/// Training tokens for 0-based `step`.
pub fn train_batch(data: &dyn TokenSource, tcfg: &TrainConfig, step: usize) -> Result<Vec<u32>, TrainError> {
    Ok(data.sequences(
        Split::Train,
        tcfg.data_seed,
        (step * tcfg.batch_size) as u64,
        tcfg.batch_size,
        tcfg.seq_len + 1,
    )?)
}

/// Build a model from `tcfg`'s base and per-module hyperparameters.
pub fn build_for(cfg: &ModelConfig, tcfg: &TrainConfig, ratios: &ScaleRatios) -> Result<Model, TrainError> {
    tcfg.validate()?;
    Ok(build_model(cfg, &tcfg.base_hps, ratios, tcfg.per_module.as_ref())?)
}

pub fn train(model: Model, data: &dyn TokenSource, tcfg: &TrainConfig) -> Result<(TrainReport, Trainer), TrainError> {
    tcfg.validate()?;
    if data.vocab() != model.cfg.vocab {
        return Err(TrainError::Config(format!("data vocab {} differs from model vocab {}", data.vocab(), model.cfg.vocab)));
    }
    let initial_loss = validation_loss(&model, data, tcfg.seq_len, tcfg.eval_sequences)?;
    let mut trainer = Trainer::new(model, tcfg.decay_variant);
    let mut curve = Vec::with_capacity(tcfg.steps);
    let mut last_stable = initial_loss;
    for step in 0..tcfg.steps {
        let tokens = train_batch(data, tcfg, step)?;
        let mult = tcfg.schedule.multiplier(step, tcfg.steps, tcfg.warmup_steps);
        let out = trainer.step(&tokens, tcfg.batch_size, tcfg.seq_len, mult, None)?;
        if !out.loss.is_finite() || !trainer.has_finite_params() {
            let report = TrainReport { status: RunStatus::Diverged, initial_loss, final_loss: None, last_stable_loss: last_stable, curve };
            return Ok((report, trainer));
        }
        last_stable = out.loss;
        curve.push(out.loss);
    }
    let final_loss = validation_loss(&trainer.model, data, tcfg.seq_len, tcfg.eval_sequences)?;
    let (status, final_loss) = if final_loss.is_finite() { (RunStatus::Completed, Some(final_loss)) } else { (RunStatus::Diverged, None) };
    Ok((TrainReport { status, initial_loss, final_loss, last_stable_loss: last_stable, curve }, trainer))
}
