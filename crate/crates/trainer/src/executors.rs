//! Adapters that let the search orchestrator and the schedule lab drive
//! real training runs.

use hpt_core::per_module::{ModuleTypeTaxonomy, SearchLayout};
use hpt_core::scaling::ScaleRatios;
use hpt_core::schedule::{IntervalLoss, ScheduleExecutor};
use hpt_core::search::{TrialExecutor, TrialOutcome};

use crate::corpus::TokenSource;
use crate::model::ModelConfig;
use crate::train::{build_for, train, train_batch, validation_loss, RunStatus, TrainConfig, TrainError, Trainer};

/// Evaluates a search point as per-module multipliers on one training run.
pub struct DeskSearchExecutor<D> {
    pub taxonomy: ModuleTypeTaxonomy,
    pub layout: SearchLayout,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ratios: ScaleRatios,
    /// Use this seed for every trial instead of the trial's own seed, so
    /// that points are compared under common initialisation and data.
    pub fixed_seed: Option<u64>,
    pub data: D,
}

impl<D: TokenSource> DeskSearchExecutor<D> {
    pub fn run(&self, point: &[f64], seed: u64) -> Result<TrialOutcome, TrainError> {
        let mut multipliers = self
            .layout
            .decode(&self.taxonomy, point)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if self.layout.depth != self.model.depth {
            multipliers = multipliers
                .interpolate_depth(self.model.depth)
                .map_err(|e| TrainError::Config(e.to_string()))?;
        }
        let seed = self.fixed_seed.unwrap_or(seed);
        let model_cfg = ModelConfig { seed, ..self.model.clone() };
        let mut tcfg = self.train.clone();
        tcfg.per_module = Some(multipliers);
        tcfg.data_seed = seed;
        let (report, _) = train(build_for(&model_cfg, &tcfg, &self.ratios)?, &self.data, &tcfg)?;
        Ok(match (report.status, report.final_loss) {
            (RunStatus::Completed, Some(loss)) => TrialOutcome::Finished { loss },
            _ => TrialOutcome::Diverged { last_stable_loss: Some(report.last_stable_loss) },
        })
    }
}

impl<D: TokenSource> TrialExecutor for DeskSearchExecutor<D> {
    fn evaluate(&self, point: &[f64], seed: u64) -> TrialOutcome {
        self.run(point, seed).unwrap_or_else(|e| TrialOutcome::Failed { reason: e.to_string() })
    }
}

/// Trains `interval_steps` steps per schedule interval at the interval's
/// learning rate (applied as a multiplier of `train.base_hps.eta`, with no
/// warmup or decay inside an interval) and reports the validation loss.
pub struct DeskScheduleExecutor<D> {
    pub train: TrainConfig,
    pub interval_steps: usize,
    pub data: D,
    initial: Trainer,
}

impl<D: TokenSource> DeskScheduleExecutor<D> {
    pub fn new(model: &ModelConfig, ratios: &ScaleRatios, train: TrainConfig, interval_steps: usize, data: D) -> Result<Self, TrainError> {
        if interval_steps == 0 {
            return Err(TrainError::Config("interval_steps must be positive".into()));
        }
        let initial = Trainer::new(build_for(model, &train, ratios)?, train.decay_variant);
        Ok(Self { train, interval_steps, data, initial })
    }

    fn run_interval(&self, state: &mut Trainer, interval: usize, lr: f64) -> Result<f64, TrainError> {
        let mult = lr / self.train.base_hps.eta;
        for i in 0..self.interval_steps {
            let tokens = train_batch(&self.data, &self.train, interval * self.interval_steps + i)?;
            let out = state.step(&tokens, self.train.batch_size, self.train.seq_len, mult, None)?;
            if !out.loss.is_finite() || !state.has_finite_params() {
                return Ok(f64::NAN);
            }
        }
        validation_loss(&state.model, &self.data, self.train.seq_len, self.train.eval_sequences)
    }
}

impl<D: TokenSource> ScheduleExecutor for DeskScheduleExecutor<D> {
    type Checkpoint = Trainer;

    fn initial(&self) -> Trainer {
        self.initial.clone()
    }

    fn train_interval(&self, state: &mut Trainer, interval: usize, lr: f64) -> IntervalLoss {
        // Data errors cannot be reported through the trait; they count as
        // a diverged interval.
        IntervalLoss { loss: self.run_interval(state, interval, lr).unwrap_or(f64::NAN) }
    }
}
