//! Derivative-free search over log₂ multiplier vectors.
//!
//! Two strategies share one orchestrator: a trust-region random search
//! around the incumbent and a CMA-ES whose generation updates are gated on
//! asynchronous trial completions. All state changes go through a single
//! serialized record sequence, so a persisted trial log replays to the same
//! state bit for bit.

mod cmaes;
mod orchestrator;
mod store;
pub mod synthetic;
mod trust_region;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cmaes::{cmaes_gate, CmaEsParams, CmaEsState, GateCandidate};
pub use orchestrator::{run_search, ProgressRow, SearchState, SearchStrategy};
pub use store::{LoadedStore, TrialStore};
pub use trust_region::TrustRegion;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("trial {0} was already recorded")]
    DuplicateTrial(u64),
    #[error("trial {trial} has dimension {got}, expected {expected}")]
    Dimension { trial: u64, got: usize, expected: usize },
    #[error("trial {0} is not in a terminal state")]
    NotTerminal(u64),
    #[error("trial store line {line}: {message}")]
    CorruptStore { line: usize, message: String },
    #[error("unknown objective `{0}`")]
    UnknownObjective(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Order in which completed trials are fed to the state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionOrder {
    /// Record trials in trial-id order; results arriving early wait in a
    /// buffer. Runs are reproducible at any concurrency.
    #[default]
    Submission,
    /// Record trials as they arrive.
    Arrival,
}

fn default_radius() -> f64 {
    1.0
}
fn default_decay() -> f64 {
    0.7
}
fn default_patience() -> u64 {
    100
}
fn default_max_trials() -> u64 {
    5000
}
fn default_concurrency() -> usize {
    100
}

/// Search-space geometry and budget. Unspecified fields take the reference
/// defaults: unit box, 0.7 decay after 100 stale trials, 5000 trials, 100
/// concurrent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub dimension: usize,
    pub initial_point: Vec<f64>,
    pub initial_radius: f64,
    pub decay_factor: f64,
    pub patience: u64,
    pub max_trials: u64,
    pub max_concurrency: usize,
    pub seed: u64,
    /// Objective for diverged trials without a last stable loss; `None`
    /// means the worst finished loss so far plus one.
    pub divergence_penalty: Option<f64>,
    pub completion_order: CompletionOrder,
    /// Store wall-clock durations in the trial log. Off by default so logs
    /// are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for SearchSpace {
    /// Two-dimensional space with the reference defaults.
    fn default() -> Self {
        Self::new(2)
    }
}

impl SearchSpace {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            initial_point: vec![0.0; dimension],
            initial_radius: default_radius(),
            decay_factor: default_decay(),
            patience: default_patience(),
            max_trials: default_max_trials(),
            max_concurrency: default_concurrency(),
            seed: 0,
            divergence_penalty: None,
            completion_order: CompletionOrder::Submission,
            record_wall_time: false,
        }
    }

    /// Fill an empty initial point with zeros and check every field.
    pub fn validated(mut self) -> Result<Self, SearchError> {
        if self.initial_point.is_empty() {
            self.initial_point = vec![0.0; self.dimension];
        }
        let bad = |m: String| Err(SearchError::InvalidSpace(m));
        if self.dimension == 0 {
            return bad("dimension must be positive".into());
        }
        if self.initial_point.len() != self.dimension {
            return bad(format!(
                "initial point has {} entries for dimension {}",
                self.initial_point.len(),
                self.dimension
            ));
        }
        if self.initial_point.iter().any(|x| !x.is_finite()) {
            return bad("initial point must be finite".into());
        }
        if !(self.initial_radius.is_finite() && self.initial_radius >= 0.0) {
            return bad(format!("initial radius {} must be finite and nonnegative", self.initial_radius));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay factor {} must lie in (0, 1)", self.decay_factor));
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if self.max_concurrency == 0 {
            return bad("max concurrency must be positive".into());
        }
        if let Some(p) = self.divergence_penalty {
            if !p.is_finite() {
                return bad("divergence penalty must be finite".into());
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Pending,
    Running,
    Finished,
    Failed,
    Diverged,
}

impl TrialStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TrialStatus::Finished | TrialStatus::Failed | TrialStatus::Diverged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub point: Vec<f64>,
    pub seed: u64,
    pub status: TrialStatus,
    /// Present iff finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// Diverged trials only, when the executor knew one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_stable_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<u64>,
}

impl TrialRecord {
    pub fn from_outcome(trial_id: u64, point: Vec<f64>, seed: u64, outcome: TrialOutcome) -> Self {
        let mut rec = Self {
            trial_id,
            point,
            seed,
            status: TrialStatus::Finished,
            final_loss: None,
            last_stable_loss: None,
            error: None,
            wall_time_secs: None,
            generation: None,
        };
        match outcome {
            TrialOutcome::Finished { loss } if loss.is_finite() => rec.final_loss = Some(loss),
            TrialOutcome::Finished { .. } => rec.status = TrialStatus::Diverged,
            TrialOutcome::Diverged { last_stable_loss } => {
                rec.status = TrialStatus::Diverged;
                rec.last_stable_loss = last_stable_loss.filter(|l| l.is_finite());
            }
            TrialOutcome::Failed { reason } => {
                rec.status = TrialStatus::Failed;
                rec.error = Some(reason);
            }
        }
        rec
    }
}

/// What an executor reports for one trial.
#[derive(Debug, Clone, PartialEq)]
pub enum TrialOutcome {
    Finished { loss: f64 },
    Diverged { last_stable_loss: Option<f64> },
    Failed { reason: String },
}

/// Evaluates one point. Must be deterministic in `(point, seed)`; panics
/// are caught and turned into failed trials.
pub trait TrialExecutor: Sync {
    fn evaluate(&self, point: &[f64], seed: u64) -> TrialOutcome;
}

impl<F> TrialExecutor for F
where
    F: Fn(&[f64], u64) -> TrialOutcome + Sync,
{
    fn evaluate(&self, point: &[f64], seed: u64) -> TrialOutcome {
        self(point, seed)
    }
}

/// Generator for everything trial `trial_id` needs: its executor seed and
/// its proposal noise. Depends only on `(seed, trial_id)`, so resuming
/// needs no serialized generator state.
pub(crate) fn trial_rng(seed: u64, trial_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_id);
    rng
}

pub(crate) fn trial_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.next_u64()
}
