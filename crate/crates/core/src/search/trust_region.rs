use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SearchSpace, TrialRecord, TrialStatus};

/// Incumbent tracking plus an L∞ box that shrinks after `patience`
/// consecutive trials without improvement.
///
/// Invariant: `radius == initial_radius * decay_factor.powi(decays)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub best_point: Vec<f64>,
    pub best_loss: Option<f64>,
    pub best_trial: Option<u64>,
    pub radius: f64,
    pub trials_since_improvement: u64,
    pub decays: i32,
    initial_point: Vec<f64>,
    initial_radius: f64,
    decay_factor: f64,
    patience: u64,
    /// Plain random search: sample around the initial point with a fixed
    /// box instead of following the incumbent.
    fixed_box: bool,
}

impl TrustRegion {
    pub fn new(space: &SearchSpace) -> Self {
        Self {
            best_point: space.initial_point.clone(),
            best_loss: None,
            best_trial: None,
            radius: space.initial_radius,
            trials_since_improvement: 0,
            decays: 0,
            initial_point: space.initial_point.clone(),
            initial_radius: space.initial_radius,
            decay_factor: space.decay_factor,
            patience: space.patience,
            fixed_box: false,
        }
    }

    /// Uniform sampling in `initial_point ± half_width` with no adaptation.
    pub fn random_box(space: &SearchSpace, half_width: f64) -> Self {
        Self {
            radius: half_width,
            initial_radius: half_width,
            fixed_box: true,
            ..Self::new(space)
        }
    }

    pub fn center(&self) -> &[f64] {
        if self.fixed_box {
            &self.initial_point
        } else {
            &self.best_point
        }
    }

    /// `center + u`, `u ~ Uniform([−r, r]^d)`.
    pub fn propose<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let r = self.radius;
        self.center()
            .iter()
            .map(|c| {
                let u: f64 = rng.random();
                if r == 0.0 {
                    *c
                } else {
                    c + r * (2.0 * u - 1.0)
                }
            })
            .collect()
    }

    /// Update the incumbent and patience counter. Failed and diverged
    /// trials count against patience and never become the incumbent.
    pub fn record(&mut self, trial: &TrialRecord) {
        let improved = match (trial.status, trial.final_loss) {
            (TrialStatus::Finished, Some(loss)) => self.best_loss.is_none_or(|best| loss < best),
            _ => false,
        };
        if improved {
            self.best_loss = trial.final_loss;
            self.best_point = trial.point.clone();
            self.best_trial = Some(trial.trial_id);
            self.trials_since_improvement = 0;
            return;
        }
        self.trials_since_improvement += 1;
        if self.trials_since_improvement >= self.patience {
            self.trials_since_improvement = 0;
            if !self.fixed_box {
                self.decays += 1;
                self.radius = self.initial_radius * self.decay_factor.powi(self.decays);
            }
        }
    }
}
