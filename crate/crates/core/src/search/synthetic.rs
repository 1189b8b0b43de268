//! Synthetic objectives with known optima for exercising the search.

use super::{SearchError, TrialExecutor, TrialOutcome};

/// Optimum of [`sphere`].
pub const SPHERE_OPTIMUM: [f64; 2] = [1.5, -0.5];

/// `‖x − x*‖²` with `x* = (1.5, −0.5, 0, …)`.
pub fn sphere(x: &[f64], _seed: u64) -> TrialOutcome {
    let loss = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v - SPHERE_OPTIMUM.get(i).copied().unwrap_or(0.0)).powi(2))
        .sum();
    TrialOutcome::Finished { loss }
}

/// Training "diverges" once the first coordinate exceeds this.
pub const CLIFF_EDGE: f64 = 2.0;

/// Optimum of the cliff landscape, just inside the stable region.
pub fn cliff_optimum(d: usize) -> Vec<f64> {
    (0..d).map(|i| if i == 0 { 1.8 } else { 0.5 }).collect()
}

fn cliff_quadratic(x: &[f64]) -> f64 {
    let opt = cliff_optimum(x.len());
    x.iter().zip(&opt).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Quadratic bowl next to an instability region `x₀ > 2`. Points in the
/// region diverge and report the loss at the edge as their last stable
/// loss.
pub fn cliff(x: &[f64], _seed: u64) -> TrialOutcome {
    if x.first().is_some_and(|x0| *x0 > CLIFF_EDGE) {
        let mut edge = x.to_vec();
        edge[0] = CLIFF_EDGE;
        return TrialOutcome::Diverged { last_stable_loss: Some(cliff_quadratic(&edge)) };
    }
    TrialOutcome::Finished { loss: cliff_quadratic(x) }
}

pub fn in_cliff_region(x: &[f64]) -> bool {
    x.first().is_some_and(|x0| *x0 > CLIFF_EDGE)
}

/// Look up an objective by name (`sphere`, `cliff`).
pub fn by_name(name: &str) -> Result<&'static (dyn TrialExecutor + 'static), SearchError> {
    match name {
        "sphere" => Ok(&(sphere as fn(&[f64], u64) -> TrialOutcome)),
        "cliff" => Ok(&(cliff as fn(&[f64], u64) -> TrialOutcome)),
        other => Err(SearchError::UnknownObjective(other.to_string())),
    }
}
