//! Batch-size and token-horizon multipliers derived from the AdamW SDE, and
//! a Monte-Carlo simulator of the simplified RMSPropW iteration
//!
//! ```text
//! θ_{k+1} = θ_k − η (g_k / σ + λ θ_k),   g_k = g + σ e_k,  e_k ~ N(0, I)
//! ```
//!
//! used to check that the multipliers leave the iterate distribution
//! unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("`{name}` must be finite and strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("`{0}` must be nonzero")]
    Zero(&'static str),
    #[error("gradient and initial point have different lengths ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("weight decay must be finite and nonnegative, got {0}")]
    InvalidDecay(f64),
    #[error("all {0} replicas diverged")]
    AllDiverged(usize),
}

fn positive(name: &'static str, value: f64) -> Result<(), SdeError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(SdeError::NonPositive { name, value })
    }
}

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayVariant {
    /// Decay multiplied by the learning rate (PyTorch AdamW).
    #[default]
    #[serde(alias = "adamw")]
    AdamW,
    /// Decoupled decay independent of the learning rate.
    #[serde(alias = "adamlh")]
    AdamLH,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeMultipliers {
    pub m_eta: f64,
    pub m_lambda: f64,
    pub m_eps: f64,
    pub m_one_minus_beta: f64,
    pub m_steps: f64,
}

impl SdeMultipliers {
    pub const IDENTITY: SdeMultipliers = SdeMultipliers {
        m_eta: 1.0,
        m_lambda: 1.0,
        m_eps: 1.0,
        m_one_minus_beta: 1.0,
        m_steps: 1.0,
    };

    fn from_eta(m_eta: f64, variant: DecayVariant) -> Self {
        let m_one_minus_beta = m_eta * m_eta;
        Self {
            m_eta,
            m_lambda: match variant {
                DecayVariant::AdamW => m_eta,
                DecayVariant::AdamLH => m_one_minus_beta,
            },
            m_eps: 1.0 / m_eta,
            m_one_minus_beta,
            m_steps: 1.0 / m_one_minus_beta,
        }
    }

    /// Elementwise product.
    pub fn compose(&self, other: &SdeMultipliers) -> SdeMultipliers {
        SdeMultipliers {
            m_eta: self.m_eta * other.m_eta,
            m_lambda: self.m_lambda * other.m_lambda,
            m_eps: self.m_eps * other.m_eps,
            m_one_minus_beta: self.m_one_minus_beta * other.m_one_minus_beta,
            m_steps: self.m_steps * other.m_steps,
        }
    }

    /// Largest relative violation of the multiplier constraints for the
    /// given decay variant.
    pub fn constraint_violation(&self, variant: DecayVariant) -> f64 {
        let lambda_target = match variant {
            DecayVariant::AdamW => self.m_eta,
            DecayVariant::AdamLH => self.m_eta * self.m_eta,
        };
        [
            (self.m_eta * self.m_eps - 1.0).abs(),
            (self.m_lambda / lambda_target - 1.0).abs(),
            (self.m_one_minus_beta / (self.m_eta * self.m_eta) - 1.0).abs(),
            (self.m_steps * self.m_one_minus_beta - 1.0).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Multipliers for a batch-size increase by `kappa` at a fixed token budget.
pub fn batch_multipliers(kappa: f64, variant: DecayVariant) -> Result<SdeMultipliers, SdeError> {
    positive("kappa", kappa)?;
    Ok(SdeMultipliers::from_eta(kappa.sqrt(), variant))
}

/// Multipliers for a token-horizon increase by `m_d` at a fixed batch size.
pub fn horizon_multipliers(m_d: f64) -> Result<SdeMultipliers, SdeError> {
    positive("m_d", m_d)?;
    let m_eta = 1.0 / m_d.sqrt();
    Ok(SdeMultipliers {
        m_eta,
        m_lambda: m_eta,
        m_eps: m_d.sqrt(),
        m_one_minus_beta: 1.0 / m_d,
        m_steps: m_d,
    })
}

/// Batch and horizon rules together (AdamW): the elementwise product of
/// the two, so `m_eta = sqrt(m_b / m_d)` up to rounding.
pub fn combined_multipliers(m_b: f64, m_d: f64) -> Result<SdeMultipliers, SdeError> {
    Ok(batch_multipliers(m_b, DecayVariant::AdamW)?.compose(&horizon_multipliers(m_d)?))
}

/// Iterates with any coordinate beyond this magnitude count as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropWConfig {
    pub g: Vec<f64>,
    pub sigma: f64,
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub theta0: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub variant: DecayVariant,
}

impl RmsPropWConfig {
    pub fn validate(&self) -> Result<(), SdeError> {
        positive("sigma", self.sigma)?;
        positive("eta", self.eta)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(SdeError::InvalidDecay(self.lambda));
        }
        if self.steps == 0 {
            return Err(SdeError::Zero("steps"));
        }
        if self.samples == 0 {
            return Err(SdeError::Zero("samples"));
        }
        if self.g.len() != self.theta0.len() {
            return Err(SdeError::DimensionMismatch(self.g.len(), self.theta0.len()));
        }
        Ok(())
    }

    /// Apply batch multipliers for a `kappa`-fold batch increase: noise
    /// shrinks by `√κ` and the step count by `κ` (rounded).
    pub fn scaled(&self, kappa: f64, m: &SdeMultipliers) -> RmsPropWConfig {
        RmsPropWConfig {
            sigma: self.sigma / kappa.sqrt(),
            eta: self.eta * m.m_eta,
            lambda: self.lambda * m.m_lambda,
            steps: ((self.steps as f64) * m.m_steps).round().max(1.0) as usize,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateStats {
    pub mean: Vec<f64>,
    /// Unbiased per-coordinate sample variance.
    pub variance: Vec<f64>,
    /// Replicas that contributed to the statistics.
    pub samples: usize,
    pub diverged: usize,
}

impl IterateStats {
    /// Standard error of the per-coordinate mean.
    pub fn standard_error(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| (v / self.samples as f64).sqrt())
            .collect()
    }
}

/// RNG for replica `index`: ChaCha8 keyed by the base seed with the replica
/// index as the stream id.
pub fn replica_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn run_replica(cfg: &RmsPropWConfig, index: u64) -> Option<Vec<f64>> {
    let mut rng = replica_rng(cfg.seed, index);
    let mut theta = cfg.theta0.clone();
    let drift = cfg.eta / cfg.sigma;
    let decay = match cfg.variant {
        DecayVariant::AdamW => cfg.eta * cfg.lambda,
        DecayVariant::AdamLH => cfg.lambda,
    };
    for _ in 0..cfg.steps {
        for (t, g) in theta.iter_mut().zip(&cfg.g) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *t = *t - drift * g - decay * *t - cfg.eta * e;
        }
        if theta.iter().any(|t| t.is_nan() || t.abs() > DIVERGENCE_THRESHOLD) {
            return None;
        }
    }
    Some(theta)
}

/// Run `samples` independent trajectories and summarise the final iterate.
///
/// Replicas may run concurrently; aggregation happens in replica order so
/// the result depends only on the config.
pub fn simulate_rmspropw(cfg: &RmsPropWConfig) -> Result<IterateStats, SdeError> {
    cfg.validate()?;
    let finals: Vec<Option<Vec<f64>>> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| run_replica(cfg, i))
        .collect();

    let dim = cfg.g.len();
    let kept: Vec<&Vec<f64>> = finals.iter().flatten().collect();
    let diverged = finals.len() - kept.len();
    if kept.is_empty() {
        return Err(SdeError::AllDiverged(diverged));
    }
    let n = kept.len() as f64;
    let mut mean = vec![0.0; dim];
    for theta in &kept {
        for (m, t) in mean.iter_mut().zip(theta.iter()) {
            *m += t;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = vec![0.0; dim];
    for theta in &kept {
        for ((v, t), m) in variance.iter_mut().zip(theta.iter()).zip(&mean) {
            *v += (t - m) * (t - m);
        }
    }
    let denom = (n - 1.0).max(1.0);
    variance.iter_mut().for_each(|v| *v /= denom);
    Ok(IterateStats {
        mean,
        variance,
        samples: kept.len(),
        diverged,
    })
}

/// Tolerances for comparing two iterate distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceTolerance {
    /// Allowed mean difference in units of the combined standard error.
    pub mean_standard_errors: f64,
    /// Allowed relative variance difference.
    pub variance_relative: f64,
}

impl Default for InvarianceTolerance {
    fn default() -> Self {
        Self {
            mean_standard_errors: 3.0,
            variance_relative: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceComparison {
    /// Per-coordinate |Δmean| / combined standard error.
    pub mean_z: Vec<f64>,
    /// Per-coordinate |Δvar| / reference variance.
    pub variance_rel: Vec<f64>,
    pub mean_ok: bool,
    pub variance_ok: bool,
}

impl InvarianceComparison {
    pub fn passed(&self) -> bool {
        self.mean_ok && self.variance_ok
    }
}

pub fn compare_stats(
    reference: &IterateStats,
    candidate: &IterateStats,
    tol: &InvarianceTolerance,
) -> InvarianceComparison {
    let se_r = reference.standard_error();
    let se_c = candidate.standard_error();
    let mean_z: Vec<f64> = reference
        .mean
        .iter()
        .zip(&candidate.mean)
        .zip(se_r.iter().zip(&se_c))
        .map(|((a, b), (sa, sb))| (a - b).abs() / (sa * sa + sb * sb).sqrt())
        .collect();
    let variance_rel: Vec<f64> = reference
        .variance
        .iter()
        .zip(&candidate.variance)
        .map(|(a, b)| (a - b).abs() / a)
        .collect();
    InvarianceComparison {
        mean_ok: mean_z.iter().all(|z| *z <= tol.mean_standard_errors),
        variance_ok: variance_rel.iter().all(|r| *r <= tol.variance_relative),
        mean_z,
        variance_rel,
    }
}

/// One row of an invariance experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCase {
    pub name: String,
    pub kappa: f64,
    pub variant: DecayVariant,
    /// Multiplier rule applied to the iteration (may differ from `variant`
    /// for deliberately mis-scaled controls).
    pub rule: DecayVariant,
    pub reference: IterateStats,
    pub scaled: IterateStats,
    pub scaled_config: RmsPropWConfig,
    pub comparison: InvarianceComparison,
    /// Whether this case is expected to match the reference.
    pub expect_match: bool,
}

impl InvarianceCase {
    pub fn as_expected(&self) -> bool {
        self.comparison.passed() == self.expect_match
    }
}

/// Simulate the reference config and its `kappa`-scaled counterpart under
/// `rule`'s batch multipliers.
pub fn invariance_case(
    name: &str,
    reference_cfg: &RmsPropWConfig,
    kappa: f64,
    rule: DecayVariant,
    expect_match: bool,
    tol: &InvarianceTolerance,
) -> Result<InvarianceCase, SdeError> {
    let m = batch_multipliers(kappa, rule)?;
    let scaled_cfg = RmsPropWConfig {
        // Independent noise for the scaled run.
        seed: reference_cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        ..reference_cfg.scaled(kappa, &m)
    };
    let reference = simulate_rmspropw(reference_cfg)?;
    let scaled = simulate_rmspropw(&scaled_cfg)?;
    let comparison = compare_stats(&reference, &scaled, tol);
    Ok(InvarianceCase {
        name: name.to_string(),
        kappa,
        variant: reference_cfg.variant,
        rule,
        reference,
        scaled,
        scaled_config: scaled_cfg,
        comparison,
        expect_match,
    })
}

/// Reference configuration of the invariance experiment.
pub fn reference_invariance_config(seed: u64) -> RmsPropWConfig {
    RmsPropWConfig {
        g: vec![1.0, -1.0],
        sigma: 10.0,
        eta: 0.02,
        lambda: 0.5,
        steps: 2048,
        theta0: vec![0.0, 0.0],
        samples: 20_000,
        seed,
        variant: DecayVariant::AdamW,
    }
}

/// The standard experiment grid: AdamW at κ ∈ {4, 16}, AdamLH scaled with
/// its own rule, and AdamLH mis-scaled with the AdamW rule.
///
/// The AdamLH runs use the per-step decay `η·λ` of the AdamW reference so
/// that both reference trajectories coincide.
pub fn invariance_grid(base: &RmsPropWConfig, tol: &InvarianceTolerance) -> Result<Vec<InvarianceCase>, SdeError> {
    let lh = RmsPropWConfig {
        lambda: base.eta * base.lambda,
        variant: DecayVariant::AdamLH,
        ..base.clone()
    };
    Ok(vec![
        invariance_case("adamw_kappa4", base, 4.0, DecayVariant::AdamW, true, tol)?,
        invariance_case("adamw_kappa16", base, 16.0, DecayVariant::AdamW, true, tol)?,
        invariance_case("adamlh_kappa4", &lh, 4.0, DecayVariant::AdamLH, true, tol)?,
        invariance_case("adamlh_misscaled_kappa4", &lh, 4.0, DecayVariant::AdamW, false, tol)?,
    ])
}
