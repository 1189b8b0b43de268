//! Learning-rate transfer sweeps along one scaling axis.
//!
//! Every `(level, lr, seed)` cell is an independent run; cells execute in
//! parallel and are collected in grid order, so reports do not depend on
//! the thread count.

use hpt_core::scaling::ScaleRatios;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSource;
use crate::model::ModelConfig;
use crate::train::{build_for, train, RunStatus, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Level = model width.
    Width,
    /// Level = model depth.
    Depth,
    /// Level = batch multiplier κ at a fixed token budget (steps ÷ κ).
    Batch,
    /// Level = token multiplier at a fixed batch size (steps × level).
    Tokens,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub levels: Vec<f64>,
    /// Base learning rates, ascending and log-spaced.
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Apply the batch/token transfer rule on those axes. Width and depth
    /// transfer is governed by the model's parameterisation instead.
    #[serde(default)]
    pub apply_rule: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    /// Objective per seed (final validation loss, or last stable loss).
    pub losses: Vec<f64>,
    pub diverged: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub level: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub cells: Vec<SweepCell>,
    /// Grid index of the lowest mean loss; ties go to the smaller LR.
    pub best_index: usize,
    pub best_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub apply_rule: bool,
    pub levels: Vec<SweepLevel>,
}

impl SweepReport {
    /// Signed shift of the best grid index between consecutive levels.
    pub fn argmin_shifts(&self) -> Vec<i64> {
        self.levels
            .windows(2)
            .map(|w| w[1].best_index as i64 - w[0].best_index as i64)
            .collect()
    }
}

/// Model config, train config and ratios for one level.
pub fn level_setup(cfg: &SweepConfig, level: f64) -> Result<(ModelConfig, TrainConfig, ScaleRatios), TrainError> {
    let bad = |m: String| Err(TrainError::Config(m));
    if !(level.is_finite() && level > 0.0) {
        return bad(format!("level {level} must be positive"));
    }
    let mut model = cfg.model.clone();
    let mut train = cfg.train.clone();
    let mut extra = ScaleRatios::identity();
    let as_count = |x: f64| -> Result<usize, TrainError> {
        if x.fract() != 0.0 {
            return Err(TrainError::Config(format!("level {x} must be an integer on this axis")));
        }
        Ok(x as usize)
    };
    let scale_steps = |steps: usize, by: f64| -> Result<usize, TrainError> {
        let scaled = steps as f64 * by;
        if scaled.fract() != 0.0 {
            return Err(TrainError::Config(format!("{steps} steps do not scale evenly by {by}")));
        }
        Ok(scaled as usize)
    };
    match cfg.axis {
        SweepAxis::Width => model.width = as_count(level)?,
        SweepAxis::Depth => model.depth = as_count(level)?,
        SweepAxis::Batch => {
            train.batch_size = as_count(train.batch_size as f64 * level)?;
            train.steps = scale_steps(train.steps, 1.0 / level)?;
            train.warmup_steps = scale_steps(train.warmup_steps, 1.0 / level)?;
            if cfg.apply_rule {
                extra.batch = level;
            }
        }
        SweepAxis::Tokens => {
            train.steps = scale_steps(train.steps, level)?;
            train.warmup_steps = scale_steps(train.warmup_steps, level)?;
            if cfg.apply_rule {
                extra.tokens = level;
            }
        }
    }
    let ratios = model.shape_ratios();
    let ratios = ScaleRatios { batch: extra.batch, tokens: extra.tokens, ..ratios };
    model.validate()?;
    Ok((model, train, ratios))
}

/// Run one cell: `model`/`train` at base learning rate `lr` and `seed`.
pub fn run_cell(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    ratios: &ScaleRatios,
    lr: f64,
    seed: u64,
    data: &dyn TokenSource,
) -> Result<(f64, bool), TrainError> {
    let model_cfg = ModelConfig { seed, ..model.clone() };
    let mut tcfg = train_cfg.clone();
    tcfg.base_hps.eta = lr;
    tcfg.data_seed = seed.wrapping_add(0x0DA7A);
    let (report, _) = train(build_for(&model_cfg, &tcfg, ratios)?, data, &tcfg)?;
    Ok((report.objective(), report.status == RunStatus::Diverged))
}

/// Index of the smallest value; the first one wins ties.
pub fn argmin_lowest(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if v.total_cmp(&values[best]).is_lt() { i } else { best })
}

pub fn lr_transfer_sweep(cfg: &SweepConfig, data: &dyn TokenSource) -> Result<SweepReport, TrainError> {
    if cfg.levels.is_empty() || cfg.lr_grid.is_empty() || cfg.seeds.is_empty() {
        return Err(TrainError::Config("levels, lr_grid and seeds must be nonempty".into()));
    }
    if !cfg.lr_grid.windows(2).all(|w| w[0] < w[1]) || cfg.lr_grid[0] <= 0.0 {
        return Err(TrainError::Config("lr_grid must be positive and strictly ascending".into()));
    }
    let setups = cfg
        .levels
        .iter()
        .map(|l| level_setup(cfg, *l))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize, u64)> = (0..setups.len())
        .flat_map(|li| (0..cfg.lr_grid.len()).flat_map(move |gi| cfg.seeds.iter().map(move |s| (li, gi, *s))))
        .collect();
    let results = jobs
        .par_iter()
        .map(|(li, gi, seed)| {
            let (model, train_cfg, ratios) = &setups[*li];
            run_cell(model, train_cfg, ratios, cfg.lr_grid[*gi], *seed, data)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let per_level = cfg.lr_grid.len() * cfg.seeds.len();
    let levels = setups
        .iter()
        .zip(&cfg.levels)
        .zip(results.chunks(per_level))
        .map(|(((_, train_cfg, _), level), chunk)| {
            let cells: Vec<SweepCell> = cfg
                .lr_grid
                .iter()
                .zip(chunk.chunks(cfg.seeds.len()))
                .map(|(lr, runs)| {
                    let losses: Vec<f64> = runs.iter().map(|r| r.0).collect();
                    SweepCell {
                        lr: *lr,
                        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                        diverged: runs.iter().filter(|r| r.1).count(),
                        losses,
                    }
                })
                .collect();
            let means: Vec<f64> = cells.iter().map(|c| c.mean_loss).collect();
            let best_index = argmin_lowest(&means);
            SweepLevel {
                level: *level,
                steps: train_cfg.steps,
                batch_size: train_cfg.batch_size,
                best_lr: cfg.lr_grid[best_index],
                best_index,
                cells,
            }
        })
        .collect();
    Ok(SweepReport { axis: cfg.axis, apply_rule: cfg.apply_rule, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, SyntheticCorpus};
    use crate::model::ModelParameterisation;

    fn config(axis: SweepAxis, levels: Vec<f64>) -> SweepConfig {
        let mut train = TrainConfig::new(8, 2, 8);
        train.eval_sequences = 4;
        train.warmup_steps = 4;
        SweepConfig {
            axis,
            levels,
            lr_grid: vec![1e-3, 2e-3],
            seeds: vec![0, 1],
            apply_rule: true,
            model: ModelConfig { base_width: 16, ..ModelConfig::new(16, 1, 16, ModelParameterisation::CompletedP) },
            train,
        }
    }

    #[test]
    fn argmin_prefers_smaller_lr_on_ties() {
        assert_eq!(argmin_lowest(&[2.0, 1.0, 1.0, 3.0]), 1);
        assert_eq!(argmin_lowest(&[1.0]), 0);
    }

    #[test]
    fn level_setup_scales_axes() {
        let (_, t, r) = level_setup(&config(SweepAxis::Batch, vec![]), 4.0).unwrap();
        assert_eq!((t.batch_size, t.steps, t.warmup_steps, r.batch), (8, 2, 1, 4.0));
        let (_, t, r) = level_setup(&config(SweepAxis::Tokens, vec![]), 4.0).unwrap();
        assert_eq!((t.steps, r.tokens), (32, 4.0));
        let mut no_rule = config(SweepAxis::Tokens, vec![]);
        no_rule.apply_rule = false;
        assert_eq!(level_setup(&no_rule, 4.0).unwrap().2.tokens, 1.0);
        let (m, _, r) = level_setup(&config(SweepAxis::Width, vec![]), 64.0).unwrap();
        assert_eq!((m.width, r.width), (64, 4.0));
        assert!(level_setup(&config(SweepAxis::Batch, vec![]), 3.0).is_err());
        assert!(level_setup(&config(SweepAxis::Width, vec![]), 20.0).is_err());
    }

    #[test]
    fn sweep_is_deterministic() {
        let corpus = SyntheticCorpus::new(CorpusConfig { vocab: 16, ..CorpusConfig::default() }).unwrap();
        let cfg = config(SweepAxis::Width, vec![16.0, 32.0]);
        let a = lr_transfer_sweep(&cfg, &corpus).unwrap();
        assert_eq!(a, lr_transfer_sweep(&cfg, &corpus).unwrap());
        assert_eq!(a.levels.len(), 2);
        assert_eq!(a.levels[0].cells[0].losses.len(), 2);
        assert_eq!(a.argmin_shifts().len(), 1);
    }
}
