//! Experiment configuration: one versioned document with a section per
//! module. Every section is optional and unknown keys are rejected.

use std::path::Path;

use hpt_core::scaling::{BaseHyperParams, Parameterisation, ScaleRatios};
use hpt_core::schedule::ScheduleGrid;
use hpt_core::search::SearchSpace;
use hpt_trainer::corpus::CorpusConfig;
use hpt_trainer::model::{ModelConfig, ModelParameterisation};
use hpt_trainer::sweep::SweepAxis;
use hpt_trainer::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSection {
    pub variants: Vec<Parameterisation>,
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self { variants: Parameterisation::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeSection {
    pub seed: u64,
    pub mean_standard_errors: f64,
    pub variance_relative: f64,
    /// Override the number of replicas of the reference experiment.
    pub samples: Option<usize>,
}

impl Default for SdeSection {
    fn default() -> Self {
        Self { seed: 0, mean_standard_errors: 3.0, variance_relative: 0.10, samples: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordCheckSection {
    pub widths: Vec<usize>,
    pub depth: usize,
    pub steps: usize,
    pub parameterisations: Vec<ModelParameterisation>,
    /// Allowed max/min ratio of hidden pre-activation RMS across widths.
    pub spread_tolerance: f64,
    /// Allowed deviation factor of embedding-gradient RMS from `∝ 1/N`.
    pub embedding_tolerance: f64,
}

impl Default for CoordCheckSection {
    fn default() -> Self {
        Self {
            widths: vec![64, 256, 1024],
            depth: 4,
            steps: 10,
            parameterisations: vec![ModelParameterisation::CompletedP, ModelParameterisation::Sp],
            spread_tolerance: 4.0,
            embedding_tolerance: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub levels: Vec<f64>,
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub apply_rule: bool,
    /// Fail when any adjacent argmin shift exceeds this many grid steps.
    pub max_shift: Option<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Width,
            levels: vec![64.0, 256.0],
            lr_grid: (-10..=-4).map(|k| 2f64.powi(k)).collect(),
            seeds: vec![0, 1, 2],
            apply_rule: true,
            max_shift: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    TrustRegion,
    Cmaes,
    RandomBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub mode: SearchMode,
    /// `synthetic:sphere`, `synthetic:cliff`, `desk:lr` or `desk:full`.
    pub objective: String,
    pub budget: Option<u64>,
    pub population: Option<usize>,
    pub half_width: f64,
    /// Fail when the best loss is not below this.
    pub target: Option<f64>,
    /// Common initialisation/data seed for desk objectives.
    pub fixed_seed: Option<u64>,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            mode: SearchMode::TrustRegion,
            objective: "synthetic:sphere".into(),
            budget: None,
            population: None,
            half_width: 4.0,
            target: None,
            fixed_seed: None,
        }
    }
}

/// Desk evaluation trains `interval_tokens / (batch_size × seq_len)` steps
/// per interval of `schedule_grid`.
#[derive(Default, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Include every schedule in the report.
    pub list: bool,
    /// Train the desk model on every schedule prefix.
    pub evaluate: bool,
    /// Horizons (in intervals) to report winners for; empty means all.
    pub horizons: Vec<usize>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub ratios: ScaleRatios,
    pub base: BaseHyperParams,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search_space: SearchSpace,
    pub schedule_grid: ScheduleGrid,
    pub scale: ScaleSection,
    pub sde: SdeSection,
    pub coordcheck: CoordCheckSection,
    pub sweep: SweepSection,
    pub search: SearchSection,
    pub schedule: ScheduleSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            ratios: ScaleRatios::identity(),
            base: BaseHyperParams::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            search_space: SearchSpace::default(),
            // 25 steps of 4 × 32 tokens per interval.
            schedule_grid: ScheduleGrid { intervals: 6, k_max: 2, peak_lr: 2f64.powi(-6), interval_tokens: 3200, ..ScheduleGrid::default() },
            scale: ScaleSection::default(),
            sde: SdeSection::default(),
            coordcheck: CoordCheckSection::default(),
            sweep: SweepSection::default(),
            search: SearchSection::default(),
            schedule: ScheduleSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML, or JSON when `json` is set.
    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        let cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        };
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version)));
        }
        let mut cfg = cfg;
        cfg.reconcile_base()?;
        Ok(cfg)
    }

    /// `base` and `train.base_hps` hold the same values. Whichever one
    /// departs from the default is copied over the other; setting both to
    /// different values is an error.
    pub fn reconcile_base(&mut self) -> Result<(), CliError> {
        let default = BaseHyperParams::default();
        if self.train.base_hps == default {
            self.train.base_hps = self.base;
        } else if self.base == default {
            self.base = self.train.base_hps;
        } else if self.base != self.train.base_hps {
            return Err(CliError::Config("[base] and [train.base_hps] disagree; set only one".into()));
        }
        Ok(())
    }

    /// Load from a file; `.json` files are JSON, everything else TOML.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical JSON: object keys sorted, shortest round-trip floats.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&value).expect("value serialises")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
