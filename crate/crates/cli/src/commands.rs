//! Subcommands. Each one writes `report.json` plus CSV tables into the
//! output directory and returns the internal checks that failed.

use std::path::PathBuf;

use hpt_core::per_module::{ModuleHyperParams, ModuleTypeTaxonomy, MultiplierDocument, SearchLayout};
use hpt_core::scaling::{resolve, BaseHyperParams, Parameterisation, ResolvedHyperParams, ScaleRatios, TensorRole};
use hpt_core::schedule::{best_schedule_per_horizon, enumerate, HorizonReport, ScheduleGrid};
use hpt_core::sde::{
    batch_multipliers, combined_multipliers, horizon_multipliers, invariance_grid, reference_invariance_config,
    DecayVariant, InvarianceCase, InvarianceTolerance, SdeMultipliers,
};
use hpt_core::search::{
    run_search, synthetic, SearchError, SearchSpace, SearchState, SearchStrategy, TrialExecutor, TrialRecord, TrialStore,
};
use hpt_trainer::checkpoint;
use hpt_trainer::coordcheck::{coordinate_check, CoordinateCheckReport, Quantity};
use hpt_trainer::corpus::SyntheticCorpus;
use hpt_trainer::executors::{DeskScheduleExecutor, DeskSearchExecutor};
use hpt_trainer::model::ModelParameterisation;
use hpt_trainer::sweep::{lr_transfer_sweep, SweepConfig, SweepReport};
use hpt_trainer::train::{build_for, train, LrSchedule, TrainError, TrainReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SearchMode};
use crate::report::{cell, unix_now, OutputDir, ReportEnvelope};
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const TRIAL_STORE_FILE: &str = "trials.ndjson";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MULTIPLIERS_FILE: &str = "best_multipliers.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Scale,
    SdeCheck,
    CoordCheck,
    Sweep,
    /// `resume` continues from an existing trial store in the output dir.
    Search { resume: bool },
    ScheduleEnum,
    Train,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Scale => "scale",
            Command::SdeCheck => "sde-check",
            Command::CoordCheck => "coordcheck",
            Command::Sweep => "sweep",
            Command::Search { .. } => "search",
            Command::ScheduleEnum => "schedule-enum",
            Command::Train => "train",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: PathBuf,
    pub failures: Vec<String>,
}

/// Run `command` and write its report, even when checks fail.
pub fn run(command: Command, cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome, CliError> {
    let started = unix_now();
    check_config(cfg)?;
    let finish = Finish { command, cfg, out, started };
    match command {
        Command::Scale => scale(finish),
        Command::SdeCheck => sde_check(finish),
        Command::CoordCheck => coordcheck(finish),
        Command::Sweep => sweep(finish),
        Command::Search { resume } => search(finish, resume),
        Command::ScheduleEnum => schedule_enum(finish),
        Command::Train => train_cmd(finish),
    }
}

/// Cross-section consistency that no single section can check alone.
fn check_config(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.ratios.validate().map_err(CliError::config)?;
    cfg.base.validate().map_err(CliError::config)?;
    if cfg.model.vocab != cfg.corpus.vocab {
        return Err(CliError::Config(format!(
            "model.vocab = {} but corpus.vocab = {}",
            cfg.model.vocab, cfg.corpus.vocab
        )));
    }
    Ok(())
}

struct Finish<'a> {
    command: Command,
    cfg: &'a ExperimentConfig,
    out: &'a OutputDir,
    started: u64,
}

impl Finish<'_> {
    fn write<T: Serialize + DeserializeOwned>(self, seeds: Vec<u64>, failures: Vec<String>, payload: T) -> Result<Outcome, CliError> {
        let envelope = ReportEnvelope::new(self.command.name(), self.cfg, seeds, self.started, failures.clone(), payload);
        let report = self.out.write_report(REPORT_FILE, &envelope)?;
        Ok(Outcome { report, failures })
    }
}

/// Serde name of a unit enum variant, for CSV cells.
fn label<T: Serialize>(x: &T) -> String {
    match serde_json::to_value(x) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn corpus(cfg: &ExperimentConfig) -> Result<SyntheticCorpus, CliError> {
    SyntheticCorpus::new(cfg.corpus.clone()).map_err(CliError::config)
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Config(m),
        other => CliError::runtime(other),
    }
}

fn search_err(e: SearchError) -> CliError {
    match e {
        SearchError::InvalidSpace(_) | SearchError::UnknownObjective(_) | SearchError::Dimension { .. } => CliError::config(e),
        other => CliError::runtime(other),
    }
}

// ---------------------------------------------------------------- scale

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub variant: Parameterisation,
    pub role: TensorRole,
    pub resolved: ResolvedHyperParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeTable {
    /// Batch rule at `κ = ratios.batch`, learning-rate-coupled decay.
    pub batch_adam_w: SdeMultipliers,
    /// Batch rule at `κ = ratios.batch`, decoupled decay.
    pub batch_adam_lh: SdeMultipliers,
    /// Horizon rule at `m_D = ratios.tokens`.
    pub horizon: SdeMultipliers,
    pub combined: SdeMultipliers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePayload {
    pub rows: Vec<ScaleRow>,
    pub sde: SdeTable,
    pub warnings: Vec<String>,
}

fn at_base(r: &ResolvedHyperParams, base: &BaseHyperParams) -> bool {
    (r.eta, r.sigma2, r.eps, r.lambda, r.beta1, r.beta2) == (base.eta, base.sigma2, base.eps, base.lambda, base.beta1, base.beta2)
        && r.residual_mult.is_none_or(|m| m == 1.0)
}

fn scale(f: Finish) -> Result<Outcome, CliError> {
    let cfg = f.cfg;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &variant in &cfg.scale.variants {
        for role in TensorRole::ALL {
            let resolved = resolve(role, &cfg.base, &cfg.ratios, variant).map_err(CliError::config)?;
            for c in &resolved.clamped {
                warnings.push(format!(
                    "{}/{role}: {} resolved to {}, clamped to 1",
                    variant.as_str(),
                    label(&c.hp),
                    c.unclamped_one_minus_beta
                ));
            }
            rows.push(ScaleRow { variant, role, resolved });
        }
    }
    let mut failures = Vec::new();
    if cfg.ratios == ScaleRatios::identity() {
        for row in rows.iter().filter(|r| !at_base(&r.resolved, &cfg.base)) {
            failures.push(format!("{}/{} departs from the base at identity ratios", row.variant.as_str(), row.role));
        }
    }
    let sde = SdeTable {
        batch_adam_w: batch_multipliers(cfg.ratios.batch, DecayVariant::AdamW).map_err(CliError::config)?,
        batch_adam_lh: batch_multipliers(cfg.ratios.batch, DecayVariant::AdamLH).map_err(CliError::config)?,
        horizon: horizon_multipliers(cfg.ratios.tokens).map_err(CliError::config)?,
        combined: combined_multipliers(cfg.ratios.batch, cfg.ratios.tokens).map_err(CliError::config)?,
    };
    f.out.write_csv(
        "scale.csv",
        &["variant", "role", "eta", "sigma2", "eps", "lambda", "beta1", "beta2", "residual_mult", "num_steps_multiplier", "clamped"],
        rows.iter().map(|r| {
            let h = &r.resolved;
            vec![
                r.variant.as_str().to_string(),
                r.role.to_string(),
                h.eta.to_string(),
                h.sigma2.to_string(),
                h.eps.to_string(),
                h.lambda.to_string(),
                h.beta1.to_string(),
                h.beta2.to_string(),
                cell(h.residual_mult),
                h.num_steps_multiplier.to_string(),
                h.has_warnings().to_string(),
            ]
        }),
    )?;
    f.write(Vec::new(), failures, ScalePayload { rows, sde, warnings })
}

// ------------------------------------------------------------ sde-check

fn sde_check(f: Finish) -> Result<Outcome, CliError> {
    let s = &f.cfg.sde;
    let mut base = reference_invariance_config(s.seed);
    if let Some(n) = s.samples {
        base.samples = n;
    }
    let tol = InvarianceTolerance { mean_standard_errors: s.mean_standard_errors, variance_relative: s.variance_relative };
    let cases: Vec<InvarianceCase> = invariance_grid(&base, &tol).map_err(CliError::config)?;
    let failures = cases
        .iter()
        .filter(|c| !c.as_expected())
        .map(|c| {
            let want = if c.expect_match { "match" } else { "mismatch" };
            format!(
                "{}: expected {want}, got max |z| {:.3}, max relative variance gap {:.3}",
                c.name,
                c.comparison.mean_z.iter().fold(0.0f64, |m, z| m.max(z.abs())),
                c.comparison.variance_rel.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            )
        })
        .collect();
    let mut rows = Vec::new();
    for c in &cases {
        for i in 0..c.reference.mean.len() {
            rows.push(vec![
                c.name.clone(),
                i.to_string(),
                c.kappa.to_string(),
                c.reference.mean[i].to_string(),
                c.scaled.mean[i].to_string(),
                c.comparison.mean_z[i].to_string(),
                c.reference.variance[i].to_string(),
                c.scaled.variance[i].to_string(),
                c.comparison.variance_rel[i].to_string(),
                c.expect_match.to_string(),
                c.as_expected().to_string(),
            ]);
        }
    }
    f.out.write_csv(
        "sde_check.csv",
        &["case", "coordinate", "kappa", "ref_mean", "scaled_mean", "mean_z", "ref_variance", "scaled_variance", "variance_rel", "expect_match", "as_expected"],
        rows,
    )?;
    f.write(vec![s.seed], failures, cases)
}

// ----------------------------------------------------------- coordcheck

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordRun {
    pub parameterisation: ModelParameterisation,
    pub mlp_preact_spread: f64,
    pub attn_preact_spread: f64,
    pub embedding_grad_deviation: f64,
    /// MLP pre-activation strictly grows with width at the last step.
    pub mlp_preact_grows_with_width: bool,
    pub report: CoordinateCheckReport,
}

/// Pass/fail verdict on one coordinate check. Width-transferring
/// parameterisations must keep activations width-independent; the
/// standard one must show activations growing with width.
pub fn coord_failures(run: &CoordRun, spread_tolerance: f64, embedding_tolerance: f64) -> Vec<String> {
    let name = label(&run.parameterisation);
    let mut failures = Vec::new();
    if run.report.has_divergence() {
        failures.push(format!("{name}: non-finite statistics"));
    }
    if run.parameterisation == ModelParameterisation::Sp {
        if !run.mlp_preact_grows_with_width {
            failures.push(format!("{name}: MLP pre-activation does not grow with width"));
        }
    } else {
        for (what, spread) in [("MLP", run.mlp_preact_spread), ("attention", run.attn_preact_spread)] {
            if spread > spread_tolerance {
                failures.push(format!("{name}: {what} pre-activation spread {spread:.3} > {spread_tolerance}"));
            }
        }
        if run.embedding_grad_deviation > embedding_tolerance {
            failures.push(format!(
                "{name}: embedding gradient departs from 1/N by {:.3} > {embedding_tolerance}",
                run.embedding_grad_deviation
            ));
        }
    }
    failures
}

fn coordcheck(f: Finish) -> Result<Outcome, CliError> {
    let cfg = f.cfg;
    let s = &cfg.coordcheck;
    let data = corpus(cfg)?;
    let mut tcfg = cfg.train.clone();
    tcfg.steps = s.steps;
    tcfg.warmup_steps = 0;
    tcfg.schedule = LrSchedule::Constant;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &parameterisation in &s.parameterisations {
        let template = hpt_trainer::model::ModelConfig { depth: s.depth, parameterisation, ..cfg.model.clone() };
        let report = coordinate_check(&s.widths, &template, &tcfg, s.steps, &data).map_err(train_err)?;
        let run = CoordRun {
            parameterisation,
            mlp_preact_spread: report.max_spread(Quantity::MlpPreact),
            attn_preact_spread: report.max_spread(Quantity::AttnPreact),
            embedding_grad_deviation: report.embedding_grad_deviation(),
            mlp_preact_grows_with_width: report.strictly_increasing(s.steps, Quantity::MlpPreact),
            report,
        };
        failures.extend(coord_failures(&run, s.spread_tolerance, s.embedding_tolerance));
        runs.push(run);
    }
    let rows = runs.iter().flat_map(|r| {
        r.report.cells.iter().map(move |c| {
            vec![
                label(&r.parameterisation),
                c.width.to_string(),
                c.step.to_string(),
                c.layer.map_or_else(String::new, |l| l.to_string()),
                label(&c.quantity),
                c.tensor.clone().unwrap_or_default(),
                cell(c.rms),
            ]
        })
    });
    f.out.write_csv("coordcheck.csv", &["parameterisation", "width", "step", "layer", "quantity", "tensor", "rms"], rows)?;
    f.write(vec![cfg.model.seed, cfg.train.data_seed], failures, runs)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPayload {
    pub report: SweepReport,
    /// Signed argmin shift between consecutive levels, in grid steps.
    pub shifts: Vec<i64>,
}

fn sweep(f: Finish) -> Result<Outcome, CliError> {
    let cfg = f.cfg;
    let s = &cfg.sweep;
    let data = corpus(cfg)?;
    let sweep_cfg = SweepConfig {
        axis: s.axis,
        levels: s.levels.clone(),
        lr_grid: s.lr_grid.clone(),
        seeds: s.seeds.clone(),
        apply_rule: s.apply_rule,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
    };
    let report = lr_transfer_sweep(&sweep_cfg, &data).map_err(train_err)?;
    let shifts = report.argmin_shifts();
    let mut failures = Vec::new();
    if let Some(max) = s.max_shift {
        for (i, shift) in shifts.iter().enumerate().filter(|(_, d)| d.unsigned_abs() > max) {
            failures.push(format!(
                "argmin moved {shift} grid steps between levels {} and {}",
                report.levels[i].level,
                report.levels[i + 1].level
            ));
        }
    }
    let mut header: Vec<String> = ["level", "steps", "batch_size", "lr", "mean_loss", "diverged", "best"].map(String::from).to_vec();
    header.extend(s.seeds.iter().map(|seed| format!("loss_seed{seed}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = report.levels.iter().flat_map(|l| {
        l.cells.iter().enumerate().map(move |(i, c)| {
            let mut row = vec![
                l.level.to_string(),
                l.steps.to_string(),
                l.batch_size.to_string(),
                c.lr.to_string(),
                c.mean_loss.to_string(),
                c.diverged.to_string(),
                (i == l.best_index).to_string(),
            ];
            row.extend(c.losses.iter().map(f64::to_string));
            row
        })
    });
    f.out.write_csv("sweep.csv", &header, rows)?;
    f.write(s.seeds.clone(), failures, SweepPayload { report, shifts })
}

// --------------------------------------------------------------- search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPayload {
    pub objective: String,
    pub strategy: SearchStrategy,
    /// Space actually searched; desk objectives set the dimension.
    pub space: SearchSpace,
    pub best_point: Vec<f64>,
    pub best_loss: Option<f64>,
    pub radius: f64,
    pub trials: usize,
    /// Trials recovered from the store before this invocation.
    pub resumed_trials: usize,
    pub store_warnings: Vec<String>,
    /// Decoded multipliers of the best point, for desk objectives.
    pub best_multipliers: Option<ModuleHyperParams>,
}

enum Objective {
    Synthetic(&'static dyn TrialExecutor),
    Desk(Box<DeskSearchExecutor<SyntheticCorpus>>),
}

impl Objective {
    fn executor(&self) -> &dyn TrialExecutor {
        match self {
            Objective::Synthetic(e) => *e,
            Objective::Desk(e) => e.as_ref(),
        }
    }
}

fn objective(cfg: &ExperimentConfig) -> Result<Objective, CliError> {
    let layout = |lr_only| {
        let taxonomy = ModuleTypeTaxonomy::reference();
        let depth = cfg.model.depth;
        let layout =
            if lr_only { SearchLayout::learning_rate_only(&taxonomy, depth) } else { SearchLayout::reference(&taxonomy, depth) };
        (taxonomy, layout)
    };
    let desk = |lr_only| -> Result<Objective, CliError> {
        let (taxonomy, layout) = layout(lr_only);
        let ratios = ScaleRatios { batch: cfg.ratios.batch, tokens: cfg.ratios.tokens, ..cfg.model.shape_ratios() };
        Ok(Objective::Desk(Box::new(DeskSearchExecutor {
            taxonomy,
            layout,
            model: cfg.model.clone(),
            train: cfg.train.clone(),
            ratios,
            fixed_seed: cfg.search.fixed_seed,
            data: corpus(cfg)?,
        })))
    };
    match cfg.search.objective.as_str() {
        "desk:lr" => desk(true),
        "desk:full" => desk(false),
        other => match other.strip_prefix("synthetic:") {
            Some(name) => synthetic::by_name(name).map(Objective::Synthetic).map_err(search_err),
            None => Err(CliError::Config(format!("unknown objective `{other}`"))),
        },
    }
}

fn search(f: Finish, resume: bool) -> Result<Outcome, CliError> {
    let cfg = f.cfg;
    let s = &cfg.search;
    let objective = objective(cfg)?;
    let mut space = cfg.search_space.clone();
    if let Some(budget) = s.budget {
        space.max_trials = budget;
    }
    if let Objective::Desk(desk) = &objective {
        let d = desk.layout.dimension();
        if space.dimension != d {
            if space.initial_point.iter().any(|x| *x != 0.0) {
                return Err(CliError::Config(format!(
                    "objective {} has {d} coordinates but search_space.initial_point has {}",
                    s.objective,
                    space.initial_point.len()
                )));
            }
            space.dimension = d;
            space.initial_point = vec![0.0; d];
        }
    }
    let strategy = match s.mode {
        SearchMode::TrustRegion => SearchStrategy::TrustRegion,
        SearchMode::Cmaes => SearchStrategy::Cmaes { population: s.population },
        SearchMode::RandomBox => SearchStrategy::RandomBox { half_width: s.half_width },
    };

    let path = f.out.path(TRIAL_STORE_FILE);
    let (mut store, state, resumed, store_warnings) = if resume {
        let (store, loaded) = TrialStore::resume(&path).map_err(search_err)?;
        let n = loaded.records.len();
        let state = SearchState::replay(space.clone(), strategy.clone(), loaded.records).map_err(search_err)?;
        (store, state, n, loaded.warnings)
    } else {
        let state = SearchState::new(space.clone(), strategy.clone()).map_err(search_err)?;
        (TrialStore::create(&path).map_err(search_err)?, state, 0, Vec::new())
    };
    let state = run_search(state, objective.executor(), Some(&mut store)).map_err(search_err)?;

    let best_multipliers = match &objective {
        Objective::Desk(desk) if state.best_loss().is_some() => {
            let m = desk.layout.decode(&desk.taxonomy, state.best_point()).map_err(CliError::runtime)?;
            let doc = MultiplierDocument::new(&desk.taxonomy, m.clone());
            let p = f.out.path(MULTIPLIERS_FILE);
            std::fs::write(&p, doc.to_json()).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            Some(m)
        }
        _ => None,
    };
    let mut failures = Vec::new();
    if let Some(target) = s.target {
        match state.best_loss() {
            Some(best) if best < target => {}
            best => failures.push(format!("best loss {best:?} did not reach target {target}")),
        }
    }

    f.out.write_csv(
        "progress.csv",
        &["trial_index", "trial_id", "best_loss", "radius"],
        state.progress.iter().map(|p| vec![p.trial_index.to_string(), p.trial_id.to_string(), cell(p.best_loss), p.radius.to_string()]),
    )?;
    let mut header: Vec<String> = ["trial_id", "seed", "status", "final_loss", "last_stable_loss", "error"].map(String::from).to_vec();
    header.extend((0..space.dimension).map(|i| format!("x{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    f.out.write_csv("trials.csv", &header, state.trial_log.iter().map(trial_row))?;

    let payload = SearchPayload {
        objective: s.objective.clone(),
        strategy,
        best_point: state.best_point().to_vec(),
        best_loss: state.best_loss(),
        radius: state.radius(),
        trials: state.trial_log.len(),
        resumed_trials: resumed,
        store_warnings,
        best_multipliers,
        space,
    };
    f.write(vec![payload.space.seed], failures, payload)
}

fn trial_row(t: &TrialRecord) -> Vec<String> {
    let mut row = vec![
        t.trial_id.to_string(),
        t.seed.to_string(),
        label(&t.status),
        cell(t.final_loss),
        cell(t.last_stable_loss),
        t.error.clone().unwrap_or_default(),
    ];
    row.extend(t.point.iter().map(f64::to_string));
    row
}

// -------------------------------------------------------- schedule-enum

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEnumPayload {
    pub grid: ScheduleGrid,
    pub count: u128,
    /// Count reported for the reference grid, where one exists.
    pub reference_count: Option<u64>,
    /// Level sequences of every schedule, when listing was requested.
    pub schedules: Option<Vec<Vec<usize>>>,
    pub evaluation: Option<HorizonReport>,
}

fn schedule_enum(f: Finish) -> Result<Outcome, CliError> {
    let cfg = f.cfg;
    let s = &cfg.schedule;
    let grid = &cfg.schedule_grid;
    let count = grid.count().map_err(CliError::config)?;
    let schedules = if s.list {
        let all = enumerate(grid).map_err(CliError::config)?;
        f.out.write_csv(
            "schedules.csv",
            &["index", "levels", "learning_rates"],
            all.iter().enumerate().map(|(i, sch)| {
                let join = |v: Vec<String>| v.join(" ");
                vec![
                    i.to_string(),
                    join(sch.levels().iter().map(usize::to_string).collect()),
                    join(sch.learning_rates(grid).iter().map(f64::to_string).collect()),
                ]
            }),
        )?;
        Some(all.iter().map(|sch| sch.levels().to_vec()).collect())
    } else {
        None
    };
    let evaluation = if s.evaluate {
        let horizons: Vec<usize> = if s.horizons.is_empty() { (1..=grid.intervals).collect() } else { s.horizons.clone() };
        let ratios = ScaleRatios { batch: cfg.ratios.batch, tokens: cfg.ratios.tokens, ..cfg.model.shape_ratios() };
        let tokens_per_step = (cfg.train.batch_size * cfg.train.seq_len) as u64;
        if tokens_per_step == 0 || !grid.interval_tokens.is_multiple_of(tokens_per_step) {
            return Err(CliError::Config(format!(
                "schedule_grid.interval_tokens = {} is not a multiple of batch_size × seq_len = {tokens_per_step}",
                grid.interval_tokens
            )));
        }
        let steps = (grid.interval_tokens / tokens_per_step) as usize;
        let exec = DeskScheduleExecutor::new(&cfg.model, &ratios, cfg.train.clone(), steps, corpus(cfg)?).map_err(train_err)?;
        let report = best_schedule_per_horizon(grid, &horizons, &exec).map_err(CliError::config)?;
        f.out.write_csv(
            "stairs.csv",
            &["horizon", "interval", "level", "lr", "loss"],
            report.winners.iter().flat_map(|w| {
                w.schedule.levels().iter().enumerate().map(move |(i, level)| {
                    vec![w.horizon.to_string(), i.to_string(), level.to_string(), grid.level_lr(*level).to_string(), w.loss.to_string()]
                })
            }),
        )?;
        f.out.write_csv(
            "schedule_losses.csv",
            &["horizon", "levels", "loss", "diverged"],
            report.losses.iter().flat_map(|(h, list)| {
                list.iter().map(move |l| {
                    let levels: Vec<String> = l.schedule.levels().iter().map(usize::to_string).collect();
                    vec![h.to_string(), levels.join(" "), cell(l.loss), l.diverged.to_string()]
                })
            }),
        )?;
        Some(report)
    } else {
        None
    };
    let seeds = if s.evaluate { vec![cfg.model.seed, cfg.train.data_seed] } else { Vec::new() };
    let payload = ScheduleEnumPayload { grid: grid.clone(), count, reference_count: grid.reference_count(), schedules, evaluation };
    f.write(seeds, Vec::new(), payload)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPayload {
    pub report: TrainReport,
    pub parameters: usize,
    pub checkpoint: PathBuf,
}

fn train_cmd(f: Finish) -> Result<Outcome, CliError> {
    let cfg = f.cfg;
    let data = corpus(cfg)?;
    let ratios = ScaleRatios { batch: cfg.ratios.batch, tokens: cfg.ratios.tokens, ..cfg.model.shape_ratios() };
    let model = build_for(&cfg.model, &cfg.train, &ratios).map_err(train_err)?;
    let parameters = model.num_parameters();
    let (report, trainer) = train(model, &data, &cfg.train).map_err(train_err)?;
    let checkpoint = f.out.path(CHECKPOINT_FILE);
    checkpoint::save(&trainer, &checkpoint).map_err(CliError::runtime)?;
    f.out.write_csv("curve.csv", &["step", "loss"], report.curve.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]))?;
    f.write(vec![cfg.model.seed, cfg.train.data_seed], Vec::new(), TrainPayload { report, parameters, checkpoint })
}
