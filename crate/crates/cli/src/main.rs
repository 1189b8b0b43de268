use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hpt_cli::commands::{self, Command};
use hpt_cli::config::{ExperimentConfig, SearchMode};
use hpt_cli::report::OutputDir;
use hpt_cli::CliError;
use hpt_trainer::sweep::SweepAxis;

/// Hyperparameter transfer toolkit.
#[derive(Debug, Parser)]
#[command(name = "hpt", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment config (TOML, or JSON for `.json` files). Defaults apply
    /// to everything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for the report and tables.
    #[arg(long, global = true, default_value = "hpt-out")]
    out: PathBuf,
    /// Override every seed: model, data, search and SDE replicas.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and in-flight search trials.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Resolved hyperparameter table per tensor role, plus SDE multipliers.
    Scale,
    /// Monte-Carlo check that the SDE rules preserve iterate statistics.
    SdeCheck {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Activation and gradient sizes across widths.
    Coordcheck {
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Learning-rate sweep along one scaling axis.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Disable the batch/token transfer rule.
        #[arg(long)]
        no_rule: bool,
        #[arg(long)]
        max_shift: Option<u64>,
    },
    /// Hyperparameter search over a synthetic or training objective.
    Search {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SearchMode>,
        /// `synthetic:sphere`, `synthetic:cliff`, `desk:lr` or `desk:full`.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        target: Option<f64>,
        /// Continue from the trial store in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Count, list or evaluate stepwise learning-rate schedules.
    ScheduleEnum {
        #[arg(long)]
        intervals: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        list: bool,
        #[arg(long)]
        evaluate: bool,
    },
    /// Train the model once and save a checkpoint.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    parse_enum(s)
}

fn parse_mode(s: &str) -> Result<SearchMode, String> {
    parse_enum(s)
}

/// Fold command-line overrides into the config so the echoed config
/// reproduces the run.
fn apply(sub: &Sub, g: &Global, cfg: &mut ExperimentConfig) -> Command {
    if let Some(seed) = g.seed {
        cfg.model.seed = seed;
        cfg.train.data_seed = seed;
        cfg.search_space.seed = seed;
        cfg.sde.seed = seed;
    }
    if let Some(n) = g.concurrency {
        cfg.search_space.max_concurrency = n;
    }
    match sub {
        Sub::Scale => Command::Scale,
        Sub::SdeCheck { samples } => {
            if samples.is_some() {
                cfg.sde.samples = *samples;
            }
            Command::SdeCheck
        }
        Sub::Coordcheck { widths, steps } => {
            if let Some(w) = widths {
                cfg.coordcheck.widths = w.clone();
            }
            if let Some(s) = steps {
                cfg.coordcheck.steps = *s;
            }
            Command::CoordCheck
        }
        Sub::Sweep { axis, levels, no_rule, max_shift } => {
            if let Some(a) = axis {
                cfg.sweep.axis = *a;
            }
            if let Some(l) = levels {
                cfg.sweep.levels = l.clone();
            }
            if *no_rule {
                cfg.sweep.apply_rule = false;
            }
            if max_shift.is_some() {
                cfg.sweep.max_shift = *max_shift;
            }
            Command::Sweep
        }
        Sub::Search { mode, objective, budget, target, resume } => {
            if let Some(m) = mode {
                cfg.search.mode = *m;
            }
            if let Some(o) = objective {
                cfg.search.objective = o.clone();
            }
            if budget.is_some() {
                cfg.search.budget = *budget;
            }
            if target.is_some() {
                cfg.search.target = *target;
            }
            Command::Search { resume: *resume }
        }
        Sub::ScheduleEnum { intervals, k_max, list, evaluate } => {
            if let Some(l) = intervals {
                cfg.schedule_grid.intervals = *l;
            }
            if let Some(k) = k_max {
                cfg.schedule_grid.k_max = *k;
            }
            cfg.schedule.list |= *list;
            cfg.schedule.evaluate |= *evaluate;
            Command::ScheduleEnum
        }
        Sub::Train { steps } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            Command::Train
        }
    }
}

fn run(cli: Cli) -> Result<commands::Outcome, CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let command = apply(&cli.command, &cli.global, &mut cfg);
    if let Some(n) = cli.global.concurrency {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let out = OutputDir::create(&cli.global.out)?;
    commands::run(command, &cfg, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) if outcome.failures.is_empty() => {
            println!("{}", outcome.report.display());
            ExitCode::SUCCESS
        }
        Ok(outcome) => {
            println!("{}", outcome.report.display());
            let err = CliError::Assertion(outcome.failures);
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
