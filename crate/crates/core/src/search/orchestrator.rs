use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cmaes::{CmaEsParams, CmaEsState, GateCandidate};
use super::store::TrialStore;
use super::trust_region::TrustRegion;
use super::{
    trial_rng, trial_seed, CompletionOrder, SearchError, SearchSpace, TrialExecutor, TrialOutcome,
    TrialRecord, TrialStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SearchStrategy {
    TrustRegion,
    /// Population defaults to `4 + ⌊3 ln d⌋`.
    Cmaes {
        #[serde(default)]
        population: Option<usize>,
    },
    /// Uniform sampling in a fixed box around the initial point.
    RandomBox { half_width: f64 },
}

/// One line of the progress table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub trial_index: usize,
    pub trial_id: u64,
    pub best_loss: Option<f64>,
    pub radius: f64,
}

/// Single-writer search state. Every change goes through [`record`],
/// so replaying a trial log in its recorded order rebuilds the state.
///
/// [`record`]: SearchState::record
#[derive(Debug, Clone)]
pub struct SearchState {
    pub space: SearchSpace,
    pub strategy: SearchStrategy,
    pub region: TrustRegion,
    pub cmaes: Option<CmaEsState>,
    pub trial_log: Vec<TrialRecord>,
    pub progress: Vec<ProgressRow>,
    recorded: BTreeSet<u64>,
    worst_finished: Option<f64>,
}

impl SearchState {
    pub fn new(space: SearchSpace, strategy: SearchStrategy) -> Result<Self, SearchError> {
        let space = space.validated()?;
        let region = match &strategy {
            SearchStrategy::RandomBox { half_width } => {
                if !(half_width.is_finite() && *half_width >= 0.0) {
                    return Err(SearchError::InvalidSpace(format!("box half-width {half_width}")));
                }
                TrustRegion::random_box(&space, *half_width)
            }
            _ => TrustRegion::new(&space),
        };
        let cmaes = match &strategy {
            SearchStrategy::Cmaes { population } => {
                let p = population.unwrap_or_else(|| CmaEsParams::default_population(space.dimension));
                if p < 2 {
                    return Err(SearchError::InvalidSpace("population must be at least 2".into()));
                }
                if space.initial_radius <= 0.0 {
                    return Err(SearchError::InvalidSpace("CMA-ES needs a positive initial radius".into()));
                }
                Some(CmaEsState::new(&space.initial_point, space.initial_radius, p))
            }
            _ => None,
        };
        Ok(Self {
            space,
            strategy,
            region,
            cmaes,
            trial_log: Vec::new(),
            progress: Vec::new(),
            recorded: BTreeSet::new(),
            worst_finished: None,
        })
    }

    /// Rebuild a state from a trial log in recorded order.
    pub fn replay(
        space: SearchSpace,
        strategy: SearchStrategy,
        records: impl IntoIterator<Item = TrialRecord>,
    ) -> Result<Self, SearchError> {
        let mut state = Self::new(space, strategy)?;
        for r in records {
            state.record(r)?;
        }
        Ok(state)
    }

    pub fn best_point(&self) -> &[f64] {
        &self.region.best_point
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.region.best_loss
    }

    pub fn radius(&self) -> f64 {
        self.region.radius
    }

    pub fn next_trial_id(&self) -> u64 {
        self.recorded.last().map_or(0, |id| id + 1)
    }

    /// Point, executor seed and CMA-ES generation for `trial_id`. Trial 0
    /// always evaluates the initial point.
    pub fn propose(&self, trial_id: u64) -> (Vec<f64>, u64, Option<u64>) {
        let mut rng = trial_rng(self.space.seed, trial_id);
        let seed = trial_seed(&mut rng);
        let generation = self.cmaes.as_ref().map(|es| es.generation);
        if trial_id == 0 {
            return (self.space.initial_point.clone(), seed, generation);
        }
        let point = match &self.cmaes {
            Some(es) => es.sample(&mut rng),
            None => self.region.propose(&mut rng),
        };
        (point, seed, generation)
    }

    fn objective(&self, trial: &TrialRecord) -> f64 {
        match (trial.status, trial.final_loss, trial.last_stable_loss) {
            (TrialStatus::Finished, Some(loss), _) => loss,
            (TrialStatus::Diverged, _, Some(last)) => last,
            _ => self
                .space
                .divergence_penalty
                .or(self.worst_finished.map(|w| w + 1.0))
                .unwrap_or(f64::MAX),
        }
    }

    pub fn record(&mut self, trial: TrialRecord) -> Result<(), SearchError> {
        if !trial.status.is_terminal() {
            return Err(SearchError::NotTerminal(trial.trial_id));
        }
        if trial.point.len() != self.space.dimension {
            return Err(SearchError::Dimension {
                trial: trial.trial_id,
                got: trial.point.len(),
                expected: self.space.dimension,
            });
        }
        if !self.recorded.insert(trial.trial_id) {
            return Err(SearchError::DuplicateTrial(trial.trial_id));
        }
        self.region.record(&trial);
        let objective = self.objective(&trial);
        if let Some(es) = self.cmaes.as_mut() {
            let candidate = GateCandidate {
                trial_id: trial.trial_id,
                generation: trial.generation.unwrap_or(es.generation),
                objective,
            };
            es.record(candidate, &trial.point);
        }
        if let Some(loss) = trial.final_loss {
            self.worst_finished = Some(self.worst_finished.map_or(loss, |w| w.max(loss)));
        }
        self.progress.push(ProgressRow {
            trial_index: self.trial_log.len(),
            trial_id: trial.trial_id,
            best_loss: self.region.best_loss,
            radius: self.region.radius,
        });
        self.trial_log.push(trial);
        Ok(())
    }
}

fn evaluate(executor: &dyn TrialExecutor, point: &[f64], seed: u64) -> (TrialOutcome, f64) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(|| executor.evaluate(point, seed))).unwrap_or_else(|e| {
        let reason = e
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| e.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "executor panicked".to_string());
        TrialOutcome::Failed { reason }
    });
    (outcome, start.elapsed().as_secs_f64())
}

struct Job {
    trial_id: u64,
    point: Vec<f64>,
    seed: u64,
}

/// Run trials until `max_trials` ids have been issued, continuing from
/// whatever `state` already holds. Each recorded trial is appended to
/// `store` before the next proposal is made.
pub fn run_search(
    mut state: SearchState,
    executor: &dyn TrialExecutor,
    mut store: Option<&mut TrialStore>,
) -> Result<SearchState, SearchError> {
    let concurrency = state.space.max_concurrency;
    let max_trials = state.space.max_trials;
    let order = state.space.completion_order;
    let wall = state.space.record_wall_time;
    let mut next_id = state.next_trial_id();

    let mut commit = |state: &mut SearchState, mut rec: TrialRecord, secs: f64| -> Result<(), SearchError> {
        if wall {
            rec.wall_time_secs = Some(secs);
        }
        if let Some(s) = store.as_deref_mut() {
            s.append(&rec)?;
        }
        state.record(rec)
    };

    if concurrency == 1 {
        while next_id < max_trials {
            let (point, seed, generation) = state.propose(next_id);
            let (outcome, secs) = evaluate(executor, &point, seed);
            let mut rec = TrialRecord::from_outcome(next_id, point, seed, outcome);
            rec.generation = generation;
            commit(&mut state, rec, secs)?;
            next_id += 1;
        }
        return Ok(state);
    }

    let (job_tx, job_rx) = mpsc::channel::<Job>();
    let job_rx = Mutex::new(job_rx);
    let (done_tx, done_rx) = mpsc::channel::<(u64, TrialOutcome, f64)>();
    let workers = concurrency.min(max_trials.saturating_sub(next_id) as usize);

    std::thread::scope(|scope| -> Result<(), SearchError> {
        for _ in 0..workers {
            let done_tx = done_tx.clone();
            let job_rx = &job_rx;
            scope.spawn(move || loop {
                let job = match job_rx.lock().expect("job queue").recv() {
                    Ok(job) => job,
                    Err(_) => break,
                };
                let (outcome, secs) = evaluate(executor, &job.point, job.seed);
                if done_tx.send((job.trial_id, outcome, secs)).is_err() {
                    break;
                }
            });
        }
        drop(done_tx);

        // trial id → (point, seed, generation)
        let mut in_flight: BTreeMap<u64, (Vec<f64>, u64, Option<u64>)> = BTreeMap::new();
        let mut arrived: BTreeMap<u64, (TrialOutcome, f64)> = BTreeMap::new();

        let fill = |state: &SearchState, in_flight: &mut BTreeMap<_, _>, next_id: &mut u64| {
            while in_flight.len() < concurrency && *next_id < max_trials {
                let (point, seed, generation) = state.propose(*next_id);
                job_tx
                    .send(Job { trial_id: *next_id, point: point.clone(), seed })
                    .expect("workers alive");
                in_flight.insert(*next_id, (point, seed, generation));
                *next_id += 1;
            }
        };

        let result = (|| {
            fill(&state, &mut in_flight, &mut next_id);
            while !in_flight.is_empty() {
                let (id, outcome, secs) = done_rx.recv().expect("a worker holds each in-flight trial");
                arrived.insert(id, (outcome, secs));
                loop {
                    let ready = match order {
                        CompletionOrder::Submission => in_flight
                            .keys()
                            .next()
                            .copied()
                            .filter(|first| arrived.contains_key(first)),
                        CompletionOrder::Arrival => arrived.keys().next().copied(),
                    };
                    let Some(id) = ready else { break };
                    let (outcome, secs) = arrived.remove(&id).expect("ready");
                    let (point, seed, generation) = in_flight.remove(&id).expect("in flight");
                    let mut rec = TrialRecord::from_outcome(id, point, seed, outcome);
                    rec.generation = generation;
                    commit(&mut state, rec, secs)?;
                    // Refill after every record so each proposal sees a
                    // well-defined prefix of the log.
                    fill(&state, &mut in_flight, &mut next_id);
                }
            }
            Ok(())
        })();
        drop(job_tx);
        result
    })?;
    Ok(state)
}
