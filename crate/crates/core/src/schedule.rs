//! Non-increasing piecewise-constant learning-rate schedules: enumeration,
//! prefix-shared evaluation and per-horizon winners.
//!
//! A schedule is a non-decreasing sequence of level indices
//! `0 ≤ k₀ ≤ k₁ ≤ … ≤ k_max`; level `k` runs at `peak_lr / decay_base^k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("schedule count for {intervals} intervals and {k_max} decays overflows")]
    CountOverflow { intervals: usize, k_max: usize },
    #[error("{count} schedules exceed the enumeration limit {limit}")]
    TooMany { count: u128, limit: u128 },
    #[error("level sequence {0:?} is not non-decreasing within the grid")]
    InvalidSchedule(Vec<usize>),
    #[error("horizon {horizon} outside 1..={intervals}")]
    Horizon { horizon: usize, intervals: usize },
}

fn default_peak() -> f64 {
    0.0015
}
fn default_base() -> f64 {
    2.5
}
fn default_k_max() -> usize {
    4
}
fn default_intervals() -> usize {
    16
}
fn default_interval_tokens() -> u64 {
    77_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleGrid {
    #[serde(default = "default_peak")]
    pub peak_lr: f64,
    #[serde(default = "default_base")]
    pub decay_base: f64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    #[serde(default = "default_interval_tokens")]
    pub interval_tokens: u64,
}

impl Default for ScheduleGrid {
    fn default() -> Self {
        Self {
            peak_lr: default_peak(),
            decay_base: default_base(),
            k_max: default_k_max(),
            intervals: default_intervals(),
            interval_tokens: default_interval_tokens(),
        }
    }
}

/// Recorded run count for the reference 16-interval, 5-level grid. The
/// stars-and-bars count of that grid is 4845.
pub const REFERENCE_RUNS: u64 = 4842;

impl ScheduleGrid {
    pub fn new(intervals: usize, k_max: usize) -> Self {
        Self {
            intervals,
            k_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidGrid(m));
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.decay_base.is_finite() && self.decay_base > 0.0) {
            return bad(format!("decay_base {} must be positive", self.decay_base));
        }
        if self.intervals == 0 {
            return bad("intervals must be positive".into());
        }
        if self.interval_tokens == 0 {
            return bad("interval_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn level_lr(&self, level: usize) -> f64 {
        self.peak_lr / self.decay_base.powi(level as i32)
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..=self.k_max).map(|k| self.level_lr(k)).collect()
    }

    /// `C(intervals + k_max, k_max)`.
    pub fn count(&self) -> Result<u128, ScheduleError> {
        schedule_count(self.intervals, self.k_max)
    }

    /// Reference run count for this grid, where one exists.
    pub fn reference_count(&self) -> Option<u64> {
        (self.intervals == 16 && self.k_max == 4).then_some(REFERENCE_RUNS)
    }
}

/// Number of non-decreasing sequences of length `intervals` over
/// `0..=k_max`.
pub fn schedule_count(intervals: usize, k_max: usize) -> Result<u128, ScheduleError> {
    let overflow = ScheduleError::CountOverflow { intervals, k_max };
    let n = (intervals as u128).checked_add(k_max as u128).ok_or(overflow.clone())?;
    let k = k_max.min(intervals) as u128;
    let mut acc: u128 = 1;
    for i in 1..=k {
        // acc · (n − k + i) / i stays integral at every step.
        acc = acc.checked_mul(n - k + i).ok_or(overflow.clone())? / i;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    levels: Vec<usize>,
}

impl Schedule {
    pub fn new(levels: Vec<usize>, k_max: usize) -> Result<Self, ScheduleError> {
        let ok = levels.windows(2).all(|w| w[0] <= w[1]) && levels.iter().all(|l| *l <= k_max);
        if ok {
            Ok(Self { levels })
        } else {
            Err(ScheduleError::InvalidSchedule(levels))
        }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn learning_rates(&self, grid: &ScheduleGrid) -> Vec<f64> {
        self.levels.iter().map(|k| grid.level_lr(*k)).collect()
    }

    pub fn truncated(&self, horizon: usize) -> Schedule {
        Schedule { levels: self.levels[..horizon.min(self.len())].to_vec() }
    }

    pub fn is_prefix_of(&self, other: &Schedule) -> bool {
        other.levels.starts_with(&self.levels)
    }
}

/// Lexicographic iterator over all schedules of a grid.
#[derive(Debug, Clone)]
pub struct ScheduleIter {
    next: Option<Vec<usize>>,
    k_max: usize,
}

impl Iterator for ScheduleIter {
    type Item = Schedule;

    fn next(&mut self) -> Option<Schedule> {
        let current = self.next.take()?;
        // Successor: bump the rightmost entry below k_max and flatten the
        // tail to that value.
        if let Some(i) = current.iter().rposition(|l| *l < self.k_max) {
            let mut succ = current.clone();
            let v = succ[i] + 1;
            succ[i..].iter_mut().for_each(|l| *l = v);
            self.next = Some(succ);
        }
        Some(Schedule { levels: current })
    }
}

pub fn iter_schedules(intervals: usize, k_max: usize) -> ScheduleIter {
    ScheduleIter { next: Some(vec![0; intervals]), k_max }
}

/// Enumerations larger than this are refused; use [`iter_schedules`].
pub const ENUMERATION_LIMIT: u128 = 50_000_000;

pub fn enumerate(grid: &ScheduleGrid) -> Result<Vec<Schedule>, ScheduleError> {
    grid.validate()?;
    let count = grid.count()?;
    if count > ENUMERATION_LIMIT {
        return Err(ScheduleError::TooMany { count, limit: ENUMERATION_LIMIT });
    }
    Ok(iter_schedules(grid.intervals, grid.k_max).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixNode {
    pub level: usize,
    /// Number of intervals covered, i.e. the prefix length.
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Trie of distinct schedule prefixes. Each node is one interval of
/// training, started from its parent's checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixTree {
    pub nodes: Vec<PrefixNode>,
    pub roots: Vec<usize>,
    /// For each input schedule, the node of its last interval.
    pub leaves: Vec<usize>,
}

impl PrefixTree {
    pub fn build(schedules: &[Schedule]) -> Self {
        let mut nodes: Vec<PrefixNode> = Vec::new();
        let mut roots: Vec<usize> = Vec::new();
        let mut leaves = Vec::with_capacity(schedules.len());
        for s in schedules {
            let mut parent: Option<usize> = None;
            for (i, level) in s.levels.iter().enumerate() {
                let siblings = match parent {
                    Some(p) => &nodes[p].children,
                    None => &roots,
                };
                let found = siblings.iter().copied().find(|c| nodes[*c].level == *level);
                let node = found.unwrap_or_else(|| {
                    let id = nodes.len();
                    nodes.push(PrefixNode { level: *level, depth: i + 1, parent, children: Vec::new() });
                    match parent {
                        Some(p) => nodes[p].children.push(id),
                        None => roots.push(id),
                    }
                    id
                });
                parent = Some(node);
            }
            leaves.push(parent.expect("schedules are nonempty"));
        }
        Self { nodes, roots, leaves }
    }

    /// Intervals trained when every node is trained once.
    pub fn trained_intervals(&self) -> usize {
        self.nodes.len()
    }

    /// Level sequence from the root to `node`.
    pub fn prefix(&self, mut node: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes[node].depth);
        loop {
            out.push(self.nodes[node].level);
            match self.nodes[node].parent {
                Some(p) => node = p,
                None => break,
            }
        }
        out.reverse();
        out
    }
}

/// Result of training one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalLoss {
    /// Loss after the interval; non-finite means training diverged.
    pub loss: f64,
}

/// Trains a model one interval at a time from cloneable checkpoints.
pub trait ScheduleExecutor {
    type Checkpoint: Clone;

    fn initial(&self) -> Self::Checkpoint;

    /// Train `interval` (0-based) at `lr`, continuing from `state`.
    fn train_interval(&self, state: &mut Self::Checkpoint, interval: usize, lr: f64) -> IntervalLoss;
}

/// Loss of one schedule (or schedule prefix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLoss {
    pub schedule: Schedule,
    /// Final loss when stable; otherwise the last stable loss, if any.
    pub loss: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy)]
struct NodeOutcome {
    loss: f64,
    diverged: bool,
}

fn step<E: ScheduleExecutor>(
    executor: &E,
    state: &mut E::Checkpoint,
    interval: usize,
    lr: f64,
    parent: Option<NodeOutcome>,
) -> NodeOutcome {
    if let Some(p) = parent.filter(|p| p.diverged) {
        return p;
    }
    let r = executor.train_interval(state, interval, lr);
    if r.loss.is_finite() {
        NodeOutcome { loss: r.loss, diverged: false }
    } else {
        NodeOutcome {
            loss: parent.map_or(f64::NAN, |p| p.loss),
            diverged: true,
        }
    }
}

fn to_loss(schedule: Schedule, o: NodeOutcome) -> ScheduleLoss {
    ScheduleLoss {
        schedule,
        loss: o.loss.is_finite().then_some(o.loss),
        diverged: o.diverged,
    }
}

/// Evaluate every node of the tree, training each once from its parent's
/// checkpoint (depth-first; at most one checkpoint per depth is alive).
/// Returns per-node outcomes in node order.
fn evaluate_tree<E: ScheduleExecutor>(grid: &ScheduleGrid, tree: &PrefixTree, executor: &E) -> Vec<NodeOutcome> {
    let mut out: Vec<Option<NodeOutcome>> = vec![None; tree.nodes.len()];
    let root_state = executor.initial();
    // (node, parent checkpoint, parent outcome)
    let mut stack: Vec<(usize, E::Checkpoint, Option<NodeOutcome>)> = tree
        .roots
        .iter()
        .rev()
        .map(|r| (*r, root_state.clone(), None))
        .collect();
    while let Some((node, mut state, parent)) = stack.pop() {
        let n = &tree.nodes[node];
        let o = step(executor, &mut state, n.depth - 1, grid.level_lr(n.level), parent);
        out[node] = Some(o);
        for c in n.children.iter().rev() {
            stack.push((*c, state.clone(), Some(o)));
        }
    }
    out.into_iter().map(|o| o.expect("every node visited")).collect()
}

/// Losses of `schedules` with prefix sharing.
pub fn evaluate_shared<E: ScheduleExecutor>(grid: &ScheduleGrid, schedules: &[Schedule], executor: &E) -> Vec<ScheduleLoss> {
    let tree = PrefixTree::build(schedules);
    let nodes = evaluate_tree(grid, &tree, executor);
    schedules
        .iter()
        .zip(&tree.leaves)
        .map(|(s, leaf)| to_loss(s.clone(), nodes[*leaf]))
        .collect()
}

/// Losses of `schedules`, each trained from scratch.
pub fn evaluate_independent<E: ScheduleExecutor>(grid: &ScheduleGrid, schedules: &[Schedule], executor: &E) -> Vec<ScheduleLoss> {
    schedules
        .iter()
        .map(|s| {
            let mut state = executor.initial();
            let mut o: Option<NodeOutcome> = None;
            for (i, level) in s.levels.iter().enumerate() {
                o = Some(step(executor, &mut state, i, grid.level_lr(*level), o));
            }
            to_loss(s.clone(), o.expect("nonempty schedule"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonWinner {
    pub horizon: usize,
    pub schedule: Schedule,
    pub loss: f64,
    /// Stable schedules evaluated at this horizon.
    pub candidates: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixCheck {
    pub shorter: usize,
    pub longer: usize,
    pub is_prefix: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub winners: Vec<HorizonWinner>,
    pub prefix_checks: Vec<PrefixCheck>,
    pub trained_intervals: usize,
    /// Losses of every schedule prefix, keyed by horizon.
    pub losses: BTreeMap<usize, Vec<ScheduleLoss>>,
}

/// For each horizon, the lowest-loss non-diverged schedule of that length
/// (ties go to the lexicographically first). One prefix tree over the full
/// grid covers every horizon.
pub fn best_schedule_per_horizon<E: ScheduleExecutor>(
    grid: &ScheduleGrid,
    horizons: &[usize],
    executor: &E,
) -> Result<HorizonReport, ScheduleError> {
    grid.validate()?;
    for &h in horizons {
        if h == 0 || h > grid.intervals {
            return Err(ScheduleError::Horizon { horizon: h, intervals: grid.intervals });
        }
    }
    let longest = horizons.iter().copied().max().unwrap_or(0);
    if longest == 0 {
        return Ok(HorizonReport { winners: vec![], prefix_checks: vec![], trained_intervals: 0, losses: BTreeMap::new() });
    }
    let count = schedule_count(longest, grid.k_max)?;
    if count > ENUMERATION_LIMIT {
        return Err(ScheduleError::TooMany { count, limit: ENUMERATION_LIMIT });
    }
    let schedules: Vec<Schedule> = iter_schedules(longest, grid.k_max).collect();
    let tree = PrefixTree::build(&schedules);
    let outcomes = evaluate_tree(grid, &tree, executor);

    let mut losses: BTreeMap<usize, Vec<ScheduleLoss>> = BTreeMap::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        if horizons.contains(&node.depth) {
            let s = Schedule { levels: tree.prefix(i) };
            losses.entry(node.depth).or_default().push(to_loss(s, outcomes[i]));
        }
    }
    let mut winners = Vec::new();
    for &h in horizons {
        let list = losses.get_mut(&h).expect("horizon present");
        list.sort_by(|a, b| a.schedule.cmp(&b.schedule));
        let stable: Vec<&ScheduleLoss> = list.iter().filter(|l| !l.diverged).collect();
        let best = stable
            .iter()
            .min_by(|a, b| {
                a.loss
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&b.loss.unwrap_or(f64::INFINITY))
                    .then_with(|| a.schedule.cmp(&b.schedule))
            })
            .copied();
        if let Some(best) = best {
            winners.push(HorizonWinner {
                horizon: h,
                schedule: best.schedule.clone(),
                loss: best.loss.unwrap_or(f64::INFINITY),
                candidates: stable.len(),
                diverged: list.len() - stable.len(),
            });
        }
    }
    winners.sort_by_key(|w| w.horizon);
    let mut prefix_checks = Vec::new();
    for (i, a) in winners.iter().enumerate() {
        for b in &winners[i + 1..] {
            prefix_checks.push(PrefixCheck {
                shorter: a.horizon,
                longer: b.horizon,
                is_prefix: a.schedule.is_prefix_of(&b.schedule),
            });
        }
    }
    Ok(HorizonReport { winners, prefix_checks, trained_intervals: tree.trained_intervals(), losses })
}
