//! CMA-ES with standard adaptation constants and an asynchronous
//! generation gate: a generation advances once `P` of its own trials have
//! finished, and the update uses the `P` best unconsumed trials from any
//! generation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A finished trial waiting in the pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateCandidate {
    pub trial_id: u64,
    pub generation: u64,
    pub objective: f64,
}

/// `Some(selection)` once at least `population` candidates belong to
/// `generation`; the selection is the `population` lowest objectives in
/// the pool, ties broken by lower trial id.
pub fn cmaes_gate(pool: &[GateCandidate], generation: u64, population: usize) -> Option<Vec<GateCandidate>> {
    let ready = pool.iter().filter(|c| c.generation == generation).count();
    if ready < population {
        return None;
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| a.objective.total_cmp(&b.objective).then(a.trial_id.cmp(&b.trial_id)));
    sorted.truncate(population);
    Some(sorted)
}

/// Constants for dimension `n` and population `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaEsParams {
    pub population: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
}

impl CmaEsParams {
    pub fn default_population(dimension: usize) -> usize {
        4 + (3.0 * (dimension as f64).ln()).floor() as usize
    }

    pub fn new(dimension: usize, population: usize) -> Self {
        let n = dimension as f64;
        let mu = (population / 2).max(1);
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self {
            population,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CmaEsState {
    pub params: CmaEsParams,
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub generation: u64,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    pool: Vec<(GateCandidate, DVector<f64>)>,
    /// Trial ids used by each completed update, in order.
    pub updates: Vec<Vec<u64>>,
}

impl CmaEsState {
    pub fn new(initial: &[f64], sigma: f64, population: usize) -> Self {
        let n = initial.len();
        Self {
            params: CmaEsParams::new(n, population),
            mean: DVector::from_column_slice(initial),
            sigma,
            generation: 0,
            cov: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            pool: Vec::new(),
            updates: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// Draw `mean + σ B D z`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let z: DVector<f64> = DVector::from_iterator(self.dimension(), (0..self.dimension()).map(|_| rng.sample(StandardNormal)));
        let y = &self.basis * z.component_mul(&self.scales);
        (&self.mean + y * self.sigma).iter().copied().collect()
    }

    /// Add a finished trial to the pool and update if the gate opens.
    /// Returns whether a generation update happened.
    pub fn record(&mut self, candidate: GateCandidate, point: &[f64]) -> bool {
        self.pool.push((candidate, DVector::from_column_slice(point)));
        let candidates: Vec<GateCandidate> = self.pool.iter().map(|(c, _)| *c).collect();
        let Some(selected) = cmaes_gate(&candidates, self.generation, self.params.population) else {
            return false;
        };
        let ids: Vec<u64> = selected.iter().map(|c| c.trial_id).collect();
        let points: Vec<DVector<f64>> = ids
            .iter()
            .map(|id| self.pool.iter().find(|(c, _)| c.trial_id == *id).expect("selected from pool").1.clone())
            .collect();
        self.pool.retain(|(c, _)| !ids.contains(&c.trial_id));
        self.update(&points);
        self.updates.push(ids);
        self.generation += 1;
        true
    }

    /// Unconsumed finished trials.
    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    fn update(&mut self, ranked: &[DVector<f64>]) {
        let p = &self.params;
        let n = self.dimension() as f64;
        let old_mean = self.mean.clone();
        let steps: Vec<DVector<f64>> = ranked
            .iter()
            .take(p.weights.len())
            .map(|x| (x - &old_mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.dimension());
        for (w, y) in p.weights.iter().zip(&steps) {
            y_w += y * *w;
        }
        self.mean = &old_mean + &y_w * self.sigma;

        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|d| 1.0 / d))
            * self.basis.transpose();
        self.p_sigma = &self.p_sigma * (1.0 - p.c_sigma)
            + inv_sqrt * &y_w * (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        let gen = (self.generation + 1) as i32;
        let norm_ps = self.p_sigma.norm();
        let h_sigma = norm_ps / (1.0 - (1.0 - p.c_sigma).powi(2 * gen)).sqrt()
            < (1.4 + 2.0 / (n + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - p.c_c) + &y_w * (h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(self.dimension(), self.dimension());
        for (w, y) in p.weights.iter().zip(&steps) {
            rank_mu += y * y.transpose() * *w;
        }
        let rank_one = &self.p_c * self.p_c.transpose() + &self.cov * ((1.0 - h) * p.c_c * (2.0 - p.c_c));
        self.cov = &self.cov * (1.0 - p.c_1 - p.c_mu) + rank_one * p.c_1 + rank_mu * p.c_mu;
        self.sigma *= ((p.c_sigma / p.d_sigma) * (norm_ps / p.chi_n - 1.0)).exp();

        // Keep the covariance exactly symmetric before decomposing.
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(self.cov.clone());
        self.basis = eig.eigenvectors;
        self.scales = eig.eigenvalues.map(|v| v.max(1e-20).sqrt());
    }
}
