//! Exemplar SVMs: one linear SVM per probe document, trained with the probe
//! as the single positive against a fixed pool of negatives. The decision
//! value of the probe's model serves as its similarity function.
//!
//! The primal objective is
//!
//! ```text
//! ½‖w‖² + c_pos·max(0, 1 − (wᵀx⁺ + b)) + c_neg·Σⱼ max(0, 1 + (wᵀxⱼ⁻ + b))
//! ```
//!
//! with an unregularized bias. Its dual carries the equality constraint
//! `Σ yᵢαᵢ = 0`, so it is optimized two coordinates at a time (maximal
//! violating pair with second-order selection) on a precomputed Gram matrix.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RetrievalRun, Scorer};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsvmModel {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub c_pos: f64,
    pub c_neg: f64,
    pub probe_id: String,
    /// Primal objective at the returned solution.
    pub objective: f64,
    pub iterations: usize,
}

impl EsvmModel {
    /// Raw decision value `wᵀx + b`.
    pub fn score(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::precondition(format!(
                "model has dimension {}, encoding has {}",
                self.weights.len(),
                x.len()
            )));
        }
        Ok(self.weights.dot(x) + self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when the maximal KKT violation drops below this.
    pub tol: f64,
    /// Iteration cap; 0 means `max(100_000, 100·l)` for `l` training points.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsvmConfig {
    /// Candidate margin parameters `c`; the chosen one gives `c_neg = c` and
    /// `c_pos = c·m` for `m` negatives.
    pub c_grid: Vec<f64>,
    pub solver: SolverOptions,
}

impl Default for EsvmConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0],
            solver: SolverOptions::default(),
        }
    }
}

impl EsvmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::config("esvm c grid is empty"));
        }
        if self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("esvm c grid values must be finite and > 0"));
        }
        Ok(())
    }
}

/// `c_pos` for a given `c` and number of negatives.
pub fn balanced_costs(c: f64, negatives: usize) -> (f64, f64) {
    (c * negatives as f64, c)
}

/// Negative encodings with their Gram matrix, shared across probes.
#[derive(Debug, Clone)]
pub struct NegativePool {
    vectors: Vec<DVector<f64>>,
    gram: Vec<f64>,
}

impl NegativePool {
    pub fn new(vectors: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::precondition("exemplar svm needs at least one negative"));
        };
        let d = first.len();
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::precondition("negatives differ in dimension"));
        }
        if vectors.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::numeric("non-finite negative encoding"));
        }
        let m = vectors.len();
        let mut gram = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let k = vectors[i].dot(&vectors[j]);
                gram[i * m + j] = k;
                gram[j * m + i] = k;
            }
        }
        Ok(Self { vectors, gram })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// Trains against all negatives.
    pub fn train(&self, probe_id: &str, positive: &DVector<f64>, c_pos: f64, c_neg: f64, opts: &SolverOptions) -> Result<EsvmModel> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.train_subset(probe_id, positive, &all, c_pos, c_neg, opts)
    }

    /// Trains against the negatives at `subset` (indices into the pool).
    pub fn train_subset(
        &self,
        probe_id: &str,
        positive: &DVector<f64>,
        subset: &[usize],
        c_pos: f64,
        c_neg: f64,
        opts: &SolverOptions,
    ) -> Result<EsvmModel> {
        if subset.is_empty() {
            return Err(Error::precondition("exemplar svm needs at least one negative"));
        }
        if positive.len() != self.dim() {
            return Err(Error::precondition("positive and negatives differ in dimension"));
        }
        if positive.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite positive encoding"));
        }
        if !(c_pos > 0.0 && c_neg > 0.0 && c_pos.is_finite() && c_neg.is_finite()) {
            return Err(Error::precondition("svm costs must be finite and > 0"));
        }

        // Point 0 is the positive, points 1.. the selected negatives.
        let l = subset.len() + 1;
        let m = self.len();
        let mut kernel = vec![0.0; l * l];
        kernel[0] = positive.dot(positive);
        for (a, &i) in subset.iter().enumerate() {
            let k = positive.dot(&self.vectors[i]);
            kernel[a + 1] = k;
            kernel[(a + 1) * l] = k;
            for (b, &j) in subset.iter().enumerate() {
                kernel[(a + 1) * l + b + 1] = self.gram[i * m + j];
            }
        }
        let mut y = vec![-1.0; l];
        y[0] = 1.0;
        let mut cost = vec![c_neg; l];
        cost[0] = c_pos;

        let dual = solve_dual(&kernel, &y, &cost, opts);

        let mut weights = positive * dual.alpha[0];
        for (a, &i) in subset.iter().enumerate() {
            weights.axpy(-dual.alpha[a + 1], &self.vectors[i], 1.0);
        }
        let bias = -dual.rho;
        let mut objective = 0.5 * weights.norm_squared() + c_pos * (1.0 - (weights.dot(positive) + bias)).max(0.0);
        for &i in subset {
            objective += c_neg * (1.0 + weights.dot(&self.vectors[i]) + bias).max(0.0);
        }
        if !objective.is_finite() {
            return Err(Error::numeric("exemplar svm objective is not finite"));
        }
        Ok(EsvmModel {
            weights,
            bias,
            c_pos,
            c_neg,
            probe_id: probe_id.to_string(),
            objective,
            iterations: dual.iterations,
        })
    }
}

/// Trains one exemplar SVM for a single positive against `negatives`.
pub fn train_esvm(positive: &DVector<f64>, negatives: &[DVector<f64>], c_pos: f64, c_neg: f64) -> Result<EsvmModel> {
    NegativePool::new(negatives.to_vec())?.train("", positive, c_pos, c_neg, &SolverOptions::default())
}

struct DualSolution {
    alpha: Vec<f64>,
    rho: f64,
    iterations: usize,
}

/// Minimizes `½αᵀQα − 1ᵀα` subject to `yᵀα = 0`, `0 ≤ αᵢ ≤ Cᵢ`, where
/// `Qᵢⱼ = yᵢyⱼKᵢⱼ`.
fn solve_dual(kernel: &[f64], y: &[f64], cost: &[f64], opts: &SolverOptions) -> DualSolution {
    let l = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[i * l + j];
    let qd: Vec<f64> = (0..l).map(|i| kernel[i * l + i]).collect();
    let max_iter = if opts.max_iter == 0 { (100 * l).max(100_000) } else { opts.max_iter };

    let mut alpha = vec![0.0; l];
    let mut grad = vec![-1.0; l];
    let upper = |a: &[f64], i: usize| a[i] >= cost[i];
    let lower = |a: &[f64], i: usize| a[i] <= 0.0;

    let mut iterations = 0;
    while iterations < max_iter {
        // Working set: i maximizes −yᵢGᵢ over I_up, j by second-order gain.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..l {
            let v = -y[t] * grad[t];
            let movable = if y[t] > 0.0 { !upper(&alpha, t) } else { !lower(&alpha, t) };
            if movable && v >= gmax {
                gmax = v;
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let mut gmax2 = f64::NEG_INFINITY;
        let mut best_obj = f64::INFINITY;
        let mut j_sel = None;
        for t in 0..l {
            let movable = if y[t] > 0.0 { !lower(&alpha, t) } else { !upper(&alpha, t) };
            if !movable {
                continue;
            }
            let v = y[t] * grad[t];
            gmax2 = gmax2.max(v);
            let grad_diff = gmax + v;
            if grad_diff > 0.0 {
                let quad = qd[i] + qd[t] - 2.0 * kernel[i * l + t];
                let obj = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best_obj {
                    best_obj = obj;
                    j_sel = Some(t);
                }
            }
        }
        let Some(j) = j_sel else { break };
        if gmax + gmax2 < opts.tol {
            break;
        }

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (ci, cj) = (cost[i], cost[j]);
        if y[i] != y[j] {
            let quad = (qd[i] + qd[j] + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(i, t) * di + q(j, t) * dj;
        }
        iterations += 1;
    }

    // Threshold from free variables, else the midpoint of the feasible range.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..l {
        let yg = y[t] * grad[t];
        if upper(&alpha, t) {
            if y[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if lower(&alpha, t) {
            if y[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    DualSolution { alpha, rho, iterations }
}

/// Trains one model per probe against the full negative pool.
pub fn train_exemplars(
    probe_ids: &[String],
    probes: &[DVector<f64>],
    pool: &NegativePool,
    c: f64,
    opts: &SolverOptions,
) -> Result<Vec<EsvmModel>> {
    if probe_ids.len() != probes.len() {
        return Err(Error::precondition("one id per probe required"));
    }
    let (c_pos, c_neg) = balanced_costs(c, pool.len());
    probes
        .par_iter()
        .zip(probe_ids.par_iter())
        .map(|(p, id)| pool.train(id, p, c_pos, c_neg, opts))
        .collect()
}

/// Outcome of margin-parameter selection on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CSelection {
    pub c: f64,
    /// Costs for test-time probes against all training negatives.
    pub c_pos: f64,
    pub c_neg: f64,
    /// `(c, training mAP)` for every grid value, ascending in `c`.
    pub grid: Vec<(f64, f64)>,
}

/// Training-set mAP of the exemplar protocol for one `c`: each training
/// document is a probe, negatives are the training documents of other
/// writers, and the probe's model ranks all other training documents.
pub fn training_map(pool: &NegativePool, writers: &[String], c: f64, opts: &SolverOptions) -> Result<f64> {
    let n = pool.len();
    let models: Vec<EsvmModel> = (0..n)
        .into_par_iter()
        .map(|i| {
            let negatives: Vec<usize> = (0..n).filter(|&j| writers[j] != writers[i]).collect();
            let (c_pos, c_neg) = balanced_costs(c, negatives.len());
            pool.train_subset(&i.to_string(), &pool.vectors[i], &negatives, c_pos, c_neg, opts)
        })
        .collect::<Result<_>>()?;
    let run = RetrievalRun {
        encodings: pool.vectors.clone(),
        writers: writers.to_vec(),
        scorer: Scorer::Esvm(models),
    };
    Ok(evaluate(&run)?.map)
}

/// Picks the grid value with the best training mAP; ties go to the smaller `c`.
pub fn select_c(train: &[DVector<f64>], writers: &[String], cfg: &EsvmConfig) -> Result<CSelection> {
    cfg.validate()?;
    if train.len() != writers.len() {
        return Err(Error::precondition("one writer per training encoding required"));
    }
    let distinct: std::collections::BTreeSet<&String> = writers.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::precondition("c selection needs at least two training writers"));
    }
    let pool = NegativePool::new(train.to_vec())?;
    let mut grid: Vec<f64> = cfg.c_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut scored = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &c in &grid {
        let map = training_map(&pool, writers, c, &cfg.solver)?;
        scored.push((c, map));
        if best.is_none_or(|(_, m)| map > m) {
            best = Some((c, map));
        }
    }
    let (c, _) = best.expect("non-empty grid");
    let (c_pos, c_neg) = balanced_costs(c, train.len());
    Ok(CSelection { c, c_pos, c_neg, grid: scored })
}
