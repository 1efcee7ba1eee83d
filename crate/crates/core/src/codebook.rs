//! Background model: K cluster centers trained with mini-batch k-means.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trained dictionary of cluster centers, one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centers: DMatrix<f64>,
    pub seed: u64,
    /// Mean squared distance to the nearest center on the evaluation sample;
    /// `None` for centers that were not trained here.
    pub inertia: Option<f64>,
    /// Mini-batch iterations actually run.
    pub iterations: usize,
}

impl Codebook {
    /// Wraps fixed centers, e.g. for tests or externally trained models.
    pub fn from_centers(centers: DMatrix<f64>) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(Error::precondition("codebook needs at least one center"));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("codebook centers must be finite"));
        }
        Ok(Self {
            centers,
            seed: 0,
            inertia: None,
            iterations: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn center(&self, k: usize) -> DVector<f64> {
        self.centers.row(k).transpose()
    }

    /// Index of the nearest center in Euclidean distance, smallest index on ties.
    pub fn assign_nearest(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(Error::precondition(format!(
                "descriptor has dimension {}, codebook has {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(nearest(&self.rows(), self.dim(), x).0)
    }

    /// Row-major copy of the centers.
    pub(crate) fn rows(&self) -> Vec<f64> {
        row_major(&self.centers)
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Nearest center and its squared distance over row-major `centers`.
pub(crate) fn nearest(centers: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks_exact(dim).enumerate() {
        let d2: f64 = c.iter().zip(x).map(|(a, b)| (b - a) * (b - a)).sum();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub batch_size: usize,
    /// Upper bound on mini-batch iterations.
    pub iterations: usize,
    /// Stop once the smoothed batch inertia has not improved for this many
    /// consecutive iterations; 0 always runs `iterations`.
    pub max_no_improvement: usize,
    pub seed: u64,
}

impl KMeansParams {
    /// Defaults: batch of 1024, at most 250·K iterations, stop after 100
    /// iterations without improvement.
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            batch_size: 1024,
            iterations: 250 * k,
            max_no_improvement: 100,
            seed,
        }
    }
}

const EVAL_SAMPLE: usize = 4096;

/// Mini-batch k-means with per-center learning rate `1/count`.
pub fn train_minibatch_kmeans(x: &DMatrix<f64>, params: &KMeansParams) -> Result<Codebook> {
    train(x, params, None)
}

/// As [`train_minibatch_kmeans`], also returning the evaluation-sample inertia
/// after every iteration.
pub fn train_minibatch_kmeans_traced(x: &DMatrix<f64>, params: &KMeansParams) -> Result<(Codebook, Vec<f64>)> {
    let mut trace = Vec::with_capacity(params.iterations);
    let cb = train(x, params, Some(&mut trace))?;
    Ok((cb, trace))
}

fn train(x: &DMatrix<f64>, params: &KMeansParams, mut trace: Option<&mut Vec<f64>>) -> Result<Codebook> {
    let KMeansParams {
        k,
        batch_size,
        iterations,
        max_no_improvement,
        seed,
    } = *params;
    let n = x.nrows();
    let dim = x.ncols();
    if k == 0 {
        return Err(Error::precondition("k must be ≥ 1"));
    }
    if n < k {
        return Err(Error::precondition(format!("need at least k={k} samples, got {n}")));
    }
    if batch_size == 0 || iterations == 0 {
        return Err(Error::precondition("batch_size and iterations must be ≥ 1"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite training descriptor"));
    }

    let data = row_major(x);
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Seeded uniform choice of K rows, skipping exact duplicates when possible.
    let order = index::sample(&mut rng, n, n).into_vec();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.iter().any(|&j| point(j) == point(i)) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let mut centers: Vec<f64> = chosen.iter().flat_map(|&i| point(i).iter().copied()).collect();
    let mut counts = vec![0u64; k];

    let eval: Vec<usize> = if n <= EVAL_SAMPLE {
        (0..n).collect()
    } else {
        let mut idx = index::sample(&mut rng, n, EVAL_SAMPLE).into_vec();
        idx.sort_unstable();
        idx
    };
    let inertia_of = |centers: &[f64]| -> f64 {
        eval.iter().map(|&i| nearest(centers, dim, point(i)).1).sum::<f64>() / eval.len() as f64
    };

    let full_batch = batch_size >= n;
    let mut batch: Vec<usize> = (0..n).collect();
    let mut assigned = Vec::with_capacity(batch_size.min(n));
    // Exponentially weighted batch inertia drives early stopping.
    let alpha = (2.0 * batch_size.min(n) as f64 / (n as f64 + 1.0)).min(1.0);
    let mut smoothed: Option<f64> = None;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut ran = 0;
    for _ in 0..iterations {
        ran += 1;
        if !full_batch {
            batch = index::sample(&mut rng, n, batch_size).into_vec();
        }
        // Assignments use the centers as they were at the start of the batch.
        assigned.clear();
        assigned.extend(batch.iter().map(|&i| nearest(&centers, dim, point(i))));
        let batch_inertia = assigned.iter().map(|a| a.1).sum::<f64>() / batch.len() as f64;
        let ewa = smoothed.map_or(batch_inertia, |e| e * (1.0 - alpha) + batch_inertia * alpha);
        smoothed = Some(ewa);

        let mut hits = vec![false; k];
        for (&i, &(c, _)) in batch.iter().zip(&assigned) {
            hits[c] = true;
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let center = &mut centers[c * dim..(c + 1) * dim];
            for (m, &v) in center.iter_mut().zip(point(i)) {
                *m += eta * (v - *m);
            }
        }

        // Reseed dead centers at the batch points farthest from their centers.
        if hits.iter().any(|h| !h) {
            let mut dist: Vec<(usize, f64)> = batch
                .iter()
                .map(|&i| (i, nearest(&centers, dim, point(i)).1))
                .collect();
            for c in (0..k).filter(|&c| !hits[c]) {
                let Some(pos) = farthest(&dist) else { break };
                let (i, _) = dist[pos];
                centers[c * dim..(c + 1) * dim].copy_from_slice(point(i));
                counts[c] = 1;
                for entry in dist.iter_mut().filter(|(j, _)| point(*j) == point(i)) {
                    entry.1 = 0.0;
                }
            }
        }

        if let Some(t) = trace.as_deref_mut() {
            t.push(inertia_of(&centers));
        }
        if max_no_improvement > 0 {
            if ewa < best {
                best = ewa;
                stale = 0;
            } else {
                stale += 1;
                if stale >= max_no_improvement {
                    break;
                }
            }
        }
    }

    let inertia = inertia_of(&centers);
    Ok(Codebook {
        centers: DMatrix::from_row_slice(k, dim, &centers),
        seed,
        inertia: Some(inertia),
        iterations: ran,
    })
}

fn farthest(dist: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (pos, &(_, d)) in dist.iter().enumerate() {
        if d > 0.0 && best.is_none_or(|b| d > dist[b].1) {
            best = Some(pos);
        }
    }
    best
}
