//! Reference implementations for the integration tests. Plain `Vec`
//! arithmetic; nothing here calls the library's numerics.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gauss(rng)).collect()
}

pub fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let values: Vec<f64> = (0..rows * cols).map(|_| gauss(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn rows_of(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn cols_of(m: &DMatrix<f64>) -> Mat {
    (0..m.ncols()).map(|j| m.column(j).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.first().map_or(0, Vec::len), |i, j| rows[i][j])
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn transpose(a: &Mat) -> Mat {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn mat_vec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, v)).collect()
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Column means and unbiased covariance of the rows.
pub fn covariance(rows: &Mat) -> (Vec<f64>, Mat) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    for row in cov.iter_mut() {
        row.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    }
    (mean, cov)
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
/// descending order and the matching unit eigenvectors as rows, each flipped
/// so its largest-magnitude entry is positive.
pub fn jacobi_eigen(sym: &Mat) -> (Vec<f64>, Mat) {
    let n = sym.len();
    let mut a = sym.clone();
    let mut v = identity(n);
    let total: f64 = a.iter().flatten().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off <= 1e-32 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k][i]).collect();
            let mut pivot = 0;
            for k in 1..n {
                if col[k].abs() > col[pivot].abs() {
                    pivot = k;
                }
            }
            if col[pivot] < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    (values, vectors)
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &Mat, b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m: Mat = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap()).unwrap();
        m.swap(col, pivot);
        assert!(m[col][col] != 0.0, "singular system");
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = m[r][n];
        for c in r + 1..n {
            s -= m[r][c] * x[c];
        }
        x[r] = s / m[r][r];
    }
    x
}

/// Sine of the largest principal angle between two subspaces given by
/// orthonormal row bases of equal size.
pub fn max_principal_sine(a: &Mat, b: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for u in a {
        // Residual of u after projecting onto span(b).
        let mut r = u.clone();
        for w in b {
            let c = dot(u, w);
            for (ri, wi) in r.iter_mut().zip(w) {
                *ri -= c * wi;
            }
        }
        worst = worst.max(norm(&r));
    }
    worst
}

// ---- codebook / embedding ----

/// Exhaustive nearest center: strictly smaller squared distance wins, so ties
/// keep the first index.
pub fn brute_nearest(centers: &Mat, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let mut d = 0.0;
        for j in 0..x.len() {
            d += (x[j] - c[j]) * (x[j] - c[j]);
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn unit_or_zero(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// VLAD embedding of each descriptor row as a `K·D_l` vector.
pub fn vlad_oracle(centers: &Mat, x: &Mat, residual_normalize: bool) -> Mat {
    let (k, d) = (centers.len(), centers[0].len());
    x.iter()
        .map(|xt| {
            let c = brute_nearest(centers, xt);
            let mut r = sub(xt, &centers[c]);
            if residual_normalize {
                r = unit_or_zero(&r);
            }
            let mut out = vec![0.0; k * d];
            out[c * d..(c + 1) * d].copy_from_slice(&r);
            out
        })
        .collect()
}

/// Per-cluster residual sums over an exhaustive assignment.
pub fn residual_sums(centers: &Mat, x: &Mat) -> Vec<f64> {
    let (k, d) = (centers.len(), centers[0].len());
    let mut out = vec![0.0; k * d];
    for c in 0..k {
        for xt in x {
            if brute_nearest(centers, xt) == c {
                for j in 0..d {
                    out[c * d + j] += xt[j] - centers[c][j];
                }
            }
        }
    }
    out
}

/// Unit residuals to every center, concatenated, before any global step.
pub fn temb_raw_oracle(centers: &Mat, xt: &[f64]) -> Vec<f64> {
    centers.iter().flat_map(|c| unit_or_zero(&sub(xt, c))).collect()
}

/// T-Emb: raw embedding, optional affine map `W(v − mean)`, then L2.
pub fn temb_oracle(centers: &Mat, x: &Mat, whitening: Option<(&[f64], &Mat)>) -> Mat {
    x.iter()
        .map(|xt| {
            let raw = temb_raw_oracle(centers, xt);
            let mapped = match whitening {
                Some((mean, w)) => mat_vec(w, &sub(&raw, mean)),
                None => raw,
            };
            unit_or_zero(&mapped)
        })
        .collect()
}

// ---- pooling ----

/// GMP by the normal equations `(ΦΦᵀ + λI)ξ = Φ1`; `phi` holds one
/// embedding per entry.
pub fn gmp_oracle(phi: &Mat, lambda: f64) -> Vec<f64> {
    let d = phi[0].len();
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for col in phi {
        for i in 0..d {
            b[i] += col[i];
            for j in 0..d {
                a[i][j] += col[i] * col[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    solve_dense(&a, &b)
}

// ---- evaluation ----

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub map: f64,
    pub top1: f64,
    pub hard2: f64,
    pub hard3: f64,
    pub soft5: f64,
    pub soft10: f64,
    pub queries: usize,
    pub per_query_ap: Vec<(usize, f64)>,
}

/// Gallery order for `query`: insertion sort on (score desc, index asc).
pub fn ranking_oracle(query: usize, n: usize, score: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for j in (0..n).filter(|&j| j != query) {
        let s = score(query, j);
        let pos = out
            .iter()
            .position(|&(i, t)| s > t || (s == t && j < i))
            .unwrap_or(out.len());
        out.insert(pos, (j, s));
    }
    out.into_iter().map(|(j, _)| j).collect()
}

pub fn ap_oracle(ranking: &[usize], relevant: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (pos, doc) in ranking.iter().enumerate() {
        if relevant.contains(doc) {
            let hits = ranking[..=pos].iter().filter(|d| relevant.contains(d)).count();
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

pub fn metrics_oracle(writers: &[String], score: &dyn Fn(usize, usize) -> f64) -> Option<OracleMetrics> {
    let n = writers.len();
    let mut aps = Vec::new();
    let (mut top1, mut hard2, mut hard3, mut soft5, mut soft10) = (0, 0, 0, 0, 0);
    for q in 0..n {
        let relevant: Vec<usize> = (0..n).filter(|&j| j != q && writers[j] == writers[q]).collect();
        if relevant.is_empty() {
            continue;
        }
        let ranking = ranking_oracle(q, n, score);
        aps.push((q, ap_oracle(&ranking, &relevant)));
        let same = |r: usize| relevant.contains(&ranking[r]);
        let all_first = |k: usize| ranking.len() >= k && (0..k).all(same);
        let any_first = |k: usize| (0..k.min(ranking.len())).any(same);
        top1 += same(0) as usize;
        hard2 += all_first(2) as usize;
        hard3 += all_first(3) as usize;
        soft5 += any_first(5) as usize;
        soft10 += any_first(10) as usize;
    }
    if aps.is_empty() {
        return None;
    }
    let m = aps.len() as f64;
    let mut map = 0.0;
    for (_, ap) in &aps {
        map += ap;
    }
    Some(OracleMetrics {
        map: map / m,
        top1: top1 as f64 / m,
        hard2: hard2 as f64 / m,
        hard3: hard3 as f64 / m,
        soft5: soft5 as f64 / m,
        soft10: soft10 as f64 / m,
        queries: aps.len(),
        per_query_ap: aps,
    })
}

// ---- exemplar svm ----

/// Primal `½‖w‖² + Σ cᵢ·max(0, 1 − yᵢ(wᵀxᵢ + b))`.
pub fn svm_primal(w: &[f64], b: f64, x: &Mat, y: &[f64], c: &[f64]) -> f64 {
    let mut obj = 0.5 * dot(w, w);
    for i in 0..x.len() {
        obj += c[i] * (1.0 - y[i] * (dot(w, &x[i]) + b)).max(0.0);
    }
    obj
}

/// Exact minimizer over the bias for fixed `w`: the hinge sum is piecewise
/// linear in `b` with kinks at `yᵢ − wᵀxᵢ`, so one of them is optimal.
pub fn best_bias(w: &[f64], x: &Mat, y: &[f64], c: &[f64]) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    for i in 0..x.len() {
        let b = y[i] - dot(w, &x[i]);
        let obj = svm_primal(w, b, x, y, c);
        if obj < best.1 {
            best = (b, obj);
        }
    }
    best
}

/// Euclidean projection onto `{0 ≤ αᵢ ≤ cᵢ, yᵀα = 0}` by bisection on the
/// multiplier of the equality constraint.
fn project(v: &[f64], y: &[f64], c: &[f64]) -> Vec<f64> {
    let at = |nu: f64| -> Vec<f64> { (0..v.len()).map(|i| (v[i] - nu * y[i]).clamp(0.0, c[i])).collect() };
    let balance = |a: &[f64]| dot(a, y);
    let span = v.iter().map(|x| x.abs()).fold(0.0, f64::max) + c.iter().fold(0.0, |m: f64, x| m.max(*x)) + 1.0;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Guesses the active set from `alpha` and solves the KKT equations on it
/// exactly: free multipliers put their points on the margin. Returns the
/// solution only if it is feasible; the caller certifies it via the gap.
fn polish(q: &Mat, y: &[f64], c: &[f64], alpha: &[f64]) -> Option<Vec<f64>> {
    let l = alpha.len();
    let eps = 1e-7;
    let free: Vec<usize> = (0..l).filter(|&i| alpha[i] > eps * c[i] && alpha[i] < (1.0 - eps) * c[i]).collect();
    let mut fixed = alpha.to_vec();
    for i in 0..l {
        if !free.contains(&i) {
            fixed[i] = if alpha[i] >= 0.5 * c[i] { c[i] } else { 0.0 };
        }
    }
    if free.is_empty() {
        return (dot(&fixed, y).abs() < 1e-12).then_some(fixed);
    }
    // Unknowns: alpha on the free set, then the bias.
    let f = free.len();
    let mut a = vec![vec![0.0; f + 1]; f + 1];
    let mut rhs = vec![0.0; f + 1];
    for (r, &i) in free.iter().enumerate() {
        for (s, &j) in free.iter().enumerate() {
            a[r][s] = q[i][j];
        }
        a[r][f] = y[i];
        rhs[r] = 1.0 - (0..l).filter(|j| !free.contains(j)).map(|j| q[i][j] * fixed[j]).sum::<f64>();
        a[f][r] = y[i];
    }
    rhs[f] = -(0..l).filter(|j| !free.contains(j)).map(|j| y[j] * fixed[j]).sum::<f64>();
    let sol = solve_dense(&a, &rhs);
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    for (r, &i) in free.iter().enumerate() {
        fixed[i] = sol[r].clamp(0.0, c[i]);
    }
    (dot(&fixed, y).abs() < 1e-9 * c.iter().sum::<f64>()).then_some(fixed)
}

#[derive(Debug, Clone)]
pub struct SvmReference {
    /// Primal objective at the reference point (an upper bound on the optimum).
    pub primal: f64,
    /// Dual objective at the reference multipliers (a lower bound).
    pub dual: f64,
    pub w: Vec<f64>,
    pub b: f64,
}

impl SvmReference {
    pub fn gap(&self) -> f64 {
        self.primal - self.dual
    }
}

/// Accelerated projected gradient on the dual with adaptive restart, then
/// the primal point `w = Σ αᵢyᵢxᵢ` with its exact best bias. Stops once the
/// duality gap is below `rel_gap·primal` or after `max_iter` steps.
pub fn svm_reference(x: &Mat, y: &[f64], c: &[f64], rel_gap: f64, max_iter: usize) -> SvmReference {
    let l = x.len();
    let q: Mat = (0..l).map(|i| (0..l).map(|j| y[i] * y[j] * dot(&x[i], &x[j])).collect()).collect();
    let lip = jacobi_eigen(&q).0[0].max(1e-12);
    let dual_value = |a: &[f64]| a.iter().sum::<f64>() - 0.5 * dot(a, &mat_vec(&q, a));
    let primal_from = |a: &[f64]| {
        let mut w = vec![0.0; x[0].len()];
        for i in 0..l {
            for (wj, xj) in w.iter_mut().zip(&x[i]) {
                *wj += a[i] * y[i] * xj;
            }
        }
        let (b, p) = best_bias(&w, x, y, c);
        (w, b, p)
    };

    let mut alpha = vec![0.0; l];
    let mut z = alpha.clone();
    let mut t: f64 = 1.0;
    let mut best: Option<SvmReference> = None;
    for it in 0..max_iter {
        let grad: Vec<f64> = mat_vec(&q, &z).iter().map(|g| g - 1.0).collect();
        let step: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| zi - gi / lip).collect();
        let next = project(&step, y, c);
        if dual_value(&next) < dual_value(&alpha) {
            // Restart momentum when the dual stops improving.
            t = 1.0;
            z = alpha.clone();
        } else {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            z = next.iter().zip(&alpha).map(|(n, a)| n + (t - 1.0) / t_next * (n - a)).collect();
            alpha = next;
            t = t_next;
        }
        if it % 50 == 0 || it + 1 == max_iter {
            let mut cands = vec![alpha.clone()];
            cands.extend(polish(&q, y, c, &alpha));
            let mut done = false;
            for a in cands {
                let (w, b, primal) = primal_from(&a);
                let cand = SvmReference { primal, dual: dual_value(&a), w, b };
                done |= cand.gap() <= rel_gap * cand.primal.abs().max(1e-12);
                if best.as_ref().is_none_or(|r| cand.gap() < r.gap()) {
                    best = Some(cand);
                }
            }
            if done {
                break;
            }
        }
    }
    best.expect("at least one checkpoint")
}

/// Result of the long-run subgradient oracle: the best primal value found
/// and a certified lower bound on the optimum.
#[derive(Debug, Clone)]
pub struct SubgradientResult {
    pub best: f64,
    pub lower: f64,
    pub w: Vec<f64>,
    pub b: f64,
    pub iterations: usize,
}

/// Subgradient oracle on the joint primal in `(w, b)`: central-cut
/// ellipsoid method, which only queries values and subgradients. The start
/// ball contains the optimum: `‖w*‖² ≤ 2·f(0, 0)` and `b*` sits at a kink
/// `yᵢ − w*ᵀxᵢ`. Every cut also yields the bound `f* ≥ f(z) − √(gᵀPg)`.
pub fn svm_subgradient(x: &Mat, y: &[f64], c: &[f64], rel_gap: f64, max_iter: usize) -> SubgradientResult {
    let d = x[0].len();
    let n = d + 1;
    let w_radius = (2.0 * c.iter().sum::<f64>()).sqrt();
    let x_max = x.iter().map(|xi| norm(xi)).fold(0.0, f64::max);
    let b_radius = 1.0 + w_radius * x_max;
    let radius2 = w_radius * w_radius + b_radius * b_radius;
    // The ellipsoid is {z + L u : ‖u‖ ≤ 1}, i.e. P = L Lᵀ; updating the factor
    // keeps P positive semidefinite under rounding.
    let r = radius2.sqrt();
    let mut l: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { r } else { 0.0 }).collect()).collect();
    let mut z = vec![0.0; n];
    let mut out = SubgradientResult {
        best: f64::INFINITY,
        lower: f64::NEG_INFINITY,
        w: vec![0.0; d],
        b: 0.0,
        iterations: 0,
    };
    let nf = n as f64;
    for it in 0..max_iter {
        out.iterations = it + 1;
        let (w, b) = (&z[..d], z[d]);
        let f = svm_primal(w, b, x, y, c);
        if f < out.best {
            out.best = f;
            out.w = w.to_vec();
            out.b = b;
        }
        let mut g = z.clone();
        g[d] = 0.0;
        for i in 0..x.len() {
            if 1.0 - y[i] * (dot(w, &x[i]) + b) > 0.0 {
                for (gj, xj) in g.iter_mut().zip(&x[i]) {
                    *gj -= c[i] * y[i] * xj;
                }
                g[d] -= c[i] * y[i];
            }
        }
        if norm(&g) == 0.0 {
            out.lower = out.best;
            break;
        }
        // u = Lᵀg, width = √(gᵀPg) = ‖u‖.
        let lt = transpose(&l);
        let u = mat_vec(&lt, &g);
        let width = norm(&u);
        if !(width > 0.0) {
            break;
        }
        out.lower = out.lower.max(f - width);
        if out.best - out.lower <= rel_gap * out.best.abs() {
            break;
        }
        let u: Vec<f64> = u.iter().map(|v| v / width).collect();
        let lu = mat_vec(&l, &u);
        for (zi, si) in z.iter_mut().zip(&lu) {
            *zi -= si / (nf + 1.0);
        }
        // L ← s·L(I − β u uᵀ) with (1 − β)² = (n − 1)/(n + 1), s² = n²/(n² − 1).
        let beta = 1.0 - ((nf - 1.0) / (nf + 1.0)).sqrt();
        let s = nf / (nf * nf - 1.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                l[i][j] = s * (l[i][j] - beta * lu[i] * u[j]);
            }
        }
    }
    out
}
