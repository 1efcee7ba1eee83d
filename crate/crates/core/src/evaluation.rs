//! Leave-one-sample-out retrieval evaluation: every document queries all
//! remaining documents, producing mAP, Top-1, Hard-k and Soft-k.

use std::collections::BTreeSet;

use log::warn;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esvm::EsvmModel;
use crate::numerics::cosine;

/// How gallery documents are scored against a query.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Cosine,
    /// One model per document, indexed like the encodings; the query's model
    /// scores the gallery.
    Esvm(Vec<EsvmModel>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub encodings: Vec<DVector<f64>>,
    pub writers: Vec<String>,
    pub scorer: Scorer,
}

impl RetrievalRun {
    pub fn cosine(encodings: Vec<DVector<f64>>, writers: Vec<String>) -> Self {
        Self {
            encodings,
            writers,
            scorer: Scorer::Cosine,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.encodings.len();
        if n < 2 {
            return Err(Error::precondition(format!("retrieval needs at least 2 documents, got {n}")));
        }
        if self.writers.len() != n {
            return Err(Error::precondition("one writer per document required"));
        }
        if let Scorer::Esvm(models) = &self.scorer {
            if models.len() != n {
                return Err(Error::precondition("one exemplar model per document required"));
            }
        }
        Ok(())
    }
}

/// All documents except `query`, best first. Ties go to the smaller index.
pub fn rank_gallery(query: usize, run: &RetrievalRun) -> Result<Vec<usize>> {
    run.validate()?;
    if query >= run.encodings.len() {
        return Err(Error::precondition(format!("query index {query} out of range")));
    }
    let q = &run.encodings[query];
    let mut scored = Vec::with_capacity(run.encodings.len() - 1);
    for (j, x) in run.encodings.iter().enumerate() {
        if j == query {
            continue;
        }
        if x.len() != q.len() {
            return Err(Error::precondition("encodings differ in dimension"));
        }
        let s = match &run.scorer {
            Scorer::Cosine => cosine(q.as_slice(), x.as_slice()).unwrap_or_else(|| {
                warn!("zero-norm encoding in cosine ranking (query {query}, document {j})");
                f64::NEG_INFINITY
            }),
            Scorer::Esvm(models) => models[query].score(x)?,
        };
        if s.is_nan() {
            return Err(Error::numeric(format!("similarity between {query} and {j} is NaN")));
        }
        scored.push((j, s));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(j, _)| j).collect())
}

/// Average precision of `ranking` for the given relevant set.
///
/// Returns `None` for an empty relevant set (the query is skipped).
pub fn average_precision(ranking: &[usize], relevant: &BTreeSet<usize>) -> Result<Option<f64>> {
    if relevant.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, doc) in ranking.iter().enumerate() {
        if relevant.contains(doc) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits != relevant.len() {
        return Err(Error::precondition("relevant documents missing from the ranking"));
    }
    Ok(Some(sum / relevant.len() as f64))
}

/// Retrieval metrics as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub top1: f64,
    pub hard2: f64,
    pub hard3: f64,
    pub soft5: f64,
    pub soft10: f64,
    /// Number of queries that entered the metrics.
    pub queries: usize,
    /// Number of runs averaged into this report.
    pub runs: usize,
    /// `(query index, AP)` pairs; empty for averaged reports.
    pub per_query_ap: Vec<(usize, f64)>,
}

impl MetricsReport {
    /// `hard3 ≤ hard2 ≤ top1 ≤ soft5 ≤ soft10 ≤ 1`, up to rounding in averages.
    pub fn orderings_hold(&self) -> bool {
        let tol = 1e-12;
        self.hard3 <= self.hard2 + tol
            && self.hard2 <= self.top1 + tol
            && self.top1 <= self.soft5 + tol
            && self.soft5 <= self.soft10 + tol
            && self.soft10 <= 1.0 + tol
    }
}

struct QueryOutcome {
    query: usize,
    ap: f64,
    top1: bool,
    hard2: bool,
    hard3: bool,
    soft5: bool,
    soft10: bool,
}

fn evaluate_query(q: usize, run: &RetrievalRun) -> Result<Option<QueryOutcome>> {
    let relevant: BTreeSet<usize> = (0..run.writers.len())
        .filter(|&j| j != q && run.writers[j] == run.writers[q])
        .collect();
    if relevant.is_empty() {
        warn!("query {q}: writer '{}' has no other document; skipped", run.writers[q]);
        return Ok(None);
    }
    let ranking = rank_gallery(q, run)?;
    let ap = average_precision(&ranking, &relevant)?.expect("non-empty relevant set");
    let same: Vec<bool> = ranking.iter().map(|j| relevant.contains(j)).collect();
    let soft = |k: usize| same.iter().take(k).any(|&s| s);
    let hard = |k: usize| same.len() >= k && same[..k].iter().all(|&s| s);
    Ok(Some(QueryOutcome {
        query: q,
        ap,
        top1: same[0],
        hard2: hard(2),
        hard3: hard(3),
        soft5: soft(5),
        soft10: soft(10),
    }))
}

pub fn evaluate(run: &RetrievalRun) -> Result<MetricsReport> {
    run.validate()?;
    let outcomes: Vec<Option<QueryOutcome>> = (0..run.encodings.len())
        .into_par_iter()
        .map(|q| evaluate_query(q, run))
        .collect::<Result<_>>()?;
    let outcomes: Vec<QueryOutcome> = outcomes.into_iter().flatten().collect();
    if outcomes.is_empty() {
        return Err(Error::Evaluation("every query was skipped; no writer has two documents".into()));
    }
    let n = outcomes.len() as f64;
    let frac = |f: fn(&QueryOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    Ok(MetricsReport {
        map: outcomes.iter().map(|o| o.ap).sum::<f64>() / n,
        top1: frac(|o| o.top1),
        hard2: frac(|o| o.hard2),
        hard3: frac(|o| o.hard3),
        soft5: frac(|o| o.soft5),
        soft10: frac(|o| o.soft10),
        queries: outcomes.len(),
        runs: 1,
        per_query_ap: outcomes.iter().map(|o| (o.query, o.ap)).collect(),
    })
}

/// Arithmetic mean of each metric across runs.
pub fn average_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::precondition("no reports to average"));
    }
    if reports.len() == 1 {
        return Ok(reports[0].clone());
    }
    let n = reports.len() as f64;
    // Sorted summation keeps the mean independent of run order.
    let mean = |f: fn(&MetricsReport) -> f64| {
        let mut values: Vec<f64> = reports.iter().map(f).collect();
        values.sort_by(f64::total_cmp);
        values.iter().sum::<f64>() / n
    };
    let queries = reports.iter().map(|r| r.queries).sum::<usize>() / reports.len();
    Ok(MetricsReport {
        map: mean(|r| r.map),
        top1: mean(|r| r.top1),
        hard2: mean(|r| r.hard2),
        hard3: mean(|r| r.hard3),
        soft5: mean(|r| r.soft5),
        soft10: mean(|r| r.soft10),
        queries,
        runs: reports.iter().map(|r| r.runs).sum(),
        per_query_ap: Vec::new(),
    })
}
