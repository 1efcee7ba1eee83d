//! Report files: metrics as `key = value` fractions followed by a percent table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::pipeline::RunOutcome;

const METRICS: [(&str, &str); 6] = [
    ("map", "mAP"),
    ("top1", "Top-1"),
    ("hard2", "Hard-2"),
    ("hard3", "Hard-3"),
    ("soft5", "Soft-5"),
    ("soft10", "Soft-10"),
];

pub fn metric_values(r: &MetricsReport) -> [f64; 6] {
    [r.map, r.top1, r.hard2, r.hard3, r.soft5, r.soft10]
}

fn write_metrics(out: &mut String, prefix: &str, r: &MetricsReport) {
    for ((key, _), v) in METRICS.iter().zip(metric_values(r)) {
        let _ = writeln!(out, "{prefix}{key} = {v}");
    }
}

/// Renders a metrics table in percent with two decimals.
pub fn percent_table(r: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>7}", "metric", "percent");
    for ((_, label), v) in METRICS.iter().zip(metric_values(r)) {
        let _ = writeln!(out, "{label:<8} {:>7.2}", 100.0 * v);
    }
    out
}

pub fn render_report(outcome: &RunOutcome) -> String {
    let r = &outcome.report;
    let mut out = String::new();
    let runs = if outcome.joint.is_some() { outcome.models.len() } else { r.runs };
    let _ = writeln!(out, "runs = {runs}");
    let _ = writeln!(out, "joint_whitening = {}", outcome.joint.is_some());
    let _ = writeln!(out, "queries = {}", r.queries);
    write_metrics(&mut out, "", r);
    for (seed, report) in &outcome.per_run {
        write_metrics(&mut out, &format!("seed.{seed}."), report);
    }
    for (seed, reason) in &outcome.failed {
        let _ = writeln!(out, "seed.{seed}.failed = {}", reason.replace('\n', " "));
    }
    out.push('\n');
    for line in percent_table(r).lines() {
        let _ = writeln!(out, "# {line}");
    }
    out
}

/// Reads the numeric `key = value` lines of a report.
pub fn parse_report(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut values = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::precondition(format!("report line without '=': {line}")));
        };
        if let Ok(v) = v.trim().parse::<f64>() {
            values.insert(k.trim().to_string(), v);
        }
    }
    Ok(values)
}
