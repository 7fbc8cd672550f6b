//! Metrics and reporting: top-1 accuracy, base/new harmonic mean, Recall@K,
//! modality gap, mean matched-pair cosine, and deterministic report emission
//! as JSON or an aligned text table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Index of the largest value, ties resolved toward the lowest index.
pub fn argmax_tie_low(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Percent of positions where prediction equals label.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "prediction/label length mismatch: {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("cannot score an empty prediction list".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Harmonic mean `2ab/(a+b)` of two positive accuracies.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> Result<f64> {
    if !(base_acc.is_finite() && new_acc.is_finite() && base_acc > 0.0 && new_acc > 0.0) {
        return Err(Error::Data(format!(
            "harmonic mean needs positive inputs, got ({base_acc}, {new_acc})"
        )));
    }
    Ok(2.0 * base_acc * new_acc / (base_acc + new_acc))
}

/// Percent of queries whose top-`k` ranked ids intersect the query's
/// ground-truth set.
pub fn recall_at_k(
    rankings: &[Vec<usize>],
    ground_truth: &[BTreeSet<usize>],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("recall cutoff k must be >= 1".into()));
    }
    if rankings.len() != ground_truth.len() {
        return Err(Error::Data(format!(
            "ranking/ground-truth length mismatch: {} vs {}",
            rankings.len(),
            ground_truth.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Data("cannot score zero queries".into()));
    }
    let mut hits = 0usize;
    for (q, (ranked, truth)) in rankings.iter().zip(ground_truth).enumerate() {
        if truth.is_empty() {
            return Err(Error::Data(format!("query {q} has no ground-truth ids")));
        }
        if ranked.iter().take(k).any(|id| truth.contains(id)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Euclidean distance between the arithmetic-mean vectors of two embedding
/// sets.
pub fn modality_gap(images: &[&[f64]], texts: &[&[f64]]) -> Result<f64> {
    let ci = center(images, "image")?;
    let ct = center(texts, "text")?;
    if ci.len() != ct.len() {
        return Err(Error::Shape(format!(
            "modality centers have different dims: {} vs {}",
            ci.len(),
            ct.len()
        )));
    }
    Ok(ci
        .iter()
        .zip(&ct)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn center(rows: &[&[f64]], what: &str) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Data(format!("{what} embedding set is empty")))?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::Shape(format!(
                "{what} row {i} has dim {}, expected {dim}",
                r.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(*r) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= rows.len() as f64;
    }
    Ok(acc)
}

/// Mean cosine similarity over matched (image, prompt-embedding) pairs.
pub fn mean_pair_cosine(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot average zero pairs".into()));
    }
    let mut total = 0.0;
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "pair {i} has mismatched dims: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(*b) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Norm(format!("pair {i} contains a zero-norm vector")));
        }
        total += dot / (na.sqrt() * nb.sqrt());
    }
    Ok(total / pairs.len() as f64)
}

/// Views every row of a tensor as a slice, for the set-based metrics.
pub fn row_refs(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|r| t.row_slice(r)).collect()
}

/// One metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Full result of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(protocol: &str, config_digest: &str, seeds: &[u64]) -> Self {
        MetricReport {
            protocol: protocol.to_string(),
            config_digest: config_digest.to_string(),
            seeds: seeds.to_vec(),
            rows: Vec::new(),
        }
    }

    /// Appends a metric row; mean and population standard deviation are
    /// computed here so emitted numbers always agree with `per_seed`.
    pub fn push_row(&mut self, metric: &str, per_seed: Vec<f64>) -> Result<()> {
        if per_seed.len() != self.seeds.len() {
            return Err(Error::Data(format!(
                "metric '{metric}' has {} values for {} seeds",
                per_seed.len(),
                self.seeds.len()
            )));
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            per_seed,
            mean,
            std: var.sqrt(),
        });
        Ok(())
    }

    /// Looks up a row by metric name.
    pub fn row(&self, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("report parse failed: {e}")))
    }

    /// Column-aligned plain-text rendering.
    pub fn to_text_table(&self) -> String {
        let mut header = vec!["metric".to_string()];
        for s in &self.seeds {
            header.push(format!("seed{s}"));
        }
        header.push("mean".to_string());
        header.push("std".to_string());
        let mut body: Vec<Vec<String>> = Vec::new();
        for row in &self.rows {
            let mut cells = vec![row.metric.clone()];
            for v in &row.per_seed {
                cells.push(format!("{v:.4}"));
            }
            cells.push(format!("{:.4}", row.mean));
            cells.push(format!("{:.4}", row.std));
            body.push(cells);
        }
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "protocol: {}", self.protocol);
        let _ = writeln!(out, "config:   {}", self.config_digest);
        let render = |cells: &[String], widths: &[usize], out: &mut String| {
            let line = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:>w$}", w = w))
                .collect::<Vec<_>>()
                .join("  ");
            let _ = writeln!(out, "{line}");
        };
        render(&header, &widths, &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        render(&rule, &widths, &mut out);
        for cells in &body {
            render(cells, &widths, &mut out);
        }
        out
    }
}

/// Output encodings for `emit_report`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    TextTable,
}

/// Writes the report to `path` in the requested format.
pub fn emit_report(report: &MetricReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::TextTable => report.to_text_table(),
    };
    std::fs::write(path, body).map_err(Error::Io)
}
