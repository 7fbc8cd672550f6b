//! Loss algebra: embedding distillation, classification cross-entropy over
//! cosine logits, the symmetric contrastive retrieval loss, and their
//! weighted combination. Value-level functions use plain arithmetic; graph
//! builders put the same math on a compute record for training. Tests pin
//! the two against each other.

use crate::diffcore::{ops, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_PROB_CLAMP: f64 = 1e-12;

/// One evaluation of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub distill: f64,
    pub task: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Squared Euclidean distance between the adapted embedding and its
/// aggregation target.
pub fn distill_loss(aape: &Tensor, target: &Tensor) -> Result<f64> {
    if !aape.same_shape(target) {
        return Err(Error::Config(format!(
            "distillation pair shapes differ: {}x{} vs {}x{}",
            aape.rows(),
            aape.cols(),
            target.rows(),
            target.cols()
        )));
    }
    Ok(aape
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Cross-entropy of a predicted distribution against a hard label, with the
/// probability clamped at `LOG_PROB_CLAMP` before the log.
pub fn task_ce_loss(probs: &Tensor, label: usize) -> Result<f64> {
    if probs.rows() != 1 {
        return Err(Error::Config(format!(
            "probabilities must be a single row, got {} rows",
            probs.rows()
        )));
    }
    if label >= probs.cols() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            probs.cols()
        )));
    }
    Ok(-probs.get(0, label).max(LOG_PROB_CLAMP).ln())
}

/// Symmetric contrastive loss over matched batches: cosine logits at
/// temperature `tau`, cross-entropy with diagonal targets averaged over the
/// row (image-to-caption) and column (caption-to-image) directions.
pub fn contrastive_clip_loss(aape: &Tensor, captions: &Tensor, tau: f64) -> Result<f64> {
    let b = aape.rows();
    if b < 2 {
        return Err(Error::Config(format!(
            "contrastive batch needs >= 2 pairs, got {b}"
        )));
    }
    if !aape.same_shape(captions) {
        return Err(Error::Config(format!(
            "contrastive batches must match: {}x{} vs {}x{}",
            aape.rows(),
            aape.cols(),
            captions.rows(),
            captions.cols()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let a_hat = ops::row_normalize(aape)?;
    let c_hat = ops::row_normalize(captions)?;
    let logits = ops::scale(&ops::matmul_tb(&a_hat, &c_hat)?, 1.0 / tau)?;
    let ce_direction = |m: &Tensor| -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            let row = m.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - m.get(i, i);
        }
        total / b as f64
    };
    let rows = ce_direction(&logits);
    let cols = ce_direction(&ops::transpose(&logits));
    Ok(0.5 * (rows + cols))
}

/// Combines the two terms: `total = lambda * distill + task`.
pub fn total_loss(distill: f64, task: f64, lambda: f64) -> Result<LossBreakdown> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(LossBreakdown {
        distill,
        task,
        total: lambda * distill + task,
        lambda,
    })
}

/// Distillation on the record: sum of squared differences over all entries
/// of two same-shape nodes (callers divide by the batch size).
pub fn distill_loss_graph(tape: &mut Tape, aape: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = tape.sub(aape, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum_all(sq)
}

/// Cross-entropy on the record for one image: `logsumexp(logits) - logits[label]`
/// over a `1 x C` logit row.
pub fn task_ce_graph(tape: &mut Tape, logits: NodeId, label: usize) -> Result<NodeId> {
    let c = tape.value(logits)?.cols();
    if label >= c {
        return Err(Error::Data(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let lse = tape.logsumexp_rows(logits)?;
    let picked = tape.slice_cols(logits, label, 1)?;
    tape.sub(lse, picked)
}

/// Symmetric contrastive loss on the record over matched `B x d` batches.
pub fn contrastive_clip_graph(
    tape: &mut Tape,
    aape: NodeId,
    captions: NodeId,
    tau: f64,
) -> Result<NodeId> {
    let b = tape.value(aape)?.rows();
    if b < 2 {
        return Err(Error::Config(format!(
            "contrastive batch needs >= 2 pairs, got {b}"
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let a_hat = tape.row_normalize(aape)?;
    let c_hat = tape.row_normalize(captions)?;
    let logits = tape.matmul_tb(a_hat, c_hat)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let logits_t = tape.transpose(logits)?;
    let mut total: Option<NodeId> = None;
    for m in [logits, logits_t] {
        let lse = tape.logsumexp_rows(m)?;
        let diag = tape.take_diag(m)?;
        let ce = tape.sub(lse, diag)?;
        let ce = tape.sum_all(ce)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    tape.scale(total.expect("two directions"), 0.5 / b as f64)
}
