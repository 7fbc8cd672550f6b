//! Prompt-set aggregation: strategies that collapse a class's reference
//! prompt embeddings into one target vector, and the clipped-cosine reward
//! that trains the learned aggregators.
//!
//! The attention aggregator queries the block with the mean of the prompt
//! set (or one global learnable query) and keeps only the query token's
//! output; updated per-prompt embeddings are never materialized, so one
//! aggregation costs exactly `heads * n` score entries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::TaskKind;
use crate::diffcore::attention::xavier;
use crate::diffcore::{mh_cross_attention, NodeId, ParamStore, Tape, Tensor};
use crate::embedio::{Dataset, DatasetView, NoiseTag};
use crate::error::{Error, Result};

/// Name of the optional learnable query vector inside an aggregator store.
/// When present it replaces the per-set mean as the attention query.
pub const GLOBAL_QUERY_PARAM: &str = "query";

/// Hidden width divisor of the MLP aggregator's bottleneck.
pub const MLP_BOTTLENECK_DIV: usize = 4;

pub const MLP_AGGREGATOR_PARAM_NAMES: [&str; 5] =
    ["mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mlp_alpha"];

/// Strategy for collapsing a prompt set to a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    /// Pick one prompt uniformly at random.
    Random,
    /// Plain mean of the prompt set.
    Mean,
    /// Gated bottleneck MLP applied to the mean prompt.
    Mlp,
    /// Multi-head cross-attention queried by the mean prompt.
    Attention,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [
        AggregatorKind::Random,
        AggregatorKind::Mean,
        AggregatorKind::Mlp,
        AggregatorKind::Attention,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AggregatorKind::Random => "random",
            AggregatorKind::Mean => "mean",
            AggregatorKind::Mlp => "mlp",
            AggregatorKind::Attention => "attention",
        }
    }
}

/// Row mean of an `n x d` prompt set, as `1 x d`. Exact arithmetic mean in
/// row order; no renormalization.
pub fn mean_prompt(prompts: &Tensor) -> Result<Tensor> {
    let (n, d) = (prompts.rows(), prompts.cols());
    let mut out = Tensor::zeros(1, d);
    for i in 0..n {
        for (j, v) in prompts.row_slice(i).iter().enumerate() {
            out.set(0, j, out.get(0, j) + v / n as f64);
        }
    }
    out.check_finite("mean prompt")?;
    Ok(out)
}

/// Aggregated prompt plus the attention pattern that produced it.
#[derive(Debug, Clone)]
pub struct AggregationOutput {
    /// `1 x d` aggregated prompt.
    pub prompt: Tensor,
    /// `heads x n` softmax scores; every row sums to one.
    pub scores: Tensor,
}

/// The attention query for a prompt set under the given parameters: the
/// stored global query when one exists, the set's mean otherwise.
pub fn attention_query(prompts: &Tensor, store: &ParamStore) -> Result<Tensor> {
    if store.contains(GLOBAL_QUERY_PARAM) {
        Ok(store.get(GLOBAL_QUERY_PARAM)?.clone())
    } else {
        mean_prompt(prompts)
    }
}

/// Forward pass of the attention aggregator over one prompt set.
pub fn aggregate_attention(
    prompts: &Tensor,
    store: &ParamStore,
    heads: usize,
) -> Result<AggregationOutput> {
    let d = store.get("wq")?.rows();
    if prompts.cols() != d {
        return Err(Error::Config(format!(
            "prompt width {} does not match aggregator dim {d}",
            prompts.cols()
        )));
    }
    let query = attention_query(prompts, store)?;
    let (prompt, scores) = mh_cross_attention(&query, prompts, store, heads)?;
    for h in 0..scores.rows() {
        let sum: f64 = scores.row_slice(h).iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Norm(format!(
                "head {h} scores sum to {sum}, expected 1"
            )));
        }
    }
    Ok(AggregationOutput { prompt, scores })
}

/// Builds the MLP aggregator parameters: a `d -> d/4 -> d` ReLU bottleneck
/// `f` and a scalar gate `alpha`, combined as `alpha * f(q) + (1 - alpha) * q`.
/// The gate starts at zero so an untrained aggregator reproduces the mean
/// prompt exactly.
pub fn init_mlp_aggregator_store(d: usize, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    if d < MLP_BOTTLENECK_DIV || d % MLP_BOTTLENECK_DIV != 0 {
        return Err(Error::Config(format!(
            "mlp aggregator needs dim divisible by {MLP_BOTTLENECK_DIV}, got {d}"
        )));
    }
    let hidden = d / MLP_BOTTLENECK_DIV;
    let mut store = ParamStore::new();
    store.insert("mlp_w1", xavier(d, hidden, rng))?;
    store.insert("mlp_b1", Tensor::zeros(1, hidden))?;
    store.insert("mlp_w2", xavier(hidden, d, rng))?;
    store.insert("mlp_b2", Tensor::zeros(1, d))?;
    store.insert("mlp_alpha", Tensor::zeros(1, 1))?;
    Ok(store)
}

/// Puts the gated-MLP aggregator on the record: `q + alpha * (f(q) - q)`.
pub fn mlp_aggregate_graph(tape: &mut Tape, query: NodeId, store: &ParamStore) -> Result<NodeId> {
    let w1 = tape.param(store, "mlp_w1")?;
    let b1 = tape.param(store, "mlp_b1")?;
    let w2 = tape.param(store, "mlp_w2")?;
    let b2 = tape.param(store, "mlp_b2")?;
    let alpha = tape.param(store, "mlp_alpha")?;
    let h = tape.matmul(query, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let f = tape.matmul(h, w2)?;
    let f = tape.add_row(f, b2)?;
    let delta = tape.sub(f, query)?;
    let gated = tape.matmul(alpha, delta)?;
    tape.add(query, gated)
}

/// Forward pass of the gated-MLP aggregator on the mean prompt.
pub fn aggregate_mlp(prompts: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let query = mean_prompt(prompts)?;
    let mut tape = Tape::new();
    let q = tape.input(&query);
    let out = mlp_aggregate_graph(&mut tape, q, store)?;
    Ok(tape.value(out)?.clone())
}

/// Picks one prompt uniformly; deterministic in the seed.
pub fn aggregate_random(prompts: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let i = rng.random_range(0..prompts.rows());
    Tensor::row(prompts.row_slice(i).to_vec())
}

/// Dispatches one aggregation pass. `params` is required for the learned
/// kinds and ignored otherwise; `seed` only feeds the random strategy.
pub fn aggregate_forward(
    kind: AggregatorKind,
    prompts: &Tensor,
    params: Option<&ParamStore>,
    heads: usize,
    seed: u64,
) -> Result<Tensor> {
    match kind {
        AggregatorKind::Random => aggregate_random(prompts, seed),
        AggregatorKind::Mean => mean_prompt(prompts),
        AggregatorKind::Mlp => {
            let store = params.ok_or_else(|| {
                Error::Config("mlp aggregation requires trained parameters".into())
            })?;
            aggregate_mlp(prompts, store)
        }
        AggregatorKind::Attention => {
            let store = params.ok_or_else(|| {
                Error::Config("attention aggregation requires trained parameters".into())
            })?;
            Ok(aggregate_attention(prompts, store, heads)?.prompt)
        }
    }
}

/// Clipped, scaled cosine score between an image and a prompt:
/// `s * max(cos(x, p), 0)`, in `[0, s]`.
pub fn clip_s(image: &Tensor, prompt: &Tensor, s: f64) -> Result<f64> {
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Config(format!("reward scale must be > 0, got {s}")));
    }
    let cos = crate::diffcore::ops::cosine_sim(image, prompt)?;
    Ok(s * cos.max(0.0))
}

/// Puts the negated mean reward on the record: given an aggregated prompt
/// node (`1 x d`) and an `m x d` image batch node, returns the `1 x 1` loss
/// `-mean_i s * max(cos(x_i, p), 0)`. Minimizing it maximizes the reward.
pub fn reward_loss_graph(
    tape: &mut Tape,
    aggregated: NodeId,
    images: NodeId,
    s: f64,
) -> Result<NodeId> {
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Config(format!("reward scale must be > 0, got {s}")));
    }
    let m = tape.value(images)?.rows();
    let p_hat = tape.row_normalize(aggregated)?;
    let x_hat = tape.row_normalize(images)?;
    let cos = tape.matmul_tb(x_hat, p_hat)?;
    let clipped = tape.relu(cos)?;
    let total = tape.sum_all(clipped)?;
    tape.scale(total, -s / m as f64)
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    owner: &'a str,
    prompt_id: usize,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_tag: Option<&'static str>,
}

fn tag_label(tag: NoiseTag) -> &'static str {
    match tag {
        NoiseTag::Relevant => "relevant",
        NoiseTag::Redundant => "redundant",
        NoiseTag::Irrelevant => "irrelevant",
    }
}

/// Head-averaged scores of one aggregation, renormalized over the set.
fn owner_scores(scores: &Tensor) -> Vec<f64> {
    let (heads, n) = (scores.rows(), scores.cols());
    let mut avg = vec![0.0; n];
    for h in 0..heads {
        for (j, v) in scores.row_slice(h).iter().enumerate() {
            avg[j] += v / heads as f64;
        }
    }
    let total: f64 = avg.iter().sum();
    avg.iter_mut().for_each(|v| *v /= total);
    avg
}

/// Renders one JSON line per (owner, prompt) with the head-averaged,
/// renormalized attention score. Classification owners are classes and
/// their prompt sets; retrieval owners are images and their caption sets.
/// Noise tags ride along when the dataset has them.
pub fn export_attention_scores(
    dataset: &Dataset,
    view: &DatasetView,
    store: &ParamStore,
    heads: usize,
    task: TaskKind,
) -> Result<String> {
    let mut out = String::new();
    let mut emit = |owner: &str, ids: &[usize], tags: Option<&Vec<NoiseTag>>| -> Result<()> {
        let prompts = dataset.text.rows_tensor(ids)?;
        let agg = aggregate_attention(&prompts, store, heads)?;
        for (j, score) in owner_scores(&agg.scores).into_iter().enumerate() {
            let line = ScoreLine {
                owner,
                prompt_id: ids[j],
                score,
                noise_tag: tags.map(|m| tag_label(m[j])),
            };
            out.push_str(&serde_json::to_string(&line).expect("score line serializes"));
            out.push('\n');
        }
        Ok(())
    };
    match task {
        TaskKind::Classification => {
            for local in 0..view.class_count() {
                let class = view.class_record(local);
                emit(
                    &class.name,
                    class.prompt_ids.ids(),
                    class.noise_mask.as_ref(),
                )?;
            }
        }
        TaskKind::Retrieval => {
            for (embed_id, _) in view.train_images() {
                let caps = dataset.manifest.captions.get(&embed_id).ok_or_else(|| {
                    Error::Data(format!("image {embed_id} has no captions to aggregate"))
                })?;
                emit(&format!("image_{embed_id}"), caps, None)?;
            }
        }
    }
    Ok(out)
}

/// Random unit rows; shared by tests and the random baseline.
pub fn random_unit_rows(n: usize, d: usize, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        rows.push(v);
    }
    let t = Tensor::from_rows(&rows)?;
    crate::diffcore::ops::row_normalize(&t)
}
