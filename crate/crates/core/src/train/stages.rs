//! Stage-wise trainers: the aggregator on the clipped-cosine alignment
//! reward, the adapter on the combined distillation + task objective, and a
//! joint single-loop alternative whose distillation targets are recomputed
//! per batch but detached from the aggregator's gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::adapt::{
    classify, cosine_logits_graph, fused_weights_graph, generate_aape, generator_graph,
    init_adapter_store, register_adapter_params, retrieval_scores,
};
use crate::aggregate::{
    aggregate_forward, clip_s, init_mlp_aggregator_store, mean_prompt, mlp_aggregate_graph,
    random_unit_rows, reward_loss_graph, AggregatorKind, GLOBAL_QUERY_PARAM,
};
use crate::config::{QueryMode, StageMode, TaskKind, TrainConfig};
use crate::diffcore::{
    attention_block, init_attention_store, optimizer_step, register_attention_params, NodeId,
    Optimizer, ParamStore, Schedule, Tape, Tensor,
};
use crate::embedio::{Dataset, DatasetView, Fold};
use crate::error::{Error, Result};
use crate::evalkit::{argmax_tie_low, recall_at_k, top1_accuracy};
use crate::losses::{contrastive_clip_graph, distill_loss_graph, task_ce_graph};

/// Offset separating the adapter's random streams from the aggregator's
/// under one master seed.
const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

const STREAM_AGG_INIT: u64 = 0;
const STREAM_AGG_SHUFFLE: u64 = 1;
const STREAM_ADAPTER_INIT: u64 = 2;
const STREAM_ADAPTER_SHUFFLE: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed.wrapping_add(stream.wrapping_mul(STREAM_STRIDE)))
}

/// Seed for the sampling aggregator on one prompt-set owner: stable per
/// (master seed, owner), different across owners.
pub fn unit_seed(seed: u64, owner: usize) -> u64 {
    seed ^ (owner as u64).wrapping_mul(STREAM_STRIDE)
}

/// Stride separating per-epoch sampling seeds from everything else.
const EPOCH_STRIDE: u64 = 0x517C_C1B7_2722_0A95;

/// Seed for target recomputation in training epoch `epoch`: the sampling
/// baseline redraws its prompt each epoch (that is what random sampling
/// means as a baseline), while staying a pure function of the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(EPOCH_STRIDE))
}

/// A frozen aggregation strategy plus whatever parameters it carries.
/// Non-parametric strategies (mean, sampling) use `params: None`.
#[derive(Debug, Clone, Copy)]
pub struct AggregatorHandle<'a> {
    pub kind: AggregatorKind,
    pub params: Option<&'a ParamStore>,
}

impl<'a> AggregatorHandle<'a> {
    pub fn new(kind: AggregatorKind, params: Option<&'a ParamStore>) -> Self {
        AggregatorHandle { kind, params }
    }

    pub fn attention(params: &'a ParamStore) -> Self {
        AggregatorHandle::new(AggregatorKind::Attention, Some(params))
    }

    /// Aggregates one prompt set. `owner` keeps the sampling strategy's
    /// draw stable per set while still varying across sets.
    pub fn aggregate(
        &self,
        prompts: &Tensor,
        heads: usize,
        seed: u64,
        owner: usize,
    ) -> Result<Tensor> {
        aggregate_forward(self.kind, prompts, self.params, heads, unit_seed(seed, owner))
    }
}

/// Trained aggregator parameters plus the run's reward history. Entry 0 of
/// `reward_trace` is the pre-training value; one entry follows per epoch.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub params: ParamStore,
    pub kind: AggregatorKind,
    pub reward_trace: Vec<f64>,
}

impl Stage1Output {
    pub fn handle(&self) -> AggregatorHandle<'_> {
        AggregatorHandle::new(self.kind, Some(&self.params))
    }
}

/// Trained adapter parameters plus the per-epoch mean combined loss.
#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub params: ParamStore,
    pub loss_trace: Vec<f64>,
}

/// Fresh parameters for the requested aggregation strategy. The global
/// query vector is added when the config asks for a learned query.
pub fn init_aggregator(
    kind: AggregatorKind,
    d: usize,
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<ParamStore> {
    match kind {
        AggregatorKind::Attention => {
            let mut store = init_attention_store(d, config.heads, rng)?;
            if config.query_mode == QueryMode::Global {
                store.insert(GLOBAL_QUERY_PARAM, random_unit_rows(1, d, rng)?)?;
            }
            Ok(store)
        }
        AggregatorKind::Mlp => init_mlp_aggregator_store(d, rng),
        AggregatorKind::Mean | AggregatorKind::Random => Ok(ParamStore::new()),
    }
}

/// The prompt set each training item aligns to: per local class for
/// classification, per train image (its captions) for retrieval. Values are
/// `(owner id, prompts)` where the owner is the global class index or the
/// image embed id.
fn prompt_sets(
    dataset: &Dataset,
    view: &DatasetView,
    task: TaskKind,
) -> Result<BTreeMap<usize, (usize, Tensor)>> {
    let mut sets = BTreeMap::new();
    match task {
        TaskKind::Classification => {
            for local in 0..view.class_count() {
                let record = view.class_record(local);
                let prompts = dataset.text.rows_tensor(record.prompt_ids.ids())?;
                sets.insert(local, (view.global_class(local), prompts));
            }
        }
        TaskKind::Retrieval => {
            for (embed_id, _) in view.train_images() {
                let caps = dataset.manifest.captions.get(&embed_id).ok_or_else(|| {
                    Error::Data(format!("image {embed_id} has no caption set"))
                })?;
                sets.insert(embed_id, (embed_id, dataset.text.rows_tensor(caps)?));
            }
        }
    }
    Ok(sets)
}

/// The key of `prompt_sets` a training item aligns to.
fn item_key(task: TaskKind, embed_id: usize, label: usize) -> usize {
    match task {
        TaskKind::Classification => label,
        TaskKind::Retrieval => embed_id,
    }
}

/// Mean clipped-cosine alignment reward over the view's train fold.
pub fn mean_reward(
    dataset: &Dataset,
    view: &DatasetView,
    handle: AggregatorHandle<'_>,
    config: &TrainConfig,
) -> Result<f64> {
    let train = view.train_images();
    if train.is_empty() {
        return Err(Error::Data("training fold is empty".into()));
    }
    let sets = prompt_sets(dataset, view, config.task)?;
    let mut aggregated = BTreeMap::new();
    for (key, (owner, prompts)) in &sets {
        aggregated.insert(
            *key,
            handle.aggregate(prompts, config.heads, config.seed, *owner)?,
        );
    }
    let mut total = 0.0;
    for (embed_id, label) in &train {
        let key = item_key(config.task, *embed_id, *label);
        let p = aggregated
            .get(&key)
            .ok_or_else(|| Error::Data(format!("no prompt set for train item {embed_id}")))?;
        let x = dataset.images.row_tensor(*embed_id)?;
        total += clip_s(&x, p, config.reward_scale)?;
    }
    Ok(total / train.len() as f64)
}

/// Index ranges that chunk `n` shuffled items into batches. A trailing
/// single-item chunk is merged into its predecessor so batch losses that
/// need at least two items (the contrastive task) stay well-defined.
fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        bounds.push((start, end));
        start = end;
    }
    if bounds.len() > 1 && bounds[bounds.len() - 1].1 - bounds[bounds.len() - 1].0 == 1 {
        let last = bounds.pop().expect("nonempty");
        bounds.last_mut().expect("nonempty").1 = last.1;
    }
    bounds
}

/// Internal learning-rate boost for the aggregator stage. The alignment
/// reward moves the attention scores through a softmax whose gradients are
/// an order of magnitude weaker than the value-path gradients; at the
/// adapter's rate the score distribution never leaves its initialization,
/// so the stage trains with a proportionally larger step.
const AGGREGATOR_LR_SCALE: f64 = 20.0;

fn aggregator_lr_scale() -> f64 {
    // TEMP tuning scaffolding: env override, removed after calibration.
    std::env::var("TUNE_S1LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(AGGREGATOR_LR_SCALE)
}

fn schedule_for(
    config: &TrainConfig,
    steps_per_epoch: usize,
    epochs: usize,
    lr_scale: f64,
) -> Schedule {
    Schedule {
        base_lr: config.lr * lr_scale,
        warmup_steps: steps_per_epoch as u64,
        total_steps: (steps_per_epoch * epochs) as u64,
    }
}

/// Puts one aggregation pass on the record for a trainable strategy.
/// Attention parameters are (re-)registered per call; repeated uses of one
/// parameter accumulate gradients correctly.
fn aggregation_graph(
    tape: &mut Tape,
    store: &ParamStore,
    kind: AggregatorKind,
    prompts: &Tensor,
    heads: usize,
) -> Result<NodeId> {
    match kind {
        AggregatorKind::Attention => {
            let params = register_attention_params(tape, store)?;
            let kv = tape.input(prompts);
            let q = if store.contains(GLOBAL_QUERY_PARAM) {
                tape.param(store, GLOBAL_QUERY_PARAM)?
            } else {
                let m = mean_prompt(prompts)?;
                tape.input(&m)
            };
            Ok(attention_block(tape, q, kv, &params, heads)?.out)
        }
        AggregatorKind::Mlp => {
            let m = mean_prompt(prompts)?;
            let q = tape.input(&m);
            mlp_aggregate_graph(tape, q, store)
        }
        AggregatorKind::Mean | AggregatorKind::Random => Err(Error::State(
            "mean and sampling aggregators have no trainable graph".into(),
        )),
    }
}

/// Negated mean reward of one prompt set against an image batch, through
/// the aggregator graph — the unit the alignment stage minimizes.
pub fn reward_unit_graph(
    tape: &mut Tape,
    store: &ParamStore,
    kind: AggregatorKind,
    prompts: &Tensor,
    images: &Tensor,
    heads: usize,
    reward_scale: f64,
) -> Result<NodeId> {
    let agg = aggregation_graph(tape, store, kind, prompts, heads)?;
    let imgs = tape.input(images);
    reward_loss_graph(tape, agg, imgs, reward_scale)
}

/// Trains aggregator parameters by mini-batch descent on the negated mean
/// reward over train images. Non-parametric strategies return immediately
/// with a single-entry trace. Zero epochs leaves `init` untouched.
pub fn train_aggregator(
    dataset: &Dataset,
    view: &DatasetView,
    init: ParamStore,
    kind: AggregatorKind,
    config: &TrainConfig,
) -> Result<Stage1Output> {
    config.validate()?;
    let train = view.train_images();
    if train.is_empty() {
        return Err(Error::Data("training fold is empty".into()));
    }
    let sets = prompt_sets(dataset, view, config.task)?;
    let mut store = init;
    let handle = AggregatorHandle::new(kind, Some(&store));
    let mut trace = vec![mean_reward(dataset, view, handle, config)?];
    if store.tensor_count() == 0 || config.stage1_epochs == 0 {
        return Ok(Stage1Output {
            params: store,
            kind,
            reward_trace: trace,
        });
    }

    let bounds = batch_bounds(train.len(), config.batch_size);
    let opt = Optimizer::new(
        config.optimizer,
        config.momentum,
        schedule_for(config, bounds.len(), config.stage1_epochs, aggregator_lr_scale()),
    )?;
    let mut rng = stream_rng(config.seed, STREAM_AGG_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.stage1_epochs {
        order.shuffle(&mut rng);
        for (start, end) in &bounds {
            let batch: Vec<(usize, usize)> = order[*start..*end].iter().map(|i| train[*i]).collect();
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (embed_id, label) in &batch {
                groups
                    .entry(item_key(config.task, *embed_id, *label))
                    .or_default()
                    .push(*embed_id);
            }
            let mut tape = Tape::new();
            let mut total: Option<NodeId> = None;
            for (key, ids) in &groups {
                let (_, prompts) = sets
                    .get(key)
                    .ok_or_else(|| Error::Data(format!("no prompt set for key {key}")))?;
                let images = dataset.images.rows_tensor(ids)?;
                let unit = reward_unit_graph(
                    &mut tape,
                    &store,
                    kind,
                    prompts,
                    &images,
                    config.heads,
                    config.reward_scale,
                )?;
                // Per-image weighting: the unit loss is a mean over its own
                // images, so rescale by the group's share of the batch.
                let unit = tape.scale(unit, ids.len() as f64 / batch.len() as f64)?;
                total = Some(match total {
                    None => unit,
                    Some(t) => tape.add(t, unit)?,
                });
            }
            let loss = total.expect("batch is nonempty");
            tape.backward(loss, &mut store)?;
            optimizer_step(&opt, &mut store)?;
        }
        let handle = AggregatorHandle::new(kind, Some(&store));
        trace.push(mean_reward(dataset, view, handle, config)?);
    }
    Ok(Stage1Output {
        params: store,
        kind,
        reward_trace: trace,
    })
}

/// Stage-1 training for any aggregation strategy, from a fresh seeded
/// initialization.
pub fn train_stage1_with_kind(
    dataset: &Dataset,
    view: &DatasetView,
    kind: AggregatorKind,
    config: &TrainConfig,
) -> Result<Stage1Output> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, STREAM_AGG_INIT);
    let init = init_aggregator(kind, dataset.dim(), config, &mut rng)?;
    train_aggregator(dataset, view, init, kind, config)
}

/// First training stage: fresh attention parameters fit to the alignment
/// reward; the result is frozen for the distillation stage.
pub fn train_stage1(
    dataset: &Dataset,
    view: &DatasetView,
    config: &TrainConfig,
) -> Result<Stage1Output> {
    train_stage1_with_kind(dataset, view, AggregatorKind::Attention, config)
}

/// One classification training item on a batch graph.
#[derive(Debug, Clone)]
pub struct ClassItem {
    /// `1 x d` image embedding.
    pub image: Tensor,
    /// Local label inside the training view.
    pub label: usize,
    /// `1 x d` distillation target; required when `lambda > 0`.
    pub target: Option<Tensor>,
}

/// Combined objective for a classification batch as one scalar node:
/// mean over items of `lambda * distill + cross_entropy`.
pub fn classification_batch_graph(
    tape: &mut Tape,
    store: &ParamStore,
    templates: &Tensor,
    items: &[ClassItem],
    lambda: f64,
    tau: f64,
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::Data("classification batch is empty".into()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let nodes = register_adapter_params(tape, store)?;
    let tmpl = tape.input(templates);
    let mut total: Option<NodeId> = None;
    for item in items {
        let x = tape.input(&item.image);
        let h = generator_graph(tape, x, &nodes)?;
        let fused = fused_weights_graph(tape, tmpl, h, &nodes)?;
        let logits = cosine_logits_graph(tape, x, fused, tau)?;
        let mut loss = task_ce_graph(tape, logits, item.label)?;
        if lambda > 0.0 {
            let target = item.target.as_ref().ok_or_else(|| {
                Error::State("distillation target missing while lambda > 0".into())
            })?;
            let t = tape.input(target);
            let dl = distill_loss_graph(tape, h, t)?;
            let dl = tape.scale(dl, lambda)?;
            loss = tape.add(loss, dl)?;
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    tape.scale(total.expect("nonempty batch"), 1.0 / items.len() as f64)
}

/// Combined objective for a retrieval batch: symmetric contrastive loss
/// over matched (generated, caption) rows plus the mean distillation term.
pub fn retrieval_batch_graph(
    tape: &mut Tape,
    store: &ParamStore,
    images: &Tensor,
    captions: &Tensor,
    targets: Option<&Tensor>,
    lambda: f64,
    tau: f64,
) -> Result<NodeId> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let nodes = register_adapter_params(tape, store)?;
    let x = tape.input(images);
    let h = generator_graph(tape, x, &nodes)?;
    let caps = tape.input(captions);
    let mut loss = contrastive_clip_graph(tape, h, caps, tau)?;
    if lambda > 0.0 {
        let targets = targets.ok_or_else(|| {
            Error::State("distillation targets missing while lambda > 0".into())
        })?;
        let t = tape.input(targets);
        let dl = distill_loss_graph(tape, h, t)?;
        let dl = tape.scale(dl, lambda / images.rows() as f64)?;
        loss = tape.add(loss, dl)?;
    }
    Ok(loss)
}

/// Rescales an aggregated prompt to unit length before it becomes a
/// distillation target. The alignment reward that trains the aggregator is
/// scale-blind, so the raw output norm is an artifact of the architecture;
/// the target has to sit on the same unit sphere as every other embedding
/// or its arbitrary magnitude leaks into the generator through the
/// squared-distance pull.
fn unit_target(t: Tensor) -> Result<Tensor> {
    let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::Data(format!(
            "aggregated prompt has non-normalizable norm {norm}"
        )));
    }
    let mut t = t;
    for v in t.data_mut() {
        *v /= norm;
    }
    Ok(t)
}

/// Aggregated unit-norm targets for every prompt-set key under a frozen
/// aggregator. `seed` is the draw seed for the sampling strategy; trainers
/// pass a per-epoch value so that baseline re-samples across epochs.
fn distill_targets(
    sets: &BTreeMap<usize, (usize, Tensor)>,
    handle: AggregatorHandle<'_>,
    config: &TrainConfig,
    seed: u64,
) -> Result<BTreeMap<usize, Tensor>> {
    let mut targets = BTreeMap::new();
    for (key, (owner, prompts)) in sets {
        targets.insert(
            *key,
            unit_target(handle.aggregate(prompts, config.heads, seed, *owner)?)?,
        );
    }
    Ok(targets)
}

/// Second training stage: generator + projection descend the combined
/// objective against targets from the frozen aggregator. With `lambda = 0`
/// the aggregator is never consulted and may be absent.
pub fn train_stage2(
    dataset: &Dataset,
    view: &DatasetView,
    aggregator: Option<AggregatorHandle<'_>>,
    config: &TrainConfig,
) -> Result<Stage2Output> {
    config.validate()?;
    let distilling = config.lambda > 0.0;
    if distilling && aggregator.is_none() {
        return Err(Error::State(
            "stage-2 training with lambda > 0 needs frozen aggregator parameters; \
             run the aggregation stage first or set lambda to 0"
                .into(),
        ));
    }
    let train = view.train_images();
    if train.is_empty() {
        return Err(Error::Data("training fold is empty".into()));
    }
    let d = dataset.dim();
    let mut init_rng = stream_rng(config.seed, STREAM_ADAPTER_INIT);
    let mut store = init_adapter_store(d, config.hidden, &mut init_rng)?;
    if config.stage2_epochs == 0 {
        return Ok(Stage2Output {
            params: store,
            loss_trace: Vec::new(),
        });
    }

    // Frozen-aggregator targets; the per-epoch recompute below re-reads
    // these same values since nothing mutates the aggregator.
    let sets = if distilling {
        Some(prompt_sets(dataset, view, config.task)?)
    } else {
        None
    };
    let templates = match config.task {
        TaskKind::Classification => Some(view.templates_tensor(&dataset.text)?),
        TaskKind::Retrieval => None,
    };
    let caption_ids: BTreeMap<usize, Vec<usize>> = match config.task {
        TaskKind::Retrieval => {
            let mut map = BTreeMap::new();
            for (embed_id, _) in &train {
                let caps = dataset.manifest.captions.get(embed_id).ok_or_else(|| {
                    Error::Data(format!("image {embed_id} has no caption set"))
                })?;
                map.insert(*embed_id, caps.clone());
            }
            map
        }
        TaskKind::Classification => BTreeMap::new(),
    };

    let bounds = batch_bounds(train.len(), config.batch_size);
    let opt = Optimizer::new(
        config.optimizer,
        config.momentum,
        schedule_for(config, bounds.len(), config.stage2_epochs, 1.0),
    )?;
    let mut rng = stream_rng(config.seed, STREAM_ADAPTER_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(config.stage2_epochs);
    for _ in 0..config.stage2_epochs {
        let targets = match (&sets, aggregator) {
            (Some(sets), Some(handle)) => Some(distill_targets(sets, handle, config)?),
            _ => None,
        };
        // One caption draw per image per epoch, in stable item order.
        let picks: BTreeMap<usize, usize> = match config.task {
            TaskKind::Retrieval => train
                .iter()
                .map(|(embed_id, _)| {
                    let caps = &caption_ids[embed_id];
                    (*embed_id, caps[rng.random_range(0..caps.len())])
                })
                .collect(),
            TaskKind::Classification => BTreeMap::new(),
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (start, end) in &bounds {
            let batch: Vec<(usize, usize)> = order[*start..*end].iter().map(|i| train[*i]).collect();
            let mut tape = Tape::new();
            let loss = match config.task {
                TaskKind::Classification => {
                    let mut items = Vec::with_capacity(batch.len());
                    for (embed_id, label) in &batch {
                        let target = match &targets {
                            Some(t) => Some(t[label].clone()),
                            None => None,
                        };
                        items.push(ClassItem {
                            image: dataset.images.row_tensor(*embed_id)?,
                            label: *label,
                            target,
                        });
                    }
                    classification_batch_graph(
                        &mut tape,
                        &store,
                        templates.as_ref().expect("classification templates"),
                        &items,
                        config.lambda,
                        config.tau,
                    )?
                }
                TaskKind::Retrieval => {
                    let ids: Vec<usize> = batch.iter().map(|(e, _)| *e).collect();
                    let images = dataset.images.rows_tensor(&ids)?;
                    let cap_rows: Vec<usize> = ids.iter().map(|e| picks[e]).collect();
                    let captions = dataset.text.rows_tensor(&cap_rows)?;
                    let target_rows = match &targets {
                        Some(t) => Some(Tensor::from_rows(
                            &ids.iter()
                                .map(|e| t[e].row_slice(0).to_vec())
                                .collect::<Vec<_>>(),
                        )?),
                        None => None,
                    };
                    retrieval_batch_graph(
                        &mut tape,
                        &store,
                        &images,
                        &captions,
                        target_rows.as_ref(),
                        config.lambda,
                        config.tau,
                    )?
                }
            };
            epoch_loss += tape.value(loss)?.get(0, 0) * batch.len() as f64;
            tape.backward(loss, &mut store)?;
            optimizer_step(&opt, &mut store)?;
        }
        trace.push(epoch_loss / train.len() as f64);
    }
    Ok(Stage2Output {
        params: store,
        loss_trace: trace,
    })
}

/// Single-loop alternative: every batch first reads detached distillation
/// targets from the live aggregator, then steps the aggregator on the
/// reward and the adapter on the combined objective. The epoch horizon is
/// the stage-2 epoch count.
pub fn train_joint(
    dataset: &Dataset,
    view: &DatasetView,
    config: &TrainConfig,
) -> Result<(Stage1Output, Stage2Output)> {
    config.validate()?;
    let train = view.train_images();
    if train.is_empty() {
        return Err(Error::Data("training fold is empty".into()));
    }
    let d = dataset.dim();
    let kind = AggregatorKind::Attention;
    let mut agg_store = {
        let mut rng = stream_rng(config.seed, STREAM_AGG_INIT);
        init_aggregator(kind, d, config, &mut rng)?
    };
    let mut ada_store = {
        let mut rng = stream_rng(config.seed, STREAM_ADAPTER_INIT);
        init_adapter_store(d, config.hidden, &mut rng)?
    };
    let sets = prompt_sets(dataset, view, config.task)?;
    let templates = match config.task {
        TaskKind::Classification => Some(view.templates_tensor(&dataset.text)?),
        TaskKind::Retrieval => None,
    };
    let epochs = config.stage2_epochs;
    let mut reward_trace = vec![mean_reward(
        dataset,
        view,
        AggregatorHandle::new(kind, Some(&agg_store)),
        config,
    )?];
    let mut loss_trace = Vec::with_capacity(epochs);
    if epochs == 0 {
        return Ok((
            Stage1Output {
                params: agg_store,
                kind,
                reward_trace,
            },
            Stage2Output {
                params: ada_store,
                loss_trace,
            },
        ));
    }

    let bounds = batch_bounds(train.len(), config.batch_size);
    let agg_opt = Optimizer::new(
        config.optimizer,
        config.momentum,
        schedule_for(config, bounds.len(), epochs, aggregator_lr_scale()),
    )?;
    let ada_opt = Optimizer::new(
        config.optimizer,
        config.momentum,
        schedule_for(config, bounds.len(), epochs, 1.0),
    )?;
    let mut rng = stream_rng(config.seed, STREAM_AGG_SHUFFLE);
    let mut pick_rng = stream_rng(config.seed, STREAM_ADAPTER_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (start, end) in &bounds {
            let batch: Vec<(usize, usize)> = order[*start..*end].iter().map(|i| train[*i]).collect();
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (embed_id, label) in &batch {
                groups
                    .entry(item_key(config.task, *embed_id, *label))
                    .or_default()
                    .push(*embed_id);
            }
            // Detached targets from the aggregator as of this batch.
            let targets = if config.lambda > 0.0 {
                let handle = AggregatorHandle::new(kind, Some(&agg_store));
                let mut t = BTreeMap::new();
                for key in groups.keys() {
                    let (owner, prompts) = sets
                        .get(key)
                        .ok_or_else(|| Error::Data(format!("no prompt set for key {key}")))?;
                    t.insert(
                        *key,
                        unit_target(handle.aggregate(prompts, config.heads, config.seed, *owner)?)?,
                    );
                }
                Some(t)
            } else {
                None
            };

            let mut tape = Tape::new();
            let mut total: Option<NodeId> = None;
            for (key, ids) in &groups {
                let (_, prompts) = &sets[key];
                let images = dataset.images.rows_tensor(ids)?;
                let unit = reward_unit_graph(
                    &mut tape,
                    &agg_store,
                    kind,
                    prompts,
                    &images,
                    config.heads,
                    config.reward_scale,
                )?;
                let unit = tape.scale(unit, ids.len() as f64 / batch.len() as f64)?;
                total = Some(match total {
                    None => unit,
                    Some(t) => tape.add(t, unit)?,
                });
            }
            tape.backward(total.expect("nonempty batch"), &mut agg_store)?;
            optimizer_step(&agg_opt, &mut agg_store)?;

            let mut tape = Tape::new();
            let loss = match config.task {
                TaskKind::Classification => {
                    let mut items = Vec::with_capacity(batch.len());
                    for (embed_id, label) in &batch {
                        let target = targets.as_ref().map(|t| t[label].clone());
                        items.push(ClassItem {
                            image: dataset.images.row_tensor(*embed_id)?,
                            label: *label,
                            target,
                        });
                    }
                    classification_batch_graph(
                        &mut tape,
                        &ada_store,
                        templates.as_ref().expect("classification templates"),
                        &items,
                        config.lambda,
                        config.tau,
                    )?
                }
                TaskKind::Retrieval => {
                    let ids: Vec<usize> = batch.iter().map(|(e, _)| *e).collect();
                    let images = dataset.images.rows_tensor(&ids)?;
                    // One caption draw per image straight from its stacked set.
                    let picked: Vec<Vec<f64>> = ids
                        .iter()
                        .map(|e| {
                            let caps = &sets[e].1;
                            let i = pick_rng.random_range(0..caps.rows());
                            caps.row_slice(i).to_vec()
                        })
                        .collect();
                    let captions = Tensor::from_rows(&picked)?;
                    let target_rows = match &targets {
                        Some(t) => Some(Tensor::from_rows(
                            &ids.iter()
                                .map(|e| t[e].row_slice(0).to_vec())
                                .collect::<Vec<_>>(),
                        )?),
                        None => None,
                    };
                    retrieval_batch_graph(
                        &mut tape,
                        &ada_store,
                        &images,
                        &captions,
                        target_rows.as_ref(),
                        config.lambda,
                        config.tau,
                    )?
                }
            };
            epoch_loss += tape.value(loss)?.get(0, 0) * batch.len() as f64;
            tape.backward(loss, &mut ada_store)?;
            optimizer_step(&ada_opt, &mut ada_store)?;
        }
        reward_trace.push(mean_reward(
            dataset,
            view,
            AggregatorHandle::new(kind, Some(&agg_store)),
            config,
        )?);
        loss_trace.push(epoch_loss / train.len() as f64);
    }
    Ok((
        Stage1Output {
            params: agg_store,
            kind,
            reward_trace,
        },
        Stage2Output {
            params: ada_store,
            loss_trace,
        },
    ))
}

/// Runs the configured training pipeline over one view.
pub fn fit(
    dataset: &Dataset,
    view: &DatasetView,
    config: &TrainConfig,
) -> Result<(Stage1Output, Stage2Output)> {
    match config.stage_mode {
        StageMode::TwoStage => {
            let s1 = train_stage1(dataset, view, config)?;
            let s2 = train_stage2(dataset, view, Some(s1.handle()), config)?;
            Ok((s1, s2))
        }
        StageMode::Joint => train_joint(dataset, view, config),
    }
}

/// Top-1 accuracy (percent) of the adapted classifier over one fold of the
/// view, with ties resolved toward the lowest class index.
pub fn evaluate_view_accuracy(
    dataset: &Dataset,
    view: &DatasetView,
    adapter: &ParamStore,
    tau: f64,
    fold: Fold,
) -> Result<f64> {
    let items = match fold {
        Fold::Train => view.train_images(),
        Fold::Test => view.test_images(),
    };
    if items.is_empty() {
        return Err(Error::Data("requested fold has no images".into()));
    }
    let templates = view.templates_tensor(&dataset.text)?;
    let mut predictions = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for (embed_id, label) in items {
        let x = dataset.images.row_tensor(embed_id)?;
        let aape = generate_aape(&x, adapter)?;
        let probs = classify(&x, &templates, &aape, adapter, tau)?;
        predictions.push(argmax_tie_low(probs.row_slice(0)));
        labels.push(label);
    }
    top1_accuracy(&predictions, &labels)
}

/// Recall@k (percent) for each requested `k`: adapted embeddings of the
/// fold's images query the fold's pooled caption gallery; an image's own
/// captions are its ground truth.
pub fn evaluate_retrieval(
    dataset: &Dataset,
    view: &DatasetView,
    adapter: &ParamStore,
    ks: &[usize],
    fold: Fold,
) -> Result<Vec<f64>> {
    let items = match fold {
        Fold::Train => view.train_images(),
        Fold::Test => view.test_images(),
    };
    if items.is_empty() {
        return Err(Error::Data("requested fold has no images".into()));
    }
    // Gallery positions are assigned in item order, captions in manifest order.
    let mut gallery_ids = Vec::new();
    let mut truth: Vec<BTreeSet<usize>> = Vec::with_capacity(items.len());
    for (embed_id, _) in &items {
        let caps = dataset
            .manifest
            .captions
            .get(embed_id)
            .ok_or_else(|| Error::Data(format!("image {embed_id} has no caption set")))?;
        let start = gallery_ids.len();
        gallery_ids.extend_from_slice(caps);
        truth.push((start..gallery_ids.len()).collect());
    }
    let gallery = dataset.text.rows_tensor(&gallery_ids)?;
    let mut rankings = Vec::with_capacity(items.len());
    for (embed_id, _) in &items {
        let x = dataset.images.row_tensor(*embed_id)?;
        let query = generate_aape(&x, adapter)?;
        let ranked = retrieval_scores(&query, &gallery)?;
        rankings.push(ranked.into_iter().map(|(pos, _)| pos).collect::<Vec<_>>());
    }
    ks.iter()
        .map(|k| recall_at_k(&rankings, &truth, *k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use crate::embedio::{generate, BankDtype, EmbeddingBank, SynthConfig};

    fn tiny_synth(seed: u64) -> Dataset {
        let mut cfg = SynthConfig::with_seed(seed);
        cfg.classes = 4;
        cfg.dim = 16;
        cfg.images_per_class = 6;
        cfg.prompts_per_class = 6;
        cfg.captions_per_image = 2;
        generate(&cfg).unwrap().dataset
    }

    fn fast_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::with_seed(seed);
        c.stage1_epochs = 6;
        c.stage2_epochs = 8;
        c.batch_size = 8;
        c.lr = 0.02;
        c
    }

    #[test]
    fn batch_bounds_merge_trailing_singleton() {
        assert_eq!(batch_bounds(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(batch_bounds(5, 2), vec![(0, 2), (2, 5)]);
        assert_eq!(batch_bounds(5, 4), vec![(0, 5)]);
        assert_eq!(batch_bounds(1, 4), vec![(0, 1)]);
        assert_eq!(batch_bounds(9, 3), vec![(0, 3), (3, 6), (6, 9)]);
    }

    #[test]
    fn unit_seeds_differ_across_owners_and_repeat_per_owner() {
        assert_eq!(unit_seed(7, 3), unit_seed(7, 3));
        assert_ne!(unit_seed(7, 3), unit_seed(7, 4));
        assert_ne!(unit_seed(7, 3), unit_seed(8, 3));
    }

    #[test]
    fn mean_reward_matches_direct_average() {
        let ds = tiny_synth(11);
        let view = DatasetView::full(&ds.manifest);
        let cfg = fast_config(11);
        let got = mean_reward(
            &ds,
            &view,
            AggregatorHandle::new(AggregatorKind::Mean, None),
            &cfg,
        )
        .unwrap();

        // Recompute with plain loops: arithmetic mean prompt per class, then
        // the scaled clipped cosine against each train image.
        let sets = prompt_sets(&ds, &view, TaskKind::Classification).unwrap();
        let mut total = 0.0;
        let train = view.train_images();
        for (embed_id, label) in &train {
            let prompts = &sets[label].1;
            let d = prompts.cols();
            let mut mean = vec![0.0; d];
            for r in 0..prompts.rows() {
                for (m, v) in mean.iter_mut().zip(prompts.row_slice(r)) {
                    *m += v / prompts.rows() as f64;
                }
            }
            let x = ds.images.row_tensor(*embed_id).unwrap();
            let xs = x.row_slice(0);
            let dot: f64 = xs.iter().zip(&mean).map(|(a, b)| a * b).sum();
            let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let np = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += cfg.reward_scale * (dot / (nx * np)).max(0.0);
        }
        let expected = total / train.len() as f64;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn stage1_zero_epochs_returns_init_untouched() {
        let ds = tiny_synth(1);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(1);
        cfg.stage1_epochs = 0;
        let mut rng = stream_rng(cfg.seed, STREAM_AGG_INIT);
        let init = init_aggregator(AggregatorKind::Attention, ds.dim(), &cfg, &mut rng).unwrap();
        let out =
            train_aggregator(&ds, &view, init.clone(), AggregatorKind::Attention, &cfg).unwrap();
        assert_eq!(out.params.max_param_diff(&init).unwrap(), 0.0);
        assert_eq!(out.reward_trace.len(), 1);
    }

    #[test]
    fn stage1_is_deterministic_and_raises_the_reward() {
        let ds = tiny_synth(2);
        let view = DatasetView::full(&ds.manifest);
        let cfg = fast_config(2);
        let a = train_stage1(&ds, &view, &cfg).unwrap();
        let b = train_stage1(&ds, &view, &cfg).unwrap();
        assert_eq!(a.params.max_param_diff(&b.params).unwrap(), 0.0);
        assert_eq!(a.reward_trace, b.reward_trace);
        assert_eq!(a.reward_trace.len(), cfg.stage1_epochs + 1);
        let first = a.reward_trace[0];
        let last = *a.reward_trace.last().unwrap();
        assert!(
            last > first,
            "reward should improve: {first} -> {last} ({:?})",
            a.reward_trace
        );
    }

    #[test]
    fn stage1_rejects_empty_train_fold() {
        let ds = tiny_synth(3);
        let mut manifest = ds.manifest.clone();
        for record in &mut manifest.images {
            record.fold = Fold::Test;
        }
        let all_test = Dataset {
            manifest,
            images: ds.images.clone(),
            text: ds.text.clone(),
        };
        let view = DatasetView::full(&all_test.manifest);
        let err = train_stage1(&all_test, &view, &fast_config(3)).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err:?}");
    }

    #[test]
    fn stage1_global_query_mode_trains_the_query_row() {
        let ds = tiny_synth(4);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(4);
        cfg.query_mode = QueryMode::Global;
        let mut frozen_cfg = cfg.clone();
        frozen_cfg.stage1_epochs = 0;
        let frozen = train_stage1(&ds, &view, &frozen_cfg).unwrap();
        let trained = train_stage1(&ds, &view, &cfg).unwrap();
        assert!(frozen.params.contains(GLOBAL_QUERY_PARAM));
        assert!(trained.params.contains(GLOBAL_QUERY_PARAM));
        let before = frozen.params.get(GLOBAL_QUERY_PARAM).unwrap();
        let after = trained.params.get(GLOBAL_QUERY_PARAM).unwrap();
        let moved = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(moved > 0.0, "global query row never moved");
    }

    #[test]
    fn parameter_free_strategies_skip_the_descent_loop() {
        let ds = tiny_synth(5);
        let view = DatasetView::full(&ds.manifest);
        let cfg = fast_config(5);
        for kind in [AggregatorKind::Mean, AggregatorKind::Random] {
            let out = train_stage1_with_kind(&ds, &view, kind, &cfg).unwrap();
            assert_eq!(out.params.tensor_count(), 0);
            assert_eq!(out.reward_trace.len(), 1);
        }
        let mlp = train_stage1_with_kind(&ds, &view, AggregatorKind::Mlp, &cfg).unwrap();
        assert_eq!(mlp.reward_trace.len(), cfg.stage1_epochs + 1);
        let mut rng = stream_rng(cfg.seed, STREAM_AGG_INIT);
        let init = init_aggregator(AggregatorKind::Mlp, ds.dim(), &cfg, &mut rng).unwrap();
        assert!(mlp.params.max_param_diff(&init).unwrap() > 0.0);
    }

    #[test]
    fn stage2_needs_an_aggregator_only_when_distilling() {
        let ds = tiny_synth(6);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(6);
        cfg.stage2_epochs = 1;
        let err = train_stage2(&ds, &view, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err:?}");
        cfg.lambda = 0.0;
        train_stage2(&ds, &view, None, &cfg).unwrap();
    }

    #[test]
    fn stage2_with_zero_lambda_ignores_the_aggregator() {
        let ds = tiny_synth(7);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(7);
        cfg.stage2_epochs = 3;
        let s1a = train_stage1(&ds, &view, &cfg).unwrap();
        let mut other = cfg.clone();
        other.seed = 99;
        let s1b = train_stage1(&ds, &view, &other).unwrap();
        assert!(s1a.params.max_param_diff(&s1b.params).unwrap() > 0.0);

        let mut free = cfg.clone();
        free.lambda = 0.0;
        let none = train_stage2(&ds, &view, None, &free).unwrap();
        let with_a = train_stage2(&ds, &view, Some(s1a.handle()), &free).unwrap();
        let with_b = train_stage2(&ds, &view, Some(s1b.handle()), &free).unwrap();
        assert_eq!(none.params.max_param_diff(&with_a.params).unwrap(), 0.0);
        assert_eq!(none.params.max_param_diff(&with_b.params).unwrap(), 0.0);
        assert_eq!(none.loss_trace, with_a.loss_trace);
        assert_eq!(none.loss_trace, with_b.loss_trace);

        let distilled = train_stage2(&ds, &view, Some(s1a.handle()), &cfg).unwrap();
        assert!(distilled.params.max_param_diff(&none.params).unwrap() > 0.0);
    }

    #[test]
    fn stage2_zero_epochs_returns_fresh_adapter() {
        let ds = tiny_synth(8);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(8);
        cfg.stage2_epochs = 0;
        cfg.lambda = 0.0;
        let a = train_stage2(&ds, &view, None, &cfg).unwrap();
        let b = train_stage2(&ds, &view, None, &cfg).unwrap();
        assert!(a.loss_trace.is_empty());
        assert_eq!(a.params.max_param_diff(&b.params).unwrap(), 0.0);
        let mut rng = stream_rng(cfg.seed, STREAM_ADAPTER_INIT);
        let init = init_adapter_store(ds.dim(), cfg.hidden, &mut rng).unwrap();
        assert_eq!(a.params.max_param_diff(&init).unwrap(), 0.0);
    }

    #[test]
    fn stage2_training_improves_train_accuracy() {
        let ds = tiny_synth(9);
        let view = DatasetView::full(&ds.manifest);
        let cfg = fast_config(9);
        let s1 = train_stage1(&ds, &view, &cfg).unwrap();
        let mut frozen_cfg = cfg.clone();
        frozen_cfg.stage2_epochs = 0;
        let untrained = train_stage2(&ds, &view, Some(s1.handle()), &frozen_cfg).unwrap();
        let trained = train_stage2(&ds, &view, Some(s1.handle()), &cfg).unwrap();
        let before =
            evaluate_view_accuracy(&ds, &view, &untrained.params, cfg.tau, Fold::Train).unwrap();
        let after =
            evaluate_view_accuracy(&ds, &view, &trained.params, cfg.tau, Fold::Train).unwrap();
        assert!(
            after > before,
            "train accuracy should improve: {before} -> {after}"
        );
        assert_eq!(trained.loss_trace.len(), cfg.stage2_epochs);
        let first = trained.loss_trace[0];
        let last = *trained.loss_trace.last().unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn stage2_retrieval_loss_falls_and_recalls_are_monotone() {
        let ds = tiny_synth(10);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(10);
        cfg.task = TaskKind::Retrieval;
        let s1 = train_stage1(&ds, &view, &cfg).unwrap();
        let out = train_stage2(&ds, &view, Some(s1.handle()), &cfg).unwrap();
        let first = out.loss_trace[0];
        let last = *out.loss_trace.last().unwrap();
        assert!(last < first, "retrieval loss should fall: {first} -> {last}");
        let recalls =
            evaluate_retrieval(&ds, &view, &out.params, &[1, 5, 10], Fold::Test).unwrap();
        assert_eq!(recalls.len(), 3);
        for pair in recalls.windows(2) {
            assert!(pair[0] <= pair[1], "recall not monotone: {recalls:?}");
        }
        for r in &recalls {
            assert!((0.0..=100.0).contains(r));
        }
    }

    #[test]
    fn classification_objective_passes_a_gradient_audit() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let d = 8;
        let store = init_adapter_store(d, None, &mut rng).unwrap();
        let templates = random_unit_rows(3, d, &mut rng).unwrap();
        let items: Vec<ClassItem> = (0..3)
            .map(|label| {
                Ok(ClassItem {
                    image: random_unit_rows(1, d, &mut rng)?,
                    label,
                    target: Some(random_unit_rows(1, d, &mut rng)?),
                })
            })
            .collect::<Result<_>>()
            .unwrap();
        let report = finite_diff_check(&store, 1e-5, 24, 7, &mut |ps| {
            let mut tape = Tape::new();
            let loss = classification_batch_graph(&mut tape, ps, &templates, &items, 2.5, 0.5)?;
            Ok((tape, loss))
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn retrieval_objective_passes_a_gradient_audit() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let d = 8;
        let store = init_adapter_store(d, None, &mut rng).unwrap();
        let images = random_unit_rows(3, d, &mut rng).unwrap();
        let captions = random_unit_rows(3, d, &mut rng).unwrap();
        let targets = random_unit_rows(3, d, &mut rng).unwrap();
        let report = finite_diff_check(&store, 1e-5, 24, 9, &mut |ps| {
            let mut tape = Tape::new();
            let loss = retrieval_batch_graph(
                &mut tape,
                ps,
                &images,
                &captions,
                Some(&targets),
                1.5,
                0.5,
            )?;
            Ok((tape, loss))
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn joint_zero_learning_rate_is_a_no_op() {
        let ds = tiny_synth(12);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(12);
        cfg.stage_mode = StageMode::Joint;
        cfg.lr = 0.0;
        cfg.stage2_epochs = 2;
        let mut init_cfg = cfg.clone();
        init_cfg.stage2_epochs = 0;
        let (agg0, ada0) = train_joint(&ds, &view, &init_cfg).unwrap();
        let (agg, ada) = train_joint(&ds, &view, &cfg).unwrap();
        assert_eq!(agg.params.max_param_diff(&agg0.params).unwrap(), 0.0);
        assert_eq!(ada.params.max_param_diff(&ada0.params).unwrap(), 0.0);
        assert_eq!(agg.reward_trace.len(), 3);
        assert!(agg
            .reward_trace
            .iter()
            .all(|r| *r == agg.reward_trace[0]));
    }

    #[test]
    fn joint_task_gradients_never_reach_the_aggregator() {
        let ds = tiny_synth(13);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(13);
        cfg.stage_mode = StageMode::Joint;
        cfg.stage2_epochs = 2;
        let mut init_cfg = cfg.clone();
        init_cfg.stage2_epochs = 0;
        let (agg_init, ada_init) = train_joint(&ds, &view, &init_cfg).unwrap();

        // Point every image at the exact opposite of its class's initial
        // aggregation: the clipped reward and its gradient are then zero,
        // so only the distillation + task path could move the aggregator.
        let sets = prompt_sets(&ds, &view, TaskKind::Classification).unwrap();
        let handle = AggregatorHandle::attention(&agg_init.params);
        let mut anti_rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (key, (owner, prompts)) in &sets {
            let agg = handle
                .aggregate(prompts, cfg.heads, cfg.seed, *owner)
                .unwrap();
            let row = agg.row_slice(0);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            anti_rows.insert(*key, row.iter().map(|v| -v / norm).collect());
        }
        let class_of: BTreeMap<usize, usize> = ds
            .manifest
            .images
            .iter()
            .map(|r| (r.embed_id, r.class))
            .collect();
        let rows: Vec<Vec<f64>> = (0..ds.images.count())
            .map(|id| anti_rows[&class_of[&id]].clone())
            .collect();
        let anti = Dataset {
            manifest: ds.manifest.clone(),
            images: EmbeddingBank::from_rows(&rows, BankDtype::F64).unwrap(),
            text: ds.text.clone(),
        };
        let anti_view = DatasetView::full(&anti.manifest);
        let probe = AggregatorHandle::attention(&agg_init.params);
        assert_eq!(mean_reward(&anti, &anti_view, probe, &cfg).unwrap(), 0.0);

        let (agg, ada) = train_joint(&anti, &anti_view, &cfg).unwrap();
        assert_eq!(
            agg.params.max_param_diff(&agg_init.params).unwrap(),
            0.0,
            "aggregator moved despite a dead reward"
        );
        assert!(
            ada.params.max_param_diff(&ada_init.params).unwrap() > 0.0,
            "adapter never moved"
        );
        assert!(agg.reward_trace.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn fit_matches_the_manual_stage_sequence() {
        let ds = tiny_synth(14);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(14);
        cfg.stage1_epochs = 2;
        cfg.stage2_epochs = 2;
        let (f1, f2) = fit(&ds, &view, &cfg).unwrap();
        let s1 = train_stage1(&ds, &view, &cfg).unwrap();
        let s2 = train_stage2(&ds, &view, Some(s1.handle()), &cfg).unwrap();
        assert_eq!(f1.params.max_param_diff(&s1.params).unwrap(), 0.0);
        assert_eq!(f2.params.max_param_diff(&s2.params).unwrap(), 0.0);

        cfg.stage_mode = StageMode::Joint;
        let (j1, j2) = fit(&ds, &view, &cfg).unwrap();
        let (m1, m2) = train_joint(&ds, &view, &cfg).unwrap();
        assert_eq!(j1.params.max_param_diff(&m1.params).unwrap(), 0.0);
        assert_eq!(j2.params.max_param_diff(&m2.params).unwrap(), 0.0);
    }

    #[test]
    fn joint_runs_are_deterministic() {
        let ds = tiny_synth(15);
        let view = DatasetView::full(&ds.manifest);
        let mut cfg = fast_config(15);
        cfg.stage_mode = StageMode::Joint;
        cfg.stage2_epochs = 3;
        let (a1, a2) = train_joint(&ds, &view, &cfg).unwrap();
        let (b1, b2) = train_joint(&ds, &view, &cfg).unwrap();
        assert_eq!(a1.params.max_param_diff(&b1.params).unwrap(), 0.0);
        assert_eq!(a2.params.max_param_diff(&b2.params).unwrap(), 0.0);
        assert_eq!(a1.reward_trace, b1.reward_trace);
        assert_eq!(a2.loss_trace, b2.loss_trace);
    }
}
