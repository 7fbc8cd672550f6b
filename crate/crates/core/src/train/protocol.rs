//! Experiment protocols over three fixed seeds: base-to-new transfer,
//! k-shot sweeps, the distillation-weight grid, the aggregator ablation and
//! caption retrieval. Each (seed, grid-cell) unit can persist its metrics,
//! so interrupted sweeps resume to byte-identical reports.

use std::collections::BTreeMap;
use std::path::Path;

use crate::aggregate::AggregatorKind;
use crate::config::{TaskKind, TrainConfig};
use crate::embedio::{base_new_split, kshot_sample, Dataset, DatasetView, Fold};
use crate::error::{Error, Result};
use crate::evalkit::{harmonic_mean, MetricReport};
use crate::train::stages::{
    evaluate_retrieval, evaluate_view_accuracy, fit, train_stage1_with_kind, train_stage2,
    Stage1Output,
};

/// Seeds every protocol averages over.
pub const PROTOCOL_SEEDS: [u64; 3] = [0, 1, 2];

/// Shots-per-class grid of the k-shot protocol.
pub const KSHOT_GRID: [usize; 5] = [1, 2, 4, 8, 16];

/// Distillation-weight grid of the lambda sweep.
pub const LAMBDA_GRID: [f64; 7] = [1.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0];

/// Recall cutoffs reported by the retrieval protocol.
pub const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];

/// The named experiment protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Base2New,
    Kshot,
    LambdaSweep,
    AggregatorAblation,
    Retrieval,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::Base2New,
        Protocol::Kshot,
        Protocol::LambdaSweep,
        Protocol::AggregatorAblation,
        Protocol::Retrieval,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::Base2New => "base2new",
            Protocol::Kshot => "kshot",
            Protocol::LambdaSweep => "lambda_sweep",
            Protocol::AggregatorAblation => "aggregator_ablation",
            Protocol::Retrieval => "retrieval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol '{s}'")))
    }

    fn required_task(self) -> TaskKind {
        match self {
            Protocol::Retrieval => TaskKind::Retrieval,
            _ => TaskKind::Classification,
        }
    }

    fn variants(self) -> Vec<Variant> {
        match self {
            Protocol::Base2New | Protocol::Retrieval => vec![Variant::Main],
            Protocol::Kshot => KSHOT_GRID.iter().map(|k| Variant::K(*k)).collect(),
            Protocol::LambdaSweep => LAMBDA_GRID.iter().map(|l| Variant::Lambda(*l)).collect(),
            Protocol::AggregatorAblation => AggregatorKind::ALL
                .iter()
                .map(|k| Variant::Kind(*k))
                .collect(),
        }
    }
}

/// One grid cell of a protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Variant {
    Main,
    K(usize),
    Lambda(f64),
    Kind(AggregatorKind),
}

impl Variant {
    fn label(&self) -> String {
        match self {
            Variant::Main => "main".into(),
            Variant::K(k) => format!("k{k}"),
            Variant::Lambda(l) => format!("lambda{l}"),
            Variant::Kind(k) => k.label().into(),
        }
    }
}

fn base2new_metrics(
    dataset: &Dataset,
    base: &DatasetView,
    new: &DatasetView,
    adapter: &crate::diffcore::ParamStore,
    tau: f64,
) -> Result<(f64, f64, f64)> {
    let base_acc = evaluate_view_accuracy(dataset, base, adapter, tau, Fold::Test)?;
    let new_acc = evaluate_view_accuracy(dataset, new, adapter, tau, Fold::Test)?;
    let h = harmonic_mean(base_acc, new_acc)?;
    Ok((base_acc, new_acc, h))
}

fn run_unit(
    dataset: &Dataset,
    protocol: Protocol,
    config: &TrainConfig,
    seed: u64,
    variant: Variant,
    stage1_cache: &mut BTreeMap<u64, Stage1Output>,
) -> Result<Vec<(String, f64)>> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    match (protocol, variant) {
        (Protocol::Base2New, Variant::Main) => {
            let (base, new) = base_new_split(&dataset.manifest)?;
            let (_, s2) = fit(dataset, &base, &cfg)?;
            let (base_acc, new_acc, h) = base2new_metrics(dataset, &base, &new, &s2.params, cfg.tau)?;
            Ok(vec![
                ("base_acc".into(), base_acc),
                ("new_acc".into(), new_acc),
                ("H".into(), h),
            ])
        }
        (Protocol::Kshot, Variant::K(k)) => {
            let sampled = Dataset {
                manifest: kshot_sample(&dataset.manifest, k, seed)?,
                images: dataset.images.clone(),
                text: dataset.text.clone(),
            };
            let view = DatasetView::full(&sampled.manifest);
            let (_, s2) = fit(&sampled, &view, &cfg)?;
            let acc = evaluate_view_accuracy(&sampled, &view, &s2.params, cfg.tau, Fold::Test)?;
            Ok(vec![(format!("acc_{k}shot"), acc)])
        }
        (Protocol::LambdaSweep, Variant::Lambda(lambda)) => {
            // The sweep varies a stage-2-only knob, so stage 1 is trained
            // once per seed and shared across the whole grid.
            let (base, new) = base_new_split(&dataset.manifest)?;
            if !stage1_cache.contains_key(&seed) {
                stage1_cache.insert(seed, train_stage1_with_kind(
                    dataset,
                    &base,
                    AggregatorKind::Attention,
                    &cfg,
                )?);
            }
            let s1 = &stage1_cache[&seed];
            cfg.lambda = lambda;
            let s2 = train_stage2(dataset, &base, Some(s1.handle()), &cfg)?;
            let (_, _, h) = base2new_metrics(dataset, &base, &new, &s2.params, cfg.tau)?;
            Ok(vec![(format!("H_lambda_{lambda}"), h)])
        }
        (Protocol::AggregatorAblation, Variant::Kind(kind)) => {
            let (base, new) = base_new_split(&dataset.manifest)?;
            let s1 = train_stage1_with_kind(dataset, &base, kind, &cfg)?;
            let s2 = train_stage2(dataset, &base, Some(s1.handle()), &cfg)?;
            let (_, _, h) = base2new_metrics(dataset, &base, &new, &s2.params, cfg.tau)?;
            Ok(vec![(format!("H_{}", kind.label()), h)])
        }
        (Protocol::Retrieval, Variant::Main) => {
            let view = DatasetView::full(&dataset.manifest);
            let (_, s2) = fit(dataset, &view, &cfg)?;
            let recalls = evaluate_retrieval(dataset, &view, &s2.params, &RETRIEVAL_KS, Fold::Test)?;
            Ok(RETRIEVAL_KS
                .iter()
                .zip(recalls)
                .map(|(k, r)| (format!("r_at_{k}"), r))
                .collect())
        }
        _ => Err(Error::Config(format!(
            "variant {:?} does not belong to protocol {}",
            variant,
            protocol.label()
        ))),
    }
}

/// Runs the protocol over the three fixed seeds and assembles per-seed,
/// mean and standard-deviation rows.
pub fn run_protocol(
    dataset: &Dataset,
    protocol: Protocol,
    config: &TrainConfig,
) -> Result<MetricReport> {
    Ok(run_protocol_resumable(dataset, protocol, config, None, None)?
        .expect("unbudgeted run always completes"))
}

/// Resumable variant: with a state directory every finished (seed, cell)
/// unit persists its metrics and is skipped on re-entry; `unit_budget`
/// caps how many units this call may execute. Returns `None` when the
/// budget ran out before the sweep finished.
pub fn run_protocol_resumable(
    dataset: &Dataset,
    protocol: Protocol,
    config: &TrainConfig,
    state_dir: Option<&Path>,
    unit_budget: Option<usize>,
) -> Result<Option<MetricReport>> {
    config.validate()?;
    if config.task != protocol.required_task() {
        return Err(Error::Config(format!(
            "protocol '{}' requires task '{}' but the config says '{}'",
            protocol.label(),
            task_label(protocol.required_task()),
            task_label(config.task)
        )));
    }
    let variants = protocol.variants();
    let mut metric_order: Vec<String> = Vec::new();
    let mut per_seed: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); PROTOCOL_SEEDS.len()];
    let mut stage1_cache: BTreeMap<u64, Stage1Output> = BTreeMap::new();
    let mut executed = 0usize;
    for (si, seed) in PROTOCOL_SEEDS.iter().enumerate() {
        for variant in &variants {
            let unit_file = state_dir.map(|d| {
                d.join(format!(
                    "{}_seed{}_{}.json",
                    protocol.label(),
                    seed,
                    variant.label()
                ))
            });
            let done = unit_file.as_ref().map(|f| f.exists()).unwrap_or(false);
            let metrics: Vec<(String, f64)> = if done {
                let text = std::fs::read_to_string(unit_file.as_ref().expect("path exists"))
                    .map_err(Error::Io)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("sweep state parse failed: {e}")))?
            } else {
                if let Some(budget) = unit_budget {
                    if executed >= budget {
                        return Ok(None);
                    }
                }
                let metrics =
                    run_unit(dataset, protocol, config, *seed, *variant, &mut stage1_cache)?;
                executed += 1;
                if let Some(f) = &unit_file {
                    let body = serde_json::to_string(&metrics)
                        .map_err(|e| Error::Format(format!("sweep state encode failed: {e}")))?;
                    std::fs::write(f, body).map_err(Error::Io)?;
                }
                metrics
            };
            for (name, value) in metrics {
                if !metric_order.contains(&name) {
                    metric_order.push(name.clone());
                }
                per_seed[si].insert(name, value);
            }
        }
    }
    let mut report = MetricReport::new(protocol.label(), &config.digest(), &PROTOCOL_SEEDS);
    for metric in &metric_order {
        let values: Vec<f64> = per_seed
            .iter()
            .enumerate()
            .map(|(si, m)| {
                m.get(metric).copied().ok_or_else(|| {
                    Error::Data(format!(
                        "metric '{metric}' missing for seed {}",
                        PROTOCOL_SEEDS[si]
                    ))
                })
            })
            .collect::<Result<_>>()?;
        report.push_row(metric, values)?;
    }
    Ok(Some(report))
}

fn task_label(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "classification",
        TaskKind::Retrieval => "retrieval",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedio::{generate, SynthConfig};

    fn proto_synth(images_per_class: usize) -> Dataset {
        let mut cfg = SynthConfig::with_seed(77);
        cfg.classes = 4;
        cfg.dim = 16;
        cfg.images_per_class = images_per_class;
        cfg.prompts_per_class = 6;
        cfg.captions_per_image = 2;
        generate(&cfg).unwrap().dataset
    }

    fn proto_config() -> TrainConfig {
        let mut c = TrainConfig::with_seed(0);
        c.stage1_epochs = 4;
        c.stage2_epochs = 10;
        c.batch_size = 8;
        c.lr = 0.02;
        c
    }

    #[test]
    fn protocol_labels_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(Protocol::parse(p.label()).unwrap(), p);
        }
        assert!(matches!(Protocol::parse("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn base2new_report_is_shaped_and_h_is_consistent() {
        let ds = proto_synth(8);
        let cfg = proto_config();
        let report = run_protocol(&ds, Protocol::Base2New, &cfg).unwrap();
        assert_eq!(report.protocol, "base2new");
        assert_eq!(report.config_digest, cfg.digest());
        assert_eq!(report.seeds, PROTOCOL_SEEDS.to_vec());
        let names: Vec<&str> = report.rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(names, ["base_acc", "new_acc", "H"]);
        let base = report.row("base_acc").unwrap();
        let new = report.row("new_acc").unwrap();
        let h = report.row("H").unwrap();
        for i in 0..PROTOCOL_SEEDS.len() {
            let expect = harmonic_mean(base.per_seed[i], new.per_seed[i]).unwrap();
            assert!((h.per_seed[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn kshot_rows_follow_the_grid() {
        let ds = proto_synth(32);
        let mut cfg = proto_config();
        cfg.stage1_epochs = 2;
        cfg.stage2_epochs = 4;
        let report = run_protocol(&ds, Protocol::Kshot, &cfg).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(
            names,
            ["acc_1shot", "acc_2shot", "acc_4shot", "acc_8shot", "acc_16shot"]
        );
        for row in &report.rows {
            for v in &row.per_seed {
                assert!((0.0..=100.0).contains(v), "{}: {v}", row.metric);
            }
        }
    }

    #[test]
    fn lambda_sweep_shares_stage1_and_names_rows_by_weight() {
        let ds = proto_synth(8);
        let mut cfg = proto_config();
        cfg.stage2_epochs = 4;
        let report = run_protocol(&ds, Protocol::LambdaSweep, &cfg).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(
            names,
            [
                "H_lambda_1",
                "H_lambda_3",
                "H_lambda_4",
                "H_lambda_5",
                "H_lambda_6",
                "H_lambda_7",
                "H_lambda_9"
            ]
        );

        // One grid cell recomputed by hand: stage 1 runs once per seed on
        // the base view and is shared across the lambda grid.
        let (base, new) = base_new_split(&ds.manifest).unwrap();
        let mut unit_cfg = cfg.clone();
        unit_cfg.seed = PROTOCOL_SEEDS[0];
        let s1 =
            train_stage1_with_kind(&ds, &base, AggregatorKind::Attention, &unit_cfg).unwrap();
        unit_cfg.lambda = 3.0;
        let s2 = train_stage2(&ds, &base, Some(s1.handle()), &unit_cfg).unwrap();
        let base_acc =
            evaluate_view_accuracy(&ds, &base, &s2.params, unit_cfg.tau, Fold::Test).unwrap();
        let new_acc =
            evaluate_view_accuracy(&ds, &new, &s2.params, unit_cfg.tau, Fold::Test).unwrap();
        let expect = harmonic_mean(base_acc, new_acc).unwrap();
        let got = report.row("H_lambda_3").unwrap().per_seed[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn ablation_rows_follow_strategy_order() {
        let ds = proto_synth(8);
        let cfg = proto_config();
        let report = run_protocol(&ds, Protocol::AggregatorAblation, &cfg).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(names, ["H_random", "H_mean", "H_mlp", "H_attention"]);
    }

    #[test]
    fn retrieval_report_rows_are_monotone() {
        let ds = proto_synth(8);
        let mut cfg = proto_config();
        cfg.task = TaskKind::Retrieval;
        cfg.stage2_epochs = 6;
        let report = run_protocol(&ds, Protocol::Retrieval, &cfg).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(names, ["r_at_1", "r_at_5", "r_at_10"]);
        for i in 0..PROTOCOL_SEEDS.len() {
            let r1 = report.rows[0].per_seed[i];
            let r5 = report.rows[1].per_seed[i];
            let r10 = report.rows[2].per_seed[i];
            assert!(r1 <= r5 && r5 <= r10, "({r1}, {r5}, {r10})");
        }
    }

    #[test]
    fn protocols_reject_a_mismatched_task() {
        let ds = proto_synth(8);
        let mut cfg = proto_config();
        let err = run_protocol(&ds, Protocol::Retrieval, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        cfg.task = TaskKind::Retrieval;
        for p in [Protocol::Base2New, Protocol::Kshot, Protocol::LambdaSweep] {
            let err = run_protocol(&ds, p, &cfg).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{p:?}: {err:?}");
        }
    }

    #[test]
    fn interrupted_sweeps_resume_to_identical_reports() {
        let ds = proto_synth(8);
        let cfg = proto_config();
        let full = run_protocol(&ds, Protocol::Base2New, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut resumed = None;
        let mut calls = 0;
        while resumed.is_none() {
            resumed =
                run_protocol_resumable(&ds, Protocol::Base2New, &cfg, Some(dir.path()), Some(1))
                    .unwrap();
            calls += 1;
            assert!(calls < 20, "budgeted sweep never finished");
        }
        assert_eq!(calls, PROTOCOL_SEEDS.len());
        assert_eq!(resumed.unwrap().to_json(), full.to_json());

        let files: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(files.len(), PROTOCOL_SEEDS.len());
        for seed in PROTOCOL_SEEDS {
            assert!(files.contains(&format!("base2new_seed{seed}_main.json")));
        }

        // A corrupted unit file surfaces as a format error on re-entry.
        std::fs::write(dir.path().join("base2new_seed1_main.json"), b"not json").unwrap();
        let err = run_protocol_resumable(&ds, Protocol::Base2New, &cfg, Some(dir.path()), None)
            .unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn repeated_runs_serialize_identically() {
        let ds = proto_synth(8);
        let cfg = proto_config();
        let a = run_protocol(&ds, Protocol::Base2New, &cfg).unwrap();
        let b = run_protocol(&ds, Protocol::Base2New, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_text_table(), b.to_text_table());
    }
}
