//! Temporary benchmark probe; not part of the deliverable.

use std::time::Instant;

use aape_core::aggregate::AggregatorKind;
use aape_core::config::TrainConfig;
use aape_core::embedio::{base_new_split, generate, Fold, SynthConfig};
use aape_core::evalkit::harmonic_mean;
use aape_core::train::{
    evaluate_view_accuracy, train_stage1, train_stage1_with_kind, train_stage2,
};

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let t0 = Instant::now();
    let ds = generate(&SynthConfig::with_seed(0)).unwrap().dataset;
    let (base, new) = base_new_split(&ds.manifest).unwrap();
    let mode = std::env::var("P_MODE").unwrap_or_else(|_| "gap".into());
    let seeds = envf("P_SEEDS", 3.0) as u64;

    match mode.as_str() {
        "lambda" => {
            for seed in 0..seeds {
                let mut cfg = TrainConfig::with_seed(seed);
                cfg.lr = envf("P_LR", cfg.lr);
                cfg.stage2_epochs = envf("P_EPOCHS", cfg.stage2_epochs as f64) as usize;
                let s1 = train_stage1(&ds, &base, &cfg).unwrap();
                let mut hs = Vec::new();
                for lambda in [1.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0] {
                    let mut c = cfg.clone();
                    c.lambda = lambda;
                    let s2 = train_stage2(&ds, &base, Some(s1.handle()), &c).unwrap();
                    let b = evaluate_view_accuracy(&ds, &base, &s2.params, c.tau, Fold::Test)
                        .unwrap();
                    let n =
                        evaluate_view_accuracy(&ds, &new, &s2.params, c.tau, Fold::Test).unwrap();
                    hs.push((lambda, harmonic_mean(b, n).unwrap()));
                }
                let h1 = hs[0].1;
                let h5 = hs.iter().find(|(l, _)| *l == 5.0).unwrap().1;
                let grid: Vec<f64> = hs.iter().skip(1).map(|(_, h)| *h).collect();
                let spread = grid.iter().cloned().fold(f64::MIN, f64::max)
                    - grid.iter().cloned().fold(f64::MAX, f64::min);
                println!(
                    "seed {seed}: {:?} | H1 {h1:.2} H5 {h5:.2} drop {:.2} spread {:.2} ok {}",
                    hs.iter().map(|(l, h)| format!("{l}:{h:.1}")).collect::<Vec<_>>(),
                    h5 - h1,
                    spread,
                    h5 >= h1 && spread <= h5 - h1
                );
            }
        }
        "ablate" => {
            for seed in 0..seeds {
                let mut cfg = TrainConfig::with_seed(seed);
                cfg.lr = envf("P_LR", cfg.lr);
                let mut row = Vec::new();
                for kind in [
                    AggregatorKind::Random,
                    AggregatorKind::Mean,
                    AggregatorKind::Mlp,
                    AggregatorKind::Attention,
                ] {
                    let s1 = train_stage1_with_kind(&ds, &base, kind, &cfg).unwrap();
                    let s2 = train_stage2(&ds, &base, Some(s1.handle()), &cfg).unwrap();
                    let b = evaluate_view_accuracy(&ds, &base, &s2.params, cfg.tau, Fold::Test)
                        .unwrap();
                    let n = evaluate_view_accuracy(&ds, &new, &s2.params, cfg.tau, Fold::Test)
                        .unwrap();
                    row.push((kind, harmonic_mean(b, n).unwrap()));
                }
                println!(
                    "seed {seed}: {}",
                    row.iter()
                        .map(|(k, h)| format!("{:?} {h:.2}", k))
                        .collect::<Vec<_>>()
                        .join(" | ")
                );
            }
        }
        "noise" => {
            for seed in 0..seeds {
                let mut cfg = TrainConfig::with_seed(seed);
                cfg.lr = envf("P_LR", cfg.lr);
                cfg.stage1_epochs = envf("P_EPOCHS1", cfg.stage1_epochs as f64) as usize;
                let s1 = train_stage1(&ds, &base, &cfg).unwrap();
                print!(
                    "  reward {:.3}->{:.3} | ",
                    s1.reward_trace[0],
                    s1.reward_trace.last().unwrap()
                );
                let jsonl = aape_core::aggregate::export_attention_scores(
                    &ds,
                    &base,
                    &s1.params,
                    cfg.heads,
                    cfg.task,
                )
                .unwrap();
                let mut sums = std::collections::BTreeMap::new();
                for line in jsonl.lines() {
                    let v: serde_json::Value = serde_json::from_str(line).unwrap();
                    let tag = v["noise_tag"].as_str().unwrap().to_string();
                    let s = v["score"].as_f64().unwrap();
                    let e = sums.entry(tag).or_insert((0.0, 0usize));
                    e.0 += s;
                    e.1 += 1;
                }
                let mean = |t: &str| {
                    let (s, n) = sums[t];
                    s / n as f64
                };
                println!(
                    "seed {seed}: rel {:.5} red {:.5} irr {:.5} ratio {:.3}",
                    mean("relevant"),
                    mean("redundant"),
                    mean("irrelevant"),
                    mean("irrelevant") / mean("relevant")
                );
            }
        }
        _ => {
            let lr = envf("P_LR", 2e-3);
            let epochs = envf("P_EPOCHS", 100.0) as usize;
            let mut gaps = Vec::new();
            for seed in 0..seeds {
                let mut cfg = TrainConfig::with_seed(seed);
                cfg.lr = lr;
                cfg.stage2_epochs = epochs;
                let s1 = train_stage1(&ds, &base, &cfg).unwrap();
                let s2 = train_stage2(&ds, &base, Some(s1.handle()), &cfg).unwrap();
                let b5 =
                    evaluate_view_accuracy(&ds, &base, &s2.params, cfg.tau, Fold::Test).unwrap();
                let n5 =
                    evaluate_view_accuracy(&ds, &new, &s2.params, cfg.tau, Fold::Test).unwrap();
                cfg.lambda = 0.0;
                let s2z = train_stage2(&ds, &base, None, &cfg).unwrap();
                let b0 =
                    evaluate_view_accuracy(&ds, &base, &s2z.params, cfg.tau, Fold::Test).unwrap();
                let n0 =
                    evaluate_view_accuracy(&ds, &new, &s2z.params, cfg.tau, Fold::Test).unwrap();
                println!(
                    "  seed {seed}: l5 {b5:.2}/{n5:.2} l0 {b0:.2}/{n0:.2} gap {:.2}",
                    n5 - n0
                );
                gaps.push(n5 - n0);
            }
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            println!("mean gap {mean:.2}  ({:?})", t0.elapsed());
        }
    }
    println!("total: {:?}", t0.elapsed());
}
