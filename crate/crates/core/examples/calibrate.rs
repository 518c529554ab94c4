//! Runs the four-condition grid on a synthetic dataset and prints mean AUCs
//! and mean checkpoint correlations.
//!
//! ```text
//! cargo run --release -p decorre-core --example calibrate -- [n] [epochs] [folds] [signal] [p_bias] [condition] [points] [filtered_cr]
//! ```
//!
//! `LR` and `CLIP` in the environment override the learning rate and set a
//! gradient-norm bound.

use std::time::Instant;

use decorre_core::eval::{train_run, TrainConfig, TrainingCondition};
use decorre_core::harness::{synth_generate, BiasSpec, DEFAULT_SIGNAL_STRENGTH};
use decorre_core::ArchitectureSpec;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let n: usize = arg(1, 2000);
    let epochs: usize = arg(2, 60);
    let folds: usize = arg(3, 5);
    let signal: f64 = arg(4, DEFAULT_SIGNAL_STRENGTH);
    let p_bias: f64 = arg(5, 0.9);
    let only: String = arg(6, "all".to_string());
    let points: String = arg(7, "default".to_string());
    let filtered_cr: bool = arg(8, false);
    let samples = synth_generate(n, 7, signal);
    let grid = [
        (TrainingCondition::Unbiased, false),
        (TrainingCondition::Biased, false),
        (TrainingCondition::Biased, true),
        (TrainingCondition::Unbiased, true),
    ];
    for (training, decorre) in grid {
        let mut arch = ArchitectureSpec::small_custom();
        if points != "default" {
            arch.insertion_points = points.split(',').map(|v| v.parse().expect("insertion point")).collect();
        }
        if filtered_cr {
            arch.decorre_cfg.cr_policy = decorre_core::decorre::CrPolicy::Filtered;
        }
        let mut cfg = TrainConfig::new(arch, BiasSpec::kernel_style(p_bias), training, decorre);
        cfg.epochs = epochs;
        cfg.folds = folds;
        cfg.record_every = 0;
        if let Ok(lr) = std::env::var("LR") {
            cfg.lr = lr.parse().unwrap();
        }
        if let Ok(clip) = std::env::var("CLIP") {
            cfg.grad_clip = Some(clip.parse().unwrap());
        }
        if only != "all" && only != cfg.condition_label() {
            continue;
        }
        let t = Instant::now();
        let report = train_run(&cfg, &samples).expect("training run");
        let Some(m) = report.mean else {
            println!(
                "{} no mean: {:?}",
                report.condition,
                report
                    .folds
                    .iter()
                    .map(|f| (f.diverged_epoch, f.loss_curve.len()))
                    .collect::<Vec<_>>()
            );
            continue;
        };
        let l = report.last_mean.unwrap();
        println!(
            "{:<18} full {:.3} adv {:.3} man {:.3} | last full {:.3} adv {:.3} man {:.3} | corr {:.3} | loss {:.3} | {:.1}s",
            report.condition,
            m.full,
            m.adversarial,
            m.manipulated,
            l.full,
            l.adversarial,
            l.manipulated,
            report.mean_correlation(report.checkpoint_epoch).unwrap_or(f64::NAN),
            report.folds[0].loss_curve.last().unwrap(),
            t.elapsed().as_secs_f64()
        );
        let per_layer: Vec<String> = report
            .checkpoint_records()
            .iter()
            .fold(std::collections::BTreeMap::<usize, Vec<f64>>::new(), |mut acc, r| {
                acc.entry(r.layer_id).or_default().extend(&r.correlations);
                acc
            })
            .iter()
            .map(|(l, v)| format!("L{l}:{:.3}", v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        println!("    per-layer corr {}", per_layer.join(" "));
    }
}
