//! Scratch diagnostics for preset tuning. Run with --nocapture.
//! Env overrides: P_EPOCHS, P_LR, P_WD, P_NOISE, P_CH (comma channels),
//! P_HIDDEN, P_SEED, P_DECAY (comma epochs), P_BLENDED=1.

use layerguard::config::{ConvBlock, RunConfig, TriggerConfig};
use layerguard::eval::pipeline::{run_pipeline, target_class_profiles, PipelineOptions};
use std::time::Instant;

fn env_f64(key: &str) -> Option<f64> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn env_usize(key: &str) -> Option<usize> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn apply_env(cfg: &mut RunConfig) {
    if let Some(v) = env_usize("P_EPOCHS") {
        cfg.train.epochs = v;
    }
    if let Some(v) = env_f64("P_LR") {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = env_f64("P_WD") {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = env_f64("P_NOISE") {
        cfg.dataset.noise_level = v;
    }
    if let Some(v) = env_usize("P_SEED") {
        cfg.master_seed = v as u64;
    }
    if let Ok(v) = std::env::var("P_DECAY") {
        cfg.train.lr_decay_epochs = v.split(',').filter_map(|s| s.parse().ok()).collect();
    }
    if let Ok(v) = std::env::var("P_CH") {
        let ch: Vec<usize> = v.split(',').filter_map(|s| s.parse().ok()).collect();
        cfg.arch.conv_blocks = ch
            .iter()
            .enumerate()
            .map(|(i, &channels)| ConvBlock {
                channels,
                pool: i % 2 == 1,
            })
            .collect();
    }
    if let Some(v) = env_usize("P_HIDDEN") {
        cfg.arch.hidden = vec![v];
    }
    if std::env::var("P_BLENDED").is_ok() {
        cfg.poison.trigger = TriggerConfig::Blended { blend_ratio: 0.1 };
    }
}

#[test]
#[ignore]
fn probe_clean_training() {
    use layerguard::config::stage_seed;
    let mut cfg = RunConfig::desk_default();
    apply_env(&mut cfg);
    let mut ds = cfg.dataset.clone();
    ds.seed = stage_seed(cfg.master_seed, "dataset");
    let (train_set, test_set) = layerguard::gen_synthetic_dataset(&ds).unwrap();
    let net0 = cfg
        .arch
        .build(&ds.image_shape(), ds.num_classes, stage_seed(cfg.master_seed, "init"))
        .unwrap();
    let mut tc = cfg.train.clone();
    tc.seed = stage_seed(cfg.master_seed, "train");
    let (net, hist) = layerguard::train(&net0, &train_set, &tc).unwrap();
    let correct = test_set
        .iter()
        .filter(|s| layerguard::forward(&net, &s.pixels).unwrap().predicted_class == s.label)
        .count();
    println!("clean loss history: {hist:?}");
    println!("clean test acc {:.2}", 100.0 * correct as f64 / test_set.len() as f64);
}

#[test]
#[ignore]
fn probe_desk_small() {
    let mut cfg = RunConfig::desk_small();
    apply_env(&mut cfg);
    probe(cfg, "desk_small");
}

#[test]
#[ignore]
fn probe_desk_default() {
    let mut cfg = RunConfig::desk_default();
    apply_env(&mut cfg);
    probe(cfg, "desk_default");
}

fn probe(cfg: RunConfig, name: &str) {
    let t0 = Instant::now();
    let arts = run_pipeline(
        &cfg,
        &PipelineOptions {
            beta: None,
            with_clean_baseline: true,
        },
    )
    .unwrap();
    println!("=== {name} ({:.1}s) ===", t0.elapsed().as_secs_f64());
    println!("loss history: {:?}", &arts.loss_history);
    println!(
        "clean MA {:.2}  poisoned MA {:.2}  ASR {:.2}",
        arts.clean_attack.unwrap().ma,
        arts.attack.ma,
        arts.attack.asr
    );
    println!(
        "TPR {:.2}  FPR {:.2}  ({} of {} poisoned, {} of {} benign)",
        arts.detection.tpr,
        arts.detection.fpr,
        arts.detection.true_positives,
        arts.detection.total_poisoned,
        arts.detection.false_positives,
        arts.detection.total_benign
    );
    let eval_scores =
        layerguard::score_batch(&arts.net, &arts.firewall, &arts.benign_eval).unwrap();
    for cal in &arts.firewall.calibrations {
        let class_scores: Vec<f64> = eval_scores
            .iter()
            .filter(|(c, _)| *c == cal.class)
            .map(|(_, s)| *s)
            .collect();
        let n = class_scores.len() as f64;
        let mean = class_scores.iter().sum::<f64>() / n.max(1.0);
        let std = (class_scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n.max(1.0))
            .sqrt();
        let min = class_scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let thr = cal.threshold(arts.firewall.metric, arts.firewall.tau);
        let below = class_scores.iter().filter(|&&s| s < thr).count();
        println!(
            "class {} LOI {} window {:?} mu {:.4} sigma {:.5} | eval n={} mean {:.4} std {:.5} min {:.4} flagged {}",
            cal.class, cal.loi, cal.window, cal.mu, cal.sigma, class_scores.len(), mean, std, min, below
        );
    }
    match target_class_profiles(&arts) {
        Ok((benign, poisoned)) => {
            println!("layer  benign  poisoned  diff");
            for l in benign.range.iter() {
                println!(
                    "{l}      {:.4}  {:.4}   {:.4}",
                    benign.at(l),
                    poisoned.at(l),
                    benign.at(l) - poisoned.at(l)
                );
            }
        }
        Err(e) => println!("profiles unavailable: {e}"),
    }
    let rows = layerguard::eval::per_layer_detection(
        &arts.net,
        &arts.calibration,
        &arts.benign_eval,
        &arts.poisoned_eval,
        cfg.defense.tau,
        cfg.defense.metric,
    )
    .unwrap();
    for row in &rows {
        println!("single-layer {}: TPR {:.2} FPR {:.2}", row.label, row.tpr, row.fpr);
    }
}
