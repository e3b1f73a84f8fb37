//! End-to-end pipeline: generate, poison, train, calibrate, evaluate.
//!
//! Stage seeds derive from the master seed by name ("dataset", "trigger",
//! "poison", "init", "train", "calibration-split"), so any stage reproduces
//! in isolation and sweeps can share everything but the stage under test.

use crate::analysis::{
    centroid_range, compute_centroids, layerwise_cosine, mean_profile, SimilarityProfile,
};
use crate::config::{stage_seed, RunConfig};
use crate::data::{calibration_split, gen_synthetic_dataset, select, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{attack_metrics, detection_metrics, AttackMetrics, DetectionMetrics};
use crate::firewall::{calibrate, FirewallModel};
use crate::nn::train::train;
use crate::nn::{forward_traced, ActivationTrace, Network};
use crate::poison::adaptive::train_adaptive;
use crate::poison::{make_poisoned_test_set, poison_train_set, PoisonSpec};
use rayon::prelude::*;

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Train with the adaptive objective at this penalty factor. `None`
    /// means the plain trainer (equivalent to `Some(0.0)`).
    pub beta: Option<f64>,
    /// Additionally train an identically seeded model on the clean training
    /// set for main-accuracy comparisons.
    pub with_clean_baseline: bool,
}

/// Everything a pipeline run produces.
pub struct PipelineArtifacts {
    pub config: RunConfig,
    pub poison_spec: PoisonSpec,
    pub train_set: Vec<ImageSample>,
    pub poisoned_train: Vec<ImageSample>,
    pub poison_indices: Vec<usize>,
    pub test_set: Vec<ImageSample>,
    /// Benign calibration samples (seeded per-class split of the test set).
    pub calibration: Vec<ImageSample>,
    /// Benign test samples outside the calibration split.
    pub benign_eval: Vec<ImageSample>,
    /// Triggered versions of the non-target benign evaluation samples.
    pub poisoned_eval: Vec<ImageSample>,
    pub net: Network,
    pub loss_history: Vec<f64>,
    pub clean_net: Option<Network>,
    pub clean_attack: Option<AttackMetrics>,
    pub firewall: FirewallModel,
    pub attack: AttackMetrics,
    pub detection: DetectionMetrics,
}

pub fn run_pipeline(cfg: &RunConfig, opts: &PipelineOptions) -> Result<PipelineArtifacts> {
    cfg.validate()?;
    let master = cfg.master_seed;

    let mut dataset_cfg = cfg.dataset.clone();
    dataset_cfg.seed = stage_seed(master, "dataset");
    let (train_set, test_set) = gen_synthetic_dataset(&dataset_cfg)?;

    let poison_spec = PoisonSpec {
        trigger: cfg
            .poison
            .trigger
            .materialize(&dataset_cfg.image_shape(), stage_seed(master, "trigger")),
        target_class: cfg.poison.target_class,
        poison_rate: cfg.poison.poison_rate,
        seed: stage_seed(master, "poison"),
    };
    poison_spec.validate(dataset_cfg.num_classes)?;
    let (poisoned_train, poison_indices) = poison_train_set(&train_set, &poison_spec)?;

    let net0 = cfg.arch.build(
        &dataset_cfg.image_shape(),
        dataset_cfg.num_classes,
        stage_seed(master, "init"),
    )?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = stage_seed(master, "train");

    let (net, loss_history) = match opts.beta {
        Some(beta) => train_adaptive(
            &net0,
            &poisoned_train,
            &poison_indices,
            poison_spec.target_class,
            beta,
            &train_cfg,
        )?,
        None => train(&net0, &poisoned_train, &train_cfg)?,
    };

    let clean_net = if opts.with_clean_baseline {
        Some(train(&net0, &train_set, &train_cfg)?.0)
    } else {
        None
    };

    let split = calibration_split(
        &test_set,
        cfg.defense.calib_fraction,
        cfg.defense.calib_min_per_class,
        stage_seed(master, "calibration-split"),
    )?;
    debug_assert!(split
        .calibration
        .iter()
        .all(|i| !split.evaluation.contains(i)));
    let calibration = select(&test_set, &split.calibration);
    let benign_eval = select(&test_set, &split.evaluation);
    let poisoned_eval = make_poisoned_test_set(&benign_eval, &poison_spec)?;

    let firewall = calibrate(&net, &calibration, cfg.defense.tau, cfg.defense.metric)?;
    let attack = attack_metrics(&net, &benign_eval, &poisoned_eval, poison_spec.target_class)?;
    let detection = detection_metrics(&net, &firewall, &benign_eval, &poisoned_eval)?;
    let clean_attack = clean_net
        .as_ref()
        .map(|cn| attack_metrics(cn, &benign_eval, &poisoned_eval, poison_spec.target_class))
        .transpose()?;

    Ok(PipelineArtifacts {
        config: cfg.clone(),
        poison_spec,
        train_set,
        poisoned_train,
        poison_indices,
        test_set,
        calibration,
        benign_eval,
        poisoned_eval,
        net,
        loss_history,
        clean_net,
        clean_attack,
        firewall,
        attack,
        detection,
    })
}

fn traces_for(net: &Network, samples: &[&ImageSample]) -> Result<Vec<ActivationTrace>> {
    samples
        .par_iter()
        .map(|s| forward_traced(net, &s.pixels).map(|(_, t)| t))
        .collect()
}

/// Mean similarity profiles of the target class: benign calibration samples
/// versus poisoned evaluation samples that the model classifies into the
/// target class, both against the benign centroids.
pub fn target_class_profiles(
    arts: &PipelineArtifacts,
) -> Result<(SimilarityProfile, SimilarityProfile)> {
    let target = arts.poison_spec.target_class;
    let net = &arts.net;
    let benign: Vec<&ImageSample> = arts
        .calibration
        .iter()
        .filter(|s| s.label == target)
        .collect();
    if benign.is_empty() {
        return Err(Error::NoBenignTargetSamples { class: target });
    }
    let range = centroid_range(net.tap_count());
    let benign_traces = traces_for(net, &benign)?;
    let cents = compute_centroids(&benign_traces, target, range)?;
    let benign_records = benign_traces
        .iter()
        .map(|t| layerwise_cosine(t, &cents))
        .collect::<Result<Vec<_>>>()?;
    let benign_profile = mean_profile(&benign_records, target)?;

    let hits: Vec<&ImageSample> = arts
        .poisoned_eval
        .par_iter()
        .map(|s| {
            forward_traced(net, &s.pixels).map(|(p, _)| (p.predicted_class == target).then_some(s))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if hits.is_empty() {
        return Err(Error::EmptyInput(
            "no poisoned samples classified into the target class",
        ));
    }
    let hit_traces = traces_for(net, &hits)?;
    let poisoned_records = hit_traces
        .iter()
        .map(|t| layerwise_cosine(t, &cents))
        .collect::<Result<Vec<_>>>()?;
    let poisoned_profile = mean_profile(&poisoned_records, target)?;
    Ok((benign_profile, poisoned_profile))
}
