//! Adaptive attacker training.
//!
//! Trains with the combined objective `(1-beta)*L_org + beta*L_cd`, where
//! `L_org` is the usual cross-entropy and `L_cd` is the mean cosine distance
//! `1 - cos(a_i^l, c_t^l)` between poisoned-sample features and the benign
//! target-class centroids, averaged over the poisoned samples of the batch
//! and the upper half of the tap layers. Centroids are recomputed from the
//! benign target-class training samples at the start of every epoch.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::train::{check_labels, SgdState, TrainConfig};
use crate::nn::{backward_flat, cross_entropy, forward_cache, Network};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// `(1-beta)*l_org + beta*l_cd`.
pub fn combined_loss(beta: f64, l_org: f64, l_cd: f64) -> f64 {
    (1.0 - beta) * l_org + beta * l_cd
}

/// Gradient of `1 - cos(a, c)` with respect to `a`, computed in double
/// precision. Zero when either vector has zero norm (the cosine convention
/// treats that case as a constant).
fn cosine_distance_grad(tap: &[f32], centroid: &[f64], coeff: f64) -> Option<(f64, Vec<f32>)> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nc = 0.0f64;
    for (&a, &c) in tap.iter().zip(centroid) {
        let a = a as f64;
        dot += a * c;
        na += a * a;
        nc += c * c;
    }
    if na == 0.0 || nc == 0.0 {
        return None;
    }
    let (na, nc) = (na.sqrt(), nc.sqrt());
    let cos = dot / (na * nc);
    let grad = tap
        .iter()
        .zip(centroid)
        .map(|(&a, &c)| {
            let g = -c / (na * nc) + dot * a as f64 / (na * na * na * nc);
            (g * coeff) as f32
        })
        .collect();
    Some((1.0 - cos, grad))
}

/// Mean tap vectors of the benign target-class samples over the penalty
/// layers, recomputed against the current weights.
fn epoch_centroids(
    net: &Network,
    train_set: &[ImageSample],
    benign_target: &[usize],
    penalty_taps: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let traces: Vec<_> = benign_target
        .par_iter()
        .map(|&i| crate::nn::forward_traced(net, &train_set[i].pixels).map(|(_, t)| t))
        .collect::<Result<_>>()?;
    let m = traces.len() as f64;
    let mut centroids = Vec::with_capacity(penalty_taps.len());
    for &layer in penalty_taps {
        let width = traces[0].tap(layer).len();
        let mut acc = vec![0.0f64; width];
        for t in &traces {
            for (a, &v) in acc.iter_mut().zip(t.tap(layer)) {
                *a += v as f64;
            }
        }
        for a in &mut acc {
            *a /= m;
        }
        centroids.push(acc);
    }
    Ok(centroids)
}

/// Adaptive variant of [`crate::nn::train::train`]. With `beta == 0` it is
/// the plain trainer, bit for bit.
pub fn train_adaptive(
    net: &Network,
    train_set: &[ImageSample],
    poison_indices: &[usize],
    target_class: usize,
    beta: f64,
    config: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta {beta} must be in [0,1]")));
    }
    if beta == 0.0 {
        return crate::nn::train::train(net, train_set, config);
    }
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(train_set, net.num_classes())?;

    let mut is_poisoned = vec![false; train_set.len()];
    for &i in poison_indices {
        is_poisoned[i] = true;
    }
    let benign_target: Vec<usize> = (0..train_set.len())
        .filter(|&i| train_set[i].label == target_class && !is_poisoned[i])
        .collect();
    if benign_target.is_empty() {
        return Err(Error::NoBenignTargetSamples {
            class: target_class,
        });
    }
    // Penalty layers: taps in the upper half, the region the detector reads.
    let tap_count = net.tap_count();
    let penalty_taps: Vec<usize> = (tap_count / 2..=tap_count).collect();

    let mut net = net.clone();
    let mut params = net.flatten_params();
    let mut state = SgdState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let poisoned_total = poison_indices.len().max(1) as f64;

    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        let lr = config.effective_lr(epoch);
        net.assign_params(&params);
        let centroids = epoch_centroids(&net, train_set, &benign_target, &penalty_taps)?;
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0f64;
        let mut cd_sum = 0.0f64;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            net.assign_params(&params);
            let batch_poisoned = batch.iter().filter(|&&i| is_poisoned[i]).count();
            let ce_scale = (1.0 - beta) / batch.len() as f64;
            let cd_scale = if batch_poisoned > 0 {
                beta / (batch_poisoned as f64 * penalty_taps.len() as f64)
            } else {
                0.0
            };
            let results: Vec<(f64, f64, Vec<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let sample = &train_set[i];
                    let cache = forward_cache(&net, &sample.pixels)?;
                    let (ce_loss, mut d_logits) =
                        cross_entropy(cache.last().unwrap().data(), sample.label);
                    for g in &mut d_logits {
                        *g *= ce_scale as f32;
                    }
                    let mut cd_loss = 0.0f64;
                    let tap_grads: Option<Vec<Option<Vec<f32>>>> = if is_poisoned[i] {
                        let mut slots: Vec<Option<Vec<f32>>> = vec![None; tap_count];
                        for (slot, &layer) in penalty_taps.iter().enumerate() {
                            let tap = cache[net.tap_layers()[layer - 1]].data();
                            if let Some((dist, grad)) =
                                cosine_distance_grad(tap, &centroids[slot], cd_scale)
                            {
                                cd_loss += dist;
                                slots[layer - 1] = Some(grad);
                            }
                        }
                        Some(slots)
                    } else {
                        None
                    };
                    let grads = backward_flat(
                        &net,
                        &sample.pixels,
                        &cache,
                        d_logits,
                        tap_grads.as_deref(),
                    );
                    Ok((
                        ce_loss as f64,
                        cd_loss / penalty_taps.len() as f64,
                        grads,
                    ))
                })
                .collect::<Result<_>>()?;
            ce_sum += results.iter().map(|(l, _, _)| l).sum::<f64>();
            cd_sum += results.iter().map(|(_, l, _)| l).sum::<f64>();
            // Per-sample gradients already carry the batch scaling, so the
            // batch gradient is their plain sum, reduced in batch order.
            let mut batch_grad = vec![0.0f32; params.len()];
            for (_, _, g) in &results {
                for (a, v) in batch_grad.iter_mut().zip(g) {
                    *a += *v;
                }
            }
            let lr = config.warmup_lr(lr, epoch, batch_idx, batches_per_epoch);
            state.step(&mut params, &batch_grad, lr, config);
        }
        let epoch_loss = combined_loss(
            beta,
            ce_sum / train_set.len() as f64,
            cd_sum / poisoned_total,
        );
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        history.push(epoch_loss);
    }
    net.assign_params(&params);
    Ok((net, history))
}
