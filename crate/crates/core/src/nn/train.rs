//! Mini-batch SGD with momentum, weight decay, and a step-decay schedule.
//!
//! Training is deterministic for a fixed seed: batch order comes from a
//! seeded shuffle, per-sample gradients are reduced in batch order, and all
//! arithmetic is single precision.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{backward_flat, cross_entropy, forward_cache, Network};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// SGD hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// 1-based epochs at whose start the learning rate is multiplied by
    /// `lr_decay_factor`.
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    /// Shuffle seed. Derived from the master seed when run via a pipeline,
    /// so it is not part of config files.
    #[serde(skip)]
    pub seed: u64,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 2e-3,
            epochs: 12,
            batch_size: 32,
            lr_decay_epochs: vec![9, 11],
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0,1)");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be nonnegative");
        }
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr_decay_factor > 0.0) {
            return fail("lr_decay_factor must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub(crate) fn effective_lr(&self, epoch: usize) -> f64 {
        let decays = self
            .lr_decay_epochs
            .iter()
            .filter(|&&e| e <= epoch + 1)
            .count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }

    /// Step-level rate: the first epoch ramps linearly from a tenth of the
    /// base rate, which keeps freshly initialized ReLU stacks from dying
    /// under high momentum.
    pub(crate) fn warmup_lr(&self, epoch_lr: f64, epoch: usize, batch: usize, batches_per_epoch: usize) -> f64 {
        if epoch > 0 || batches_per_epoch == 0 {
            return epoch_lr;
        }
        let progress = (batch + 1) as f64 / batches_per_epoch as f64;
        epoch_lr * (0.1 + 0.9 * progress)
    }
}

pub(crate) fn check_labels(samples: &[ImageSample], num_classes: usize) -> Result<()> {
    for s in samples {
        if s.label < 1 || s.label > num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Global L2 bound applied to each batch gradient before the update.
const GRAD_CLIP_NORM: f64 = 2.0;

/// Momentum buffer plus the update rule.
pub(crate) struct SgdState {
    velocity: Vec<f32>,
}

impl SgdState {
    pub(crate) fn new(param_count: usize) -> Self {
        Self {
            velocity: vec![0.0; param_count],
        }
    }

    /// `v = momentum*v + (g + wd*w); w -= lr*v`, with the raw gradient
    /// clipped to a global L2 norm of [`GRAD_CLIP_NORM`] first. Without the
    /// clip, one bad batch under high momentum can kill every ReLU.
    pub(crate) fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, config: &TrainConfig) {
        let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
        let scale = if norm > GRAD_CLIP_NORM {
            (GRAD_CLIP_NORM / norm) as f32
        } else {
            1.0
        };
        let lr = lr as f32;
        let momentum = config.momentum as f32;
        let wd = config.weight_decay as f32;
        for ((w, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g * scale + wd * *w;
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}

/// Cross-entropy loss and flat parameter gradient for one sample.
pub(crate) fn sample_ce_grad(net: &Network, sample: &ImageSample) -> Result<(f64, Vec<f32>)> {
    let cache = forward_cache(net, &sample.pixels)?;
    let (loss, d_logits) = cross_entropy(cache.last().unwrap().data(), sample.label);
    let grads = backward_flat(net, &sample.pixels, &cache, d_logits, None);
    Ok((loss as f64, grads))
}

/// Mean of per-sample gradient vectors, reduced in slice order.
pub(crate) fn mean_grads(per_sample: &[Vec<f32>]) -> Vec<f32> {
    let n = per_sample.len() as f32;
    let mut acc = vec![0.0f32; per_sample[0].len()];
    for g in per_sample {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += *v;
        }
    }
    for a in &mut acc {
        *a /= n;
    }
    acc
}

/// Trains a copy of `net` on `train_set` and returns it with the per-epoch
/// mean loss history.
pub fn train(
    net: &Network,
    train_set: &[ImageSample],
    config: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(train_set, net.num_classes())?;

    let mut net = net.clone();
    let mut params = net.flatten_params();
    let mut state = SgdState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        let lr = config.effective_lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            net.assign_params(&params);
            let results: Vec<(f64, Vec<f32>)> = batch
                .par_iter()
                .map(|&i| sample_ce_grad(&net, &train_set[i]))
                .collect::<Result<_>>()?;
            loss_sum += results.iter().map(|(l, _)| l).sum::<f64>();
            let grads: Vec<Vec<f32>> = results.into_iter().map(|(_, g)| g).collect();
            let lr = config.warmup_lr(lr, epoch, batch_idx, batches_per_epoch);
            state.step(&mut params, &mean_grads(&grads), lr, config);
        }
        let epoch_loss = loss_sum / train_set.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        history.push(epoch_loss);
    }
    net.assign_params(&params);
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense_network;
    use crate::tensor::Tensor;
    use rand::Rng;

    /// Two linearly separable blobs in 2-D.
    fn separable_set(n: usize, seed: u64) -> Vec<ImageSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % 2;
                let cx = if class == 0 { -1.0 } else { 1.0 };
                let x = cx + rng.gen_range(-0.4..0.4);
                let y = rng.gen_range(-0.5..0.5f64);
                ImageSample {
                    pixels: Tensor::new(vec![2], vec![x as f32, y as f32]).unwrap(),
                    label: class + 1,
                }
            })
            .collect()
    }

    fn accuracy(net: &Network, set: &[ImageSample]) -> f64 {
        let hits = set
            .iter()
            .filter(|s| crate::nn::forward(net, &s.pixels).unwrap().predicted_class == s.label)
            .count();
        hits as f64 / set.len() as f64
    }

    #[test]
    fn identical_seeds_give_identical_weights() {
        let net = dense_network(&[2, 8, 6, 2], 2, 5).unwrap();
        let set = separable_set(64, 9);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            seed: 123,
            ..TrainConfig::default()
        };
        let (a, la) = train(&net, &set, &cfg).unwrap();
        let (b, lb) = train(&net, &set, &cfg).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        assert_eq!(la, lb);
    }

    #[test]
    fn converges_on_separable_data() {
        let net = dense_network(&[2, 12, 8, 2], 2, 7).unwrap();
        let set = separable_set(128, 21);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 16,
            lr_decay_epochs: vec![40],
            seed: 3,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&net, &set, &cfg).unwrap();
        assert_eq!(history.len(), 50);
        assert!(
            accuracy(&trained, &set) >= 0.99,
            "training accuracy {} below 99%",
            accuracy(&trained, &set)
        );
        assert!(history.last().unwrap() < &history[0]);
    }

    #[test]
    fn rejects_empty_and_bad_labels() {
        let net = dense_network(&[2, 4, 4, 2], 2, 1).unwrap();
        assert!(matches!(
            train(&net, &[], &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let bad = vec![ImageSample {
            pixels: Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
            label: 3,
        }];
        assert!(matches!(
            train(&net, &bad, &TrainConfig::default()),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn lr_schedule_applies_at_listed_epochs() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_decay_epochs: vec![2, 4],
            lr_decay_factor: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_lr(0), 1.0);
        assert_eq!(cfg.effective_lr(1), 0.5); // epoch 2
        assert_eq!(cfg.effective_lr(2), 0.5);
        assert_eq!(cfg.effective_lr(3), 0.25); // epoch 4
    }
}
