//! Run configuration: one human-editable document that drives the whole
//! pipeline. All randomness flows from `master_seed` through named per-stage
//! sub-seeds ([`stage_seed`]), so any stage can be reproduced in isolation.

use crate::data::SyntheticDatasetConfig;
use crate::error::{Error, Result};
use crate::firewall::Metric;
use crate::nn::train::TrainConfig;
use crate::nn::{
    conv_layer, dense_layer, flatten_layer, init_rng, maxpool_layer, relu_layer, Network,
};
use crate::poison::{noise_pattern, solid_patch, PatchAnchor, TriggerSpec};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One convolution block: conv(3x3, pad 1) + ReLU, optionally followed by a
/// 2x2 max-pool. The block output is a tap unless it is the first block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    #[serde(default)]
    pub pool: bool,
}

/// Network architecture description.
///
/// Taps follow the block convention: the output of every convolution block
/// except the first is a tap, as is every hidden dense layer's ReLU output.
/// The logits layer is never a tap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub conv_blocks: Vec<ConvBlock>,
    /// Hidden dense widths between the flattened features and the logits.
    pub hidden: Vec<usize>,
}

impl ArchSpec {
    /// Number of taps this architecture will expose.
    pub fn tap_count(&self) -> usize {
        self.conv_blocks.len().saturating_sub(1) + self.hidden.len()
    }

    /// Builds the seeded network for a given input shape and class count.
    pub fn build(&self, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
        if input_shape.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "expected a [channels, height, width] input, got {input_shape:?}"
            )));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidConfig("arch needs at least one conv block".into()));
        }
        let mut rng = init_rng(seed);
        let mut layers = Vec::new();
        let (mut channels, mut height, mut width) =
            (input_shape[0], input_shape[1], input_shape[2]);
        for (i, block) in self.conv_blocks.iter().enumerate() {
            let is_tap = i > 0;
            layers.push(conv_layer(&mut rng, channels, block.channels, 3, 1, false));
            channels = block.channels;
            if block.pool {
                layers.push(relu_layer(false));
                layers.push(maxpool_layer(2, is_tap));
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "cannot pool odd spatial size {height}x{width}"
                    )));
                }
                height /= 2;
                width /= 2;
            } else {
                layers.push(relu_layer(is_tap));
            }
        }
        layers.push(flatten_layer(false));
        let mut features = channels * height * width;
        for &h in &self.hidden {
            layers.push(dense_layer(&mut rng, features, h, false));
            layers.push(relu_layer(true));
            features = h;
        }
        layers.push(dense_layer(&mut rng, features, num_classes, false));
        Network::new(layers, input_shape.to_vec(), num_classes)
    }
}

/// Trigger described generatively; materialized into a concrete
/// [`TriggerSpec`] once the image shape and seed are known.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerConfig {
    /// Solid square patch in the bottom-right corner.
    Patch {
        #[serde(default = "default_patch_size")]
        size: usize,
        #[serde(default = "default_patch_value")]
        value: f32,
    },
    /// Full-image seeded uniform-noise pattern.
    Blended {
        #[serde(default = "default_blend_ratio")]
        blend_ratio: f64,
    },
}

fn default_patch_size() -> usize {
    2
}
fn default_patch_value() -> f32 {
    1.0
}
fn default_blend_ratio() -> f64 {
    0.1
}

impl TriggerConfig {
    pub fn materialize(&self, image_shape: &[usize], seed: u64) -> TriggerSpec {
        match self {
            TriggerConfig::Patch { size, value } => solid_patch(image_shape[0], *size, *value),
            TriggerConfig::Blended { blend_ratio } => match noise_pattern(image_shape, seed) {
                TriggerSpec::Blended { pattern, .. } => TriggerSpec::Blended {
                    pattern,
                    blend_ratio: *blend_ratio,
                },
                TriggerSpec::Patch { .. } => unreachable!("noise_pattern is blended"),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub trigger: TriggerConfig,
    pub target_class: usize,
    pub poison_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// Per-class fraction of the benign test set reserved for calibration.
    #[serde(default = "default_calib_fraction")]
    pub calib_fraction: f64,
    /// Lower bound on calibration samples per class; inactive once the
    /// fraction alone reaches it.
    #[serde(default = "default_calib_min_per_class")]
    pub calib_min_per_class: usize,
}

fn default_tau() -> f64 {
    2.5
}
fn default_metric() -> Metric {
    Metric::Cosine
}
fn default_calib_fraction() -> f64 {
    0.1
}
fn default_calib_min_per_class() -> usize {
    20
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            metric: default_metric(),
            calib_fraction: default_calib_fraction(),
            calib_min_per_class: default_calib_min_per_class(),
        }
    }
}

/// Sweep grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
}

fn default_taus() -> Vec<f64> {
    vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
}
fn default_rates() -> Vec<f64> {
    vec![0.01, 0.03, 0.05, 0.10]
}
fn default_betas() -> Vec<f64> {
    vec![0.0, 0.5, 0.9, 0.95]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: default_taus(),
            rates: default_rates(),
            betas: default_betas(),
        }
    }
}

/// Everything a pipeline run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub master_seed: u64,
    pub dataset: SyntheticDatasetConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub poison: PoisonConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl RunConfig {
    /// Desk-scale reference run: 10 classes at 16x16, a six-tap CNN, and a
    /// 2x2 corner patch at a 5% poisoning rate.
    pub fn desk_default() -> Self {
        Self {
            master_seed: 7,
            dataset: SyntheticDatasetConfig::default(),
            arch: ArchSpec {
                conv_blocks: vec![
                    ConvBlock {
                        channels: 6,
                        pool: false,
                    },
                    ConvBlock {
                        channels: 6,
                        pool: true,
                    },
                    ConvBlock {
                        channels: 12,
                        pool: false,
                    },
                    ConvBlock {
                        channels: 12,
                        pool: true,
                    },
                    ConvBlock {
                        channels: 24,
                        pool: false,
                    },
                    ConvBlock {
                        channels: 24,
                        pool: true,
                    },
                ],
                hidden: vec![48],
            },
            train: TrainConfig::default(),
            poison: PoisonConfig {
                trigger: TriggerConfig::Patch {
                    size: 2,
                    value: 1.0,
                },
                target_class: 1,
                poison_rate: 0.05,
            },
            defense: DefenseConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Smaller, faster variant for multi-seed sweeps.
    pub fn desk_small() -> Self {
        let mut cfg = Self::desk_default();
        cfg.dataset = SyntheticDatasetConfig {
            num_classes: 6,
            image_size: 12,
            train_count: 900,
            test_count: 240,
            noise_level: 0.03,
            seed: 0,
        };
        cfg.arch = ArchSpec {
            conv_blocks: vec![
                ConvBlock {
                    channels: 6,
                    pool: false,
                },
                ConvBlock {
                    channels: 12,
                    pool: true,
                },
                ConvBlock {
                    channels: 12,
                    pool: false,
                },
                ConvBlock {
                    channels: 24,
                    pool: true,
                },
            ],
            hidden: vec![32],
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.poison.target_class < 1 || self.poison.target_class > self.dataset.num_classes {
            return Err(Error::LabelOutOfRange {
                label: self.poison.target_class,
                num_classes: self.dataset.num_classes,
            });
        }
        if !(self.poison.poison_rate > 0.0 && self.poison.poison_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "poison_rate {} must be in (0,1)",
                self.poison.poison_rate
            )));
        }
        if let TriggerConfig::Patch { size, .. } = &self.poison.trigger {
            if *size == 0 || *size > self.dataset.image_size {
                return Err(Error::InvalidConfig(format!(
                    "patch size {size} does not fit a {} pixel image",
                    self.dataset.image_size
                )));
            }
        }
        if let TriggerConfig::Blended { blend_ratio } = &self.poison.trigger {
            if !(*blend_ratio > 0.0 && *blend_ratio < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "blend_ratio {blend_ratio} must be in (0,1)"
                )));
            }
        }
        if !(self.defense.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        if self.arch.tap_count() < crate::nn::MIN_TAPS {
            return Err(Error::InvalidConfig(format!(
                "architecture exposes {} taps, at least {} required",
                self.arch.tap_count(),
                crate::nn::MIN_TAPS
            )));
        }
        if self.sweep.taus.iter().any(|&t| t <= 0.0) {
            return Err(Error::InvalidConfig("sweep taus must be positive".into()));
        }
        if self.sweep.rates.iter().any(|&r| r <= 0.0 || r >= 1.0) {
            return Err(Error::InvalidConfig("sweep rates must be in (0,1)".into()));
        }
        if self.sweep.betas.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
            return Err(Error::InvalidConfig("sweep betas must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Short hex digest of the canonical JSON form; stamped into reports.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Anchor trigger pixels embedded in the manifest alongside reports.
    pub fn materialized_trigger(&self) -> TriggerSpec {
        self.poison
            .trigger
            .materialize(&self.dataset.image_shape(), stage_seed(self.master_seed, "trigger"))
    }
}

/// Derives the seed for a named stage from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// A solid patch placed at an explicit offset; exposed for configs that need
/// a non-corner anchor.
pub fn offset_patch(channels: usize, size: usize, value: f32, row: usize, col: usize) -> TriggerSpec {
    TriggerSpec::Patch {
        pixels: Tensor::new(
            vec![channels, size, size],
            vec![value; channels * size * size],
        )
        .expect("finite patch"),
        anchor: PatchAnchor::Offset { row, col },
    }
}
