//! A workbench for studying backdoor data poisoning and a layer-wise
//! feature-analysis defense, at desk scale.
//!
//! The crate trains small image classifiers from scratch ([`nn`]), injects
//! patch or blended triggers into their training data ([`poison`]), and
//! detects triggered inputs at inference time by comparing their per-layer
//! features against benign class centroids ([`analysis`], [`firewall`]).
//! [`eval`] reproduces the standard experiment shapes (threshold, poisoning
//! rate, per-layer, adaptive-attacker, and metric sweeps) and writes
//! deterministic reports.
//!
//! The detector works offline/online: offline, it estimates per-class
//! centroids over the upper tap layers, locates the layer of interest (the
//! largest jump in the benign similarity profile), and fits mean/deviation
//! statistics of the summed similarity over a three-layer window; online, an
//! input whose summed similarity falls more than `tau` standard deviations
//! below the mean of its predicted class is flagged as poisoned.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod firewall;
pub mod nn;
pub mod poison;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Scalar, Tensor};

pub use analysis::{
    compute_centroids, identify_loi, layerwise_cosine, mean_profile, ClassCentroids, LayerRange,
    SimilarityProfile, SimilarityRecord,
};
pub use config::{ArchSpec, RunConfig, TriggerConfig};
pub use data::{gen_synthetic_dataset, ImageSample, SyntheticDatasetConfig};
pub use firewall::{calibrate, detect, score_batch, ClassCalibration, FirewallModel, Metric, Verdict};
pub use nn::train::{train, TrainConfig};
pub use nn::{forward, forward_traced, ActivationTrace, Network, PredictionResult};
pub use poison::adaptive::train_adaptive;
pub use poison::{
    apply_blended_trigger, apply_patch_trigger, make_poisoned_test_set, poison_train_set,
    PoisonSpec, TriggerSpec,
};
