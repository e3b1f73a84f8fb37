//! Inference-time poisoned-input detector.
//!
//! Offline, [`calibrate`] learns per-class statistics from benign validation
//! samples: layer-wise centroids over the upper half of the taps, the layer
//! of interest (largest jump in the mean similarity profile), and the mean
//! and standard deviation of the summed per-sample similarity over the
//! three-layer window ending at the LOI. Online, [`detect`] scores an input
//! against its predicted class and flags it when the score falls more than
//! `tau` standard deviations on the alarming side of the mean.

pub mod io;

use crate::analysis::{
    centroid_range, compute_centroids, cosine_to_centroid, distance_to_centroid, identify_loi,
    layerwise_cosine, loi_scan_range, mean_profile, LayerRange,
};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{forward_traced, ActivationTrace, Network};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Similarity metric used for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Summed cosine similarity; alarms on scores below the mean.
    Cosine,
    /// Summed Euclidean distance; alarms on scores above the mean.
    Euclidean,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }
}

/// Guards degenerate zero-variance classes from flagging every input that
/// is not bit-identical to the calibration set.
const SIGMA_FLOOR: f64 = 1e-12;

/// Per-class detection statistics.
#[derive(Debug, Clone)]
pub struct ClassCalibration {
    pub class: usize,
    /// Layer of interest for this class.
    pub loi: usize,
    /// Tap indices scored at inference: `{loi-2, loi-1, loi}` clamped at 1,
    /// strictly increasing.
    pub window: Vec<usize>,
    /// Centroids for the window layers, in window order.
    pub centroids: Vec<Vec<f64>>,
    /// Mean of the summed benign window scores.
    pub mu: f64,
    /// Population standard deviation of the summed benign window scores.
    pub sigma: f64,
    pub sample_count: usize,
}

impl ClassCalibration {
    /// Alarm threshold at a given `tau` for a metric.
    pub fn threshold(&self, metric: Metric, tau: f64) -> f64 {
        let spread = tau * self.sigma.max(SIGMA_FLOOR);
        match metric {
            Metric::Cosine => self.mu - spread,
            Metric::Euclidean => self.mu + spread,
        }
    }
}

/// Calibrated detector: one [`ClassCalibration`] per class plus the
/// threshold and metric.
#[derive(Debug, Clone)]
pub struct FirewallModel {
    pub tau: f64,
    pub metric: Metric,
    /// Tap count L of the network the model was calibrated on.
    pub tap_count: usize,
    /// Indexed by class-1; every class in 1..=C is present.
    pub calibrations: Vec<ClassCalibration>,
}

impl FirewallModel {
    pub fn num_classes(&self) -> usize {
        self.calibrations.len()
    }

    pub fn calibration_for(&self, class: usize) -> Result<&ClassCalibration> {
        self.calibrations
            .get(class.wrapping_sub(1))
            .filter(|c| c.class == class)
            .ok_or(Error::MissingCalibration { class })
    }
}

/// Detection decision for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub predicted_class: usize,
    /// Summed window similarity (cosine) or summed window distance (euclidean).
    pub score: f64,
    /// `mu - tau*sigma` for cosine, `mu + tau*sigma` for euclidean.
    pub threshold_value: f64,
    pub is_poisoned: bool,
}

/// Assembles a verdict from a class calibration and a score; the alarm fires
/// strictly beyond the threshold in the metric's alarming direction.
pub fn verdict_for(
    cal: &ClassCalibration,
    metric: Metric,
    tau: f64,
    predicted_class: usize,
    score: f64,
) -> Verdict {
    let threshold_value = cal.threshold(metric, tau);
    let is_poisoned = match metric {
        Metric::Cosine => score < threshold_value,
        Metric::Euclidean => score > threshold_value,
    };
    Verdict {
        predicted_class,
        score,
        threshold_value,
        is_poisoned,
    }
}

/// Window score of a trace against a class calibration: summed cosine
/// similarity or summed Euclidean distance over the window layers.
pub fn score_trace(cal: &ClassCalibration, trace: &ActivationTrace, metric: Metric) -> Result<f64> {
    let mut score = 0.0;
    for (slot, &layer) in cal.window.iter().enumerate() {
        if trace.len() < layer {
            return Err(Error::LayerRangeMismatch {
                left: (layer, layer),
                right: (1, trace.len()),
            });
        }
        let tap = trace.tap(layer);
        let centroid = &cal.centroids[slot];
        if tap.len() != centroid.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![centroid.len()],
                got: vec![tap.len()],
            });
        }
        score += match metric {
            Metric::Cosine => cosine_to_centroid(tap, centroid),
            Metric::Euclidean => distance_to_centroid(tap, centroid),
        };
    }
    Ok(score)
}

/// How the scored window is chosen during calibration.
#[derive(Debug, Clone, Copy)]
enum WindowRule {
    /// Identify the LOI per class and score `{loi-2, loi-1, loi}`.
    FromLoi,
    /// Score exactly one fixed tap.
    Single(usize),
}

fn calibrate_class(
    traces: &[ActivationTrace],
    class: usize,
    tap_count: usize,
    metric: Metric,
    rule: WindowRule,
) -> Result<ClassCalibration> {
    let (cent_range, window, loi) = match rule {
        WindowRule::FromLoi => {
            let cent_range = centroid_range(tap_count);
            let cents = compute_centroids(traces, class, cent_range)?;
            let records: Vec<_> = traces
                .iter()
                .map(|t| layerwise_cosine(t, &cents))
                .collect::<Result<_>>()?;
            let profile = mean_profile(&records, class)?;
            let scan = profile.restrict(loi_scan_range(tap_count))?;
            let loi = identify_loi(&scan)?;
            let window: Vec<usize> = (loi.saturating_sub(2).max(1)..=loi).collect();
            (cent_range, window, loi)
        }
        WindowRule::Single(layer) => {
            if layer < 1 || layer > tap_count {
                return Err(Error::InvalidConfig(format!(
                    "layer {layer} outside 1..={tap_count}"
                )));
            }
            (LayerRange::new(layer, layer), vec![layer], layer)
        }
    };
    // Window centroids; recomputed over the centroid range so both rules
    // share one code path.
    let cents = compute_centroids(traces, class, cent_range)?;
    let centroids: Vec<Vec<f64>> = window.iter().map(|&l| cents.at(l).to_vec()).collect();
    let cal_proto = ClassCalibration {
        class,
        loi,
        window,
        centroids,
        mu: 0.0,
        sigma: 0.0,
        sample_count: traces.len(),
    };
    let scores: Vec<f64> = traces
        .iter()
        .map(|t| score_trace(&cal_proto, t, metric))
        .collect::<Result<_>>()?;
    let m = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / m;
    let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / m;
    Ok(ClassCalibration {
        mu,
        sigma: var.sqrt(),
        ..cal_proto
    })
}

fn calibrate_with_rule(
    net: &Network,
    benign_val: &[ImageSample],
    tau: f64,
    metric: Metric,
    rule: WindowRule,
) -> Result<FirewallModel> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} must be positive")));
    }
    if benign_val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = net.num_classes();
    let mut per_class: Vec<Vec<&ImageSample>> = vec![Vec::new(); num_classes + 1];
    for s in benign_val {
        if s.label < 1 || s.label > num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                num_classes,
            });
        }
        per_class[s.label].push(s);
    }
    let mut calibrations = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let samples = &per_class[class];
        if samples.len() < 2 {
            return Err(Error::TooFewClassSamples {
                class,
                count: samples.len(),
                required: 2,
            });
        }
        let traces: Vec<ActivationTrace> = samples
            .par_iter()
            .map(|s| forward_traced(net, &s.pixels).map(|(_, t)| t))
            .collect::<Result<_>>()?;
        calibrations.push(calibrate_class(
            &traces,
            class,
            net.tap_count(),
            metric,
            rule,
        )?);
    }
    Ok(FirewallModel {
        tau,
        metric,
        tap_count: net.tap_count(),
        calibrations,
    })
}

/// Offline calibration over benign validation samples; every class needs at
/// least two.
pub fn calibrate(
    net: &Network,
    benign_val: &[ImageSample],
    tau: f64,
    metric: Metric,
) -> Result<FirewallModel> {
    calibrate_with_rule(net, benign_val, tau, metric, WindowRule::FromLoi)
}

/// Calibration variant scoring a single fixed tap instead of the LOI window;
/// used by the per-layer detection sweep.
pub fn calibrate_single_layer(
    net: &Network,
    benign_val: &[ImageSample],
    tau: f64,
    metric: Metric,
    layer: usize,
) -> Result<FirewallModel> {
    calibrate_with_rule(net, benign_val, tau, metric, WindowRule::Single(layer))
}

/// Classifies `x` and scores it against its predicted class's calibration.
pub fn detect(net: &Network, fw: &FirewallModel, x: &Tensor) -> Result<Verdict> {
    let (prediction, trace) = forward_traced(net, x)?;
    let cal = fw.calibration_for(prediction.predicted_class)?;
    let score = score_trace(cal, &trace, fw.metric)?;
    Ok(verdict_for(
        cal,
        fw.metric,
        fw.tau,
        prediction.predicted_class,
        score,
    ))
}

/// Vectorized [`detect`] without verdicts: `(predicted_class, score)` per
/// sample, in input order. Used by threshold sweeps so verdicts can be
/// recomputed for many `tau` values from one scoring pass.
pub fn score_batch(
    net: &Network,
    fw: &FirewallModel,
    samples: &[ImageSample],
) -> Result<Vec<(usize, f64)>> {
    samples
        .par_iter()
        .map(|s| {
            let (prediction, trace) = forward_traced(net, &s.pixels)?;
            let cal = fw.calibration_for(prediction.predicted_class)?;
            let score = score_trace(cal, &trace, fw.metric)?;
            Ok((prediction.predicted_class, score))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dense_network, LayerOp, LayerSpec, Network};

    /// Identity network: four tapped layers passing the input through, so
    /// tap vectors equal the input everywhere.
    fn identity_net() -> Network {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let dense = |is_tap| LayerSpec {
            op: LayerOp::Dense {
                weight: eye.clone(),
                bias: vec![0.0; 2],
            },
            is_tap,
        };
        let relu = |is_tap| LayerSpec {
            op: LayerOp::Relu,
            is_tap,
        };
        Network::new(
            vec![dense(true), relu(true), dense(true), relu(true)],
            vec![2],
            2,
        )
        .unwrap()
    }

    fn sample(x: f32, y: f32, label: usize) -> ImageSample {
        ImageSample {
            pixels: Tensor::new(vec![2], vec![x, y]).unwrap(),
            label,
        }
    }

    #[test]
    fn identical_traces_give_sigma_zero_mu_three() {
        // Two identical samples per class: every cosine is exactly 1, the
        // window sums to 3, and sigma collapses to 0.
        let net = identity_net();
        let val = vec![
            sample(1.0, 0.2, 1),
            sample(1.0, 0.2, 1),
            sample(0.2, 1.0, 2),
            sample(0.2, 1.0, 2),
        ];
        let fw = calibrate(&net, &val, 2.5, Metric::Cosine).unwrap();
        for cal in &fw.calibrations {
            assert!((cal.mu - 3.0).abs() < 1e-12, "mu {}", cal.mu);
            assert_eq!(cal.sigma, 0.0);
            assert_eq!(cal.window.len(), 3);
            assert_eq!(cal.sample_count, 2);
        }
        // Score equal to mu is not flagged (strict inequality).
        let v = detect(&net, &fw, &val[0].pixels).unwrap();
        assert!((v.score - 3.0).abs() < 1e-12);
        assert!(!v.is_poisoned);
    }

    #[test]
    fn two_sample_calibration_matches_hand_math() {
        // Class 1 samples (1,0) and (0,1); centroid (0.5,0.5) at every tap.
        // cos((1,0),(0.5,0.5)) = 1/sqrt(2); window of 3 layers sums to
        // 3/sqrt(2) for both samples, so mu = 3/sqrt(2), sigma = 0.
        let net = identity_net();
        let val = vec![
            sample(1.0, 0.0, 1),
            sample(0.0, 1.0, 1),
            sample(0.5, 0.5, 2),
            sample(0.4, 0.6, 2),
        ];
        let fw = calibrate(&net, &val, 2.5, Metric::Cosine).unwrap();
        let cal = fw.calibration_for(1).unwrap();
        let expected = 3.0 / 2.0f64.sqrt();
        assert!((cal.mu - expected).abs() < 1e-9, "mu {}", cal.mu);
        assert!(cal.sigma.abs() < 1e-9);
        // L=4: scan range 2..=4, all diffs zero, LOI stays at 3.
        assert_eq!(cal.loi, 3);
        assert_eq!(cal.window, vec![1, 2, 3]);
    }

    #[test]
    fn recalibration_is_deterministic() {
        let net = dense_network(&[3, 6, 5, 3], 3, 17).unwrap();
        let mut val = Vec::new();
        let mut rng = crate::nn::init_rng(5);
        for i in 0..30 {
            use rand::Rng;
            let v: Vec<f32> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            val.push(ImageSample {
                pixels: Tensor::new(vec![3], v).unwrap(),
                label: i % 3 + 1,
            });
        }
        let a = calibrate(&net, &val, 2.0, Metric::Cosine).unwrap();
        let b = calibrate(&net, &val, 2.0, Metric::Cosine).unwrap();
        for (x, y) in a.calibrations.iter().zip(&b.calibrations) {
            assert_eq!(x.mu.to_bits(), y.mu.to_bits());
            assert_eq!(x.sigma.to_bits(), y.sigma.to_bits());
            assert_eq!(x.loi, y.loi);
            assert_eq!(x.window, y.window);
        }
    }

    #[test]
    fn threshold_arithmetic() {
        let cal = ClassCalibration {
            class: 1,
            loi: 5,
            window: vec![3, 4, 5],
            centroids: vec![vec![1.0]; 3],
            mu: 2.7,
            sigma: 0.1,
            sample_count: 10,
        };
        // Cosine: threshold 2.45; 2.40 flags, 2.50 does not.
        let flagged = verdict_for(&cal, Metric::Cosine, 2.5, 1, 2.40);
        assert!(flagged.is_poisoned);
        assert!((flagged.threshold_value - 2.45).abs() < 1e-12);
        let clean = verdict_for(&cal, Metric::Cosine, 2.5, 1, 2.50);
        assert!(!clean.is_poisoned);
        // Euclidean mirrors above the mean.
        let eu_flag = verdict_for(&cal, Metric::Euclidean, 2.5, 1, 3.0);
        assert!(eu_flag.is_poisoned);
        assert!((eu_flag.threshold_value - 2.95).abs() < 1e-12);
        assert!(!verdict_for(&cal, Metric::Euclidean, 2.5, 1, 2.9).is_poisoned);
    }

    #[test]
    fn calibration_requires_two_samples_per_class() {
        let net = identity_net();
        let val = vec![sample(1.0, 0.0, 1), sample(1.0, 0.1, 1), sample(0.0, 1.0, 2)];
        assert!(matches!(
            calibrate(&net, &val, 2.5, Metric::Cosine),
            Err(Error::TooFewClassSamples { class: 2, .. })
        ));
    }

    #[test]
    fn score_batch_agrees_with_detect() {
        let net = identity_net();
        let val = vec![
            sample(1.0, 0.0, 1),
            sample(0.9, 0.1, 1),
            sample(0.0, 1.0, 2),
            sample(0.1, 0.9, 2),
        ];
        let fw = calibrate(&net, &val, 2.5, Metric::Cosine).unwrap();
        let probes = vec![
            sample(0.8, 0.3, 1),
            sample(0.2, 0.7, 2),
            sample(1.0, 1.0, 1),
        ];
        let scored = score_batch(&net, &fw, &probes).unwrap();
        assert_eq!(scored.len(), 3);
        for (s, (class, score)) in probes.iter().zip(&scored) {
            let v = detect(&net, &fw, &s.pixels).unwrap();
            assert_eq!(v.predicted_class, *class);
            assert_eq!(v.score.to_bits(), score.to_bits());
        }
        // Permuting the batch permutes outputs identically.
        let perm: Vec<ImageSample> = vec![probes[2].clone(), probes[0].clone(), probes[1].clone()];
        let scored_perm = score_batch(&net, &fw, &perm).unwrap();
        assert_eq!(scored_perm[0], scored[2]);
        assert_eq!(scored_perm[1], scored[0]);
        assert_eq!(scored_perm[2], scored[1]);
    }

    #[test]
    fn single_layer_calibration_scores_one_tap() {
        let net = identity_net();
        let val = vec![
            sample(1.0, 0.0, 1),
            sample(0.0, 1.0, 1),
            sample(0.5, 0.5, 2),
            sample(0.6, 0.4, 2),
        ];
        let fw = calibrate_single_layer(&net, &val, 2.5, Metric::Cosine, 2).unwrap();
        let cal = fw.calibration_for(1).unwrap();
        assert_eq!(cal.window, vec![2]);
        assert_eq!(cal.loi, 2);
        assert!((cal.mu - 1.0 / 2.0f64.sqrt()).abs() < 1e-9);
    }
}
