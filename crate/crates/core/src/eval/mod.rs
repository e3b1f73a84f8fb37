//! Attack/detection metrics and the sweep experiments.

pub mod pipeline;
pub mod report;

use crate::config::RunConfig;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::firewall::{
    calibrate, calibrate_single_layer, score_batch, verdict_for, FirewallModel, Metric,
};
use crate::nn::{forward, Network};
use rayon::prelude::*;

/// Attack performance: main accuracy and attack success rate, percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackMetrics {
    pub ma: f64,
    pub asr: f64,
}

/// Detector performance with the raw counts behind the rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub true_positives: usize,
    pub total_poisoned: usize,
    pub false_positives: usize,
    pub total_benign: usize,
}

impl DetectionMetrics {
    fn from_counts(
        true_positives: usize,
        total_poisoned: usize,
        false_positives: usize,
        total_benign: usize,
    ) -> Self {
        Self {
            tpr: 100.0 * true_positives as f64 / total_poisoned as f64,
            fpr: 100.0 * false_positives as f64 / total_benign as f64,
            true_positives,
            total_poisoned,
            false_positives,
            total_benign,
        }
    }
}

/// One row of a sweep report.
#[derive(Debug, Clone)]
pub struct SweepRow {
    /// Display form of the swept value (`"2.5"`, `"ours"`, ...).
    pub label: String,
    /// Numeric form, used for ordering.
    pub value: f64,
    /// Block label for grouped reports (the metric-comparison table).
    pub group: Option<String>,
    pub ma: Option<f64>,
    pub asr: Option<f64>,
    pub tpr: f64,
    pub fpr: f64,
}

fn predictions(net: &Network, samples: &[ImageSample]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| forward(net, &s.pixels).map(|p| p.predicted_class))
        .collect()
}

/// MA over the benign set against true labels; ASR as the fraction of
/// poisoned samples predicted as the target class.
pub fn attack_metrics(
    net: &Network,
    benign_test: &[ImageSample],
    poisoned_test: &[ImageSample],
    target_class: usize,
) -> Result<AttackMetrics> {
    if benign_test.is_empty() || poisoned_test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let benign_preds = predictions(net, benign_test)?;
    let correct = benign_preds
        .iter()
        .zip(benign_test)
        .filter(|(p, s)| **p == s.label)
        .count();
    let poisoned_preds = predictions(net, poisoned_test)?;
    let hits = poisoned_preds.iter().filter(|&&p| p == target_class).count();
    Ok(AttackMetrics {
        ma: 100.0 * correct as f64 / benign_test.len() as f64,
        asr: 100.0 * hits as f64 / poisoned_test.len() as f64,
    })
}

/// Re-derives verdicts from cached `(class, score)` pairs at a given `tau`.
pub fn detection_from_scores(
    fw: &FirewallModel,
    tau: f64,
    benign_scores: &[(usize, f64)],
    poisoned_scores: &[(usize, f64)],
) -> Result<DetectionMetrics> {
    if benign_scores.is_empty() || poisoned_scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let flagged = |scores: &[(usize, f64)]| -> Result<usize> {
        let mut count = 0;
        for &(class, score) in scores {
            let cal = fw.calibration_for(class)?;
            if verdict_for(cal, fw.metric, tau, class, score).is_poisoned {
                count += 1;
            }
        }
        Ok(count)
    };
    Ok(DetectionMetrics::from_counts(
        flagged(poisoned_scores)?,
        poisoned_scores.len(),
        flagged(benign_scores)?,
        benign_scores.len(),
    ))
}

/// Scores both populations against the calibrated firewall. Every benign
/// sample counts toward the FPR denominator and every poisoned sample toward
/// the TPR denominator, regardless of predicted class.
pub fn detection_metrics(
    net: &Network,
    fw: &FirewallModel,
    benign_test: &[ImageSample],
    poisoned_test: &[ImageSample],
) -> Result<DetectionMetrics> {
    if benign_test.is_empty() || poisoned_test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let benign_scores = score_batch(net, fw, benign_test)?;
    let poisoned_scores = score_batch(net, fw, poisoned_test)?;
    detection_from_scores(fw, fw.tau, &benign_scores, &poisoned_scores)
}

fn sorted_positive(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} grid is empty")));
    }
    if values.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidConfig(format!("{what} values must be positive")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(sorted)
}

/// One calibration pass, one scoring pass, then verdicts recomputed per
/// threshold from the cached scores. Rows come back ordered by tau.
pub fn threshold_sweep(
    net: &Network,
    calibration: &[ImageSample],
    benign_eval: &[ImageSample],
    poisoned_eval: &[ImageSample],
    taus: &[f64],
    metric: Metric,
) -> Result<Vec<SweepRow>> {
    let taus = sorted_positive(taus, "tau")?;
    let fw = calibrate(net, calibration, taus[0], metric)?;
    let benign_scores = score_batch(net, &fw, benign_eval)?;
    let poisoned_scores = score_batch(net, &fw, poisoned_eval)?;
    taus.iter()
        .map(|&tau| {
            let d = detection_from_scores(&fw, tau, &benign_scores, &poisoned_scores)?;
            Ok(SweepRow {
                label: trim_float(tau),
                value: tau,
                group: None,
                ma: None,
                asr: None,
                tpr: d.tpr,
                fpr: d.fpr,
            })
        })
        .collect()
}

/// Full train/calibrate/evaluate pipeline per poisoning rate under one
/// master seed.
pub fn poison_rate_sweep(rates: &[f64], cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let rates = sorted_positive(rates, "rate")?;
    if rates.iter().any(|&r| r >= 1.0) {
        return Err(Error::InvalidConfig("rates must be below 1".into()));
    }
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in &rates {
        let mut run_cfg = cfg.clone();
        run_cfg.poison.poison_rate = rate;
        let arts = pipeline::run_pipeline(&run_cfg, &pipeline::PipelineOptions::default())?;
        rows.push(SweepRow {
            label: trim_float(rate),
            value: rate,
            group: None,
            ma: Some(arts.attack.ma),
            asr: Some(arts.attack.asr),
            tpr: arts.detection.tpr,
            fpr: arts.detection.fpr,
        });
    }
    Ok(rows)
}

/// Detection quality of each single tap layer, followed by the standard
/// three-layer window as the final `"ours"` row.
pub fn per_layer_detection(
    net: &Network,
    calibration: &[ImageSample],
    benign_eval: &[ImageSample],
    poisoned_eval: &[ImageSample],
    tau: f64,
    metric: Metric,
) -> Result<Vec<SweepRow>> {
    let taps = net.tap_count();
    let mut rows = Vec::with_capacity(taps + 1);
    for layer in 1..=taps {
        let fw = calibrate_single_layer(net, calibration, tau, metric, layer)?;
        let d = detection_metrics(net, &fw, benign_eval, poisoned_eval)?;
        rows.push(SweepRow {
            label: layer.to_string(),
            value: layer as f64,
            group: None,
            ma: None,
            asr: None,
            tpr: d.tpr,
            fpr: d.fpr,
        });
    }
    let fw = calibrate(net, calibration, tau, metric)?;
    let d = detection_metrics(net, &fw, benign_eval, poisoned_eval)?;
    rows.push(SweepRow {
        label: "ours".into(),
        value: (taps + 1) as f64,
        group: None,
        ma: None,
        asr: None,
        tpr: d.tpr,
        fpr: d.fpr,
    });
    Ok(rows)
}

/// Re-runs the pipeline per penalty factor with the adaptive trainer.
pub fn adaptive_sweep(betas: &[f64], cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::InvalidConfig("beta grid is empty".into()));
    }
    if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::InvalidConfig("betas must be in [0,1]".into()));
    }
    let mut betas = betas.to_vec();
    betas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in &betas {
        let arts = pipeline::run_pipeline(
            cfg,
            &pipeline::PipelineOptions {
                beta: Some(beta),
                with_clean_baseline: false,
            },
        )?;
        rows.push(SweepRow {
            label: trim_float(beta),
            value: beta,
            group: None,
            ma: Some(arts.attack.ma),
            asr: Some(arts.attack.asr),
            tpr: arts.detection.tpr,
            fpr: arts.detection.fpr,
        });
    }
    Ok(rows)
}

/// Paired cosine/euclidean TPR and FPR per threshold from one trained model:
/// one block of rows per metric.
pub fn metric_comparison(taus: &[f64], cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let taus = sorted_positive(taus, "tau")?;
    let arts = pipeline::run_pipeline(cfg, &pipeline::PipelineOptions::default())?;
    let mut rows = Vec::with_capacity(2 * taus.len());
    for metric in [Metric::Cosine, Metric::Euclidean] {
        let fw = calibrate(&arts.net, &arts.calibration, taus[0], metric)?;
        let benign_scores = score_batch(&arts.net, &fw, &arts.benign_eval)?;
        let poisoned_scores = score_batch(&arts.net, &fw, &arts.poisoned_eval)?;
        for &tau in &taus {
            let d = detection_from_scores(&fw, tau, &benign_scores, &poisoned_scores)?;
            rows.push(SweepRow {
                label: trim_float(tau),
                value: tau,
                group: Some(metric.name().to_string()),
                ma: None,
                asr: None,
                tpr: d.tpr,
                fpr: d.fpr,
            });
        }
    }
    Ok(rows)
}

/// Compact display form for swept values (no trailing zeros).
pub(crate) fn trim_float(v: f64) -> String {
    let s = format!("{v}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firewall::ClassCalibration;
    use crate::nn::{dense_network, LayerOp, LayerSpec};
    use crate::tensor::Tensor;

    fn sample(v: Vec<f32>, label: usize) -> ImageSample {
        ImageSample {
            pixels: Tensor::new(vec![v.len()], v).unwrap(),
            label,
        }
    }

    /// A net that always predicts class 1: final dense bias dominates.
    fn constant_net() -> Network {
        let mut net = dense_network(&[2, 4, 4, 2], 2, 3).unwrap();
        let mut params = net.flatten_params();
        for p in &mut params {
            *p = 0.0;
        }
        net.assign_params(&params);
        // Zero weights leave logits at the bias; bump class 1's bias.
        let layers = net.layers().to_vec();
        let mut new_layers = layers.clone();
        if let LayerOp::Dense { bias, .. } = &mut new_layers.last_mut().unwrap().op {
            bias[0] = 5.0;
        }
        Network::new(new_layers, vec![2], 2).unwrap()
    }

    #[test]
    fn degenerate_predictor_has_full_asr() {
        let net = constant_net();
        let benign: Vec<ImageSample> = (0..10)
            .map(|i| sample(vec![0.1 * i as f32, 0.2], i % 2 + 1))
            .collect();
        let poisoned: Vec<ImageSample> =
            (0..8).map(|i| sample(vec![0.3, 0.1 * i as f32], 2)).collect();
        let m = attack_metrics(&net, &benign, &poisoned, 1).unwrap();
        assert_eq!(m.asr, 100.0);
        // Predicts 1 everywhere; 5 of 10 benign carry label 1.
        assert_eq!(m.ma, 50.0);
    }

    #[test]
    fn counting_arithmetic() {
        let fw = FirewallModel {
            tau: 2.5,
            metric: Metric::Cosine,
            tap_count: 4,
            calibrations: vec![ClassCalibration {
                class: 1,
                loi: 3,
                window: vec![1, 2, 3],
                centroids: vec![vec![1.0]; 3],
                mu: 3.0,
                sigma: 0.1,
                sample_count: 5,
            }],
        };
        // Threshold 2.75: scores below flag.
        let benign: Vec<(usize, f64)> = (0..50)
            .map(|i| (1, if i == 0 { 2.0 } else { 2.9 }))
            .collect();
        let poisoned: Vec<(usize, f64)> = (0..10)
            .map(|i| (1, if i < 9 { 1.0 } else { 2.9 }))
            .collect();
        let d = detection_from_scores(&fw, 2.5, &benign, &poisoned).unwrap();
        assert_eq!(d.true_positives, 9);
        assert_eq!(d.false_positives, 1);
        assert_eq!(d.tpr, 90.0);
        assert_eq!(d.fpr, 2.0);

        // A detector flagging nothing.
        let all_high: Vec<(usize, f64)> = (0..10).map(|_| (1, 3.0)).collect();
        let d0 = detection_from_scores(&fw, 2.5, &all_high, &all_high).unwrap();
        assert_eq!(d0.tpr, 0.0);
        assert_eq!(d0.fpr, 0.0);
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let net = constant_net();
        let s = vec![sample(vec![0.0, 0.0], 1), sample(vec![0.1, 0.1], 1)];
        assert!(threshold_sweep(&net, &s, &s, &s, &[], Metric::Cosine).is_err());
        assert!(threshold_sweep(&net, &s, &s, &s, &[0.0], Metric::Cosine).is_err());
    }
}
