//! Layer-wise feature analysis: per-class centroids, cosine-similarity
//! profiles, and layer-of-interest identification.
//!
//! All statistics accumulate in double precision regardless of the trace
//! precision, since tap vectors from convolutional layers can run to
//! thousands of elements.

use crate::error::{Error, Result};
use crate::nn::ActivationTrace;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Inclusive interval of 1-based tap indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start >= 1 && end >= start, "invalid layer range {start}..={end}");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }

    fn as_pair(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Scan range used for layer-of-interest identification: `floor(L/2)..=L`.
pub fn loi_scan_range(tap_count: usize) -> LayerRange {
    LayerRange::new(tap_count / 2, tap_count)
}

/// Range over which centroids are estimated. Extends two layers below the
/// scan start (clamped at 1) so the detection window below the LOI is always
/// populated.
pub fn centroid_range(tap_count: usize) -> LayerRange {
    LayerRange::new((tap_count / 2).saturating_sub(2).max(1), tap_count)
}

/// Per-layer mean feature vectors of one class over a layer range.
#[derive(Debug, Clone)]
pub struct ClassCentroids {
    pub class: usize,
    pub range: LayerRange,
    /// One centroid per layer in `range`, in range order.
    pub centroids: Vec<Vec<f64>>,
    pub sample_count: usize,
}

impl ClassCentroids {
    /// Centroid at 1-based tap index `layer`.
    pub fn at(&self, layer: usize) -> &[f64] {
        debug_assert!(self.range.contains(layer));
        &self.centroids[layer - self.range.start]
    }
}

/// Per-layer cosine similarities of one sample against class centroids.
#[derive(Debug, Clone)]
pub struct SimilarityRecord {
    pub range: LayerRange,
    pub values: Vec<f64>,
}

impl SimilarityRecord {
    pub fn at(&self, layer: usize) -> f64 {
        debug_assert!(self.range.contains(layer));
        self.values[layer - self.range.start]
    }
}

/// Per-layer mean similarities of a class.
#[derive(Debug, Clone)]
pub struct SimilarityProfile {
    pub class: usize,
    pub range: LayerRange,
    pub values: Vec<f64>,
}

impl SimilarityProfile {
    pub fn at(&self, layer: usize) -> f64 {
        debug_assert!(self.range.contains(layer));
        self.values[layer - self.range.start]
    }

    /// The profile restricted to a sub-range.
    pub fn restrict(&self, range: LayerRange) -> Result<SimilarityProfile> {
        if range.start < self.range.start || range.end > self.range.end {
            return Err(Error::LayerRangeMismatch {
                left: self.range.as_pair(),
                right: range.as_pair(),
            });
        }
        let off = range.start - self.range.start;
        Ok(SimilarityProfile {
            class: self.class,
            range,
            values: self.values[off..off + range.len()].to_vec(),
        })
    }
}

/// Element-wise mean of the tap vectors of `traces` over `range`.
pub fn compute_centroids(
    traces: &[ActivationTrace],
    class: usize,
    range: LayerRange,
) -> Result<ClassCentroids> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("trace list"));
    }
    let mut centroids = Vec::with_capacity(range.len());
    for layer in range.iter() {
        if traces.iter().any(|t| t.len() < range.end) {
            return Err(Error::LayerRangeMismatch {
                left: range.as_pair(),
                right: (1, traces.iter().map(|t| t.len()).min().unwrap_or(0)),
            });
        }
        let width = traces[0].tap(layer).len();
        let mut acc = vec![0.0f64; width];
        for trace in traces {
            let tap = trace.tap(layer);
            if tap.len() != width {
                return Err(Error::ShapeMismatch {
                    expected: vec![width],
                    got: vec![tap.len()],
                });
            }
            for (a, &v) in acc.iter_mut().zip(tap) {
                *a += v as f64;
            }
        }
        let m = traces.len() as f64;
        for a in &mut acc {
            *a /= m;
        }
        centroids.push(acc);
    }
    Ok(ClassCentroids {
        class,
        range,
        centroids,
        sample_count: traces.len(),
    })
}

/// Cosine similarity with the zero-vector convention: 0 when either operand
/// has zero norm.
pub fn cosine_to_centroid(tap: &[f32], centroid: &[f64]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in tap.iter().zip(centroid) {
        let a = a as f64;
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Euclidean distance between a tap vector and a centroid.
pub fn distance_to_centroid(tap: &[f32], centroid: &[f64]) -> f64 {
    tap.iter()
        .zip(centroid)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Layer-wise cosine similarities of one trace against class centroids.
pub fn layerwise_cosine(trace: &ActivationTrace, cents: &ClassCentroids) -> Result<SimilarityRecord> {
    if trace.len() < cents.range.end {
        return Err(Error::LayerRangeMismatch {
            left: cents.range.as_pair(),
            right: (1, trace.len()),
        });
    }
    let mut values = Vec::with_capacity(cents.range.len());
    for layer in cents.range.iter() {
        let tap = trace.tap(layer);
        let centroid = cents.at(layer);
        if tap.len() != centroid.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![centroid.len()],
                got: vec![tap.len()],
            });
        }
        values.push(cosine_to_centroid(tap, centroid));
    }
    Ok(SimilarityRecord {
        range: cents.range,
        values,
    })
}

/// Per-layer arithmetic mean over similarity records.
pub fn mean_profile(records: &[SimilarityRecord], class: usize) -> Result<SimilarityProfile> {
    if records.is_empty() {
        return Err(Error::EmptyInput("similarity record list"));
    }
    let range = records[0].range;
    for r in records {
        if r.range != range {
            return Err(Error::LayerRangeMismatch {
                left: range.as_pair(),
                right: r.range.as_pair(),
            });
        }
    }
    let mut values = vec![0.0f64; range.len()];
    for r in records {
        for (v, &x) in values.iter_mut().zip(&r.values) {
            *v += x;
        }
    }
    let m = records.len() as f64;
    for v in &mut values {
        *v /= m;
    }
    Ok(SimilarityProfile {
        class,
        range,
        values,
    })
}

/// Finds the layer with the largest jump over its predecessor, scanning the
/// profile from its second layer upward. Ties keep the earliest layer
/// (strict-improvement updates only).
pub fn identify_loi(profile: &SimilarityProfile) -> Result<usize> {
    if profile.values.len() < 2 {
        return Err(Error::ProfileTooShort {
            len: profile.values.len(),
        });
    }
    let start = profile.range.start;
    let mut max_diff = profile.values[1] - profile.values[0];
    let mut loi = start + 1;
    for l in (start + 2)..=profile.range.end {
        let diff = profile.at(l) - profile.at(l - 1);
        if diff > max_diff {
            max_diff = diff;
            loi = l;
        }
    }
    Ok(loi)
}

/// Writes `layer,benign_mean_cs,poisoned_mean_cs,diff` rows for two profiles
/// over the same range, six decimal places.
pub fn export_profiles(
    benign: &SimilarityProfile,
    poisoned: &SimilarityProfile,
    path: &Path,
) -> Result<()> {
    if benign.range != poisoned.range {
        return Err(Error::LayerRangeMismatch {
            left: benign.range.as_pair(),
            right: poisoned.range.as_pair(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "layer,benign_mean_cs,poisoned_mean_cs,diff")?;
    for layer in benign.range.iter() {
        let b = benign.at(layer);
        let p = poisoned.at(layer);
        writeln!(w, "{layer},{b:.6},{p:.6},{:.6}", b - p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(taps: Vec<Vec<f32>>) -> ActivationTrace {
        ActivationTrace::new(taps)
    }

    #[test]
    fn centroid_of_single_trace_is_the_trace() {
        let t = trace(vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]]);
        let c = compute_centroids(std::slice::from_ref(&t), 1, LayerRange::new(1, 2)).unwrap();
        assert_eq!(c.at(1), &[1.0, 2.0]);
        assert_eq!(c.at(2), &[3.0, 4.0, 5.0]);
        assert_eq!(c.sample_count, 1);
    }

    #[test]
    fn centroid_of_symmetric_pair() {
        let a = trace(vec![vec![1.0, 0.0]]);
        let b = trace(vec![vec![0.0, 1.0]]);
        let c = compute_centroids(&[a, b], 2, LayerRange::new(1, 1)).unwrap();
        assert_eq!(c.at(1), &[0.5, 0.5]);
    }

    #[test]
    fn centroid_matches_brute_force_mean() {
        use rand::Rng;
        let mut rng = crate::nn::init_rng(31);
        let traces: Vec<ActivationTrace> = (0..5)
            .map(|_| trace(vec![(0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()]))
            .collect();
        let c = compute_centroids(&traces, 1, LayerRange::new(1, 1)).unwrap();
        // Independent summation oracle.
        let mut expect = vec![0.0f64; 8];
        for t in &traces {
            for (e, &v) in expect.iter_mut().zip(t.tap(1)) {
                *e += v as f64;
            }
        }
        for e in &mut expect {
            *e /= 5.0;
        }
        for (got, want) in c.at(1).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_rejects_empty_and_ragged() {
        assert!(matches!(
            compute_centroids(&[], 1, LayerRange::new(1, 1)),
            Err(Error::EmptyInput(_))
        ));
        let a = trace(vec![vec![1.0, 2.0]]);
        let b = trace(vec![vec![1.0, 2.0, 3.0]]);
        assert!(compute_centroids(&[a, b], 1, LayerRange::new(1, 1)).is_err());
    }

    #[test]
    fn cosine_self_orthogonal_and_hand_value() {
        let t = trace(vec![vec![1.0, 2.0, 2.0], vec![1.0, 0.0], vec![0.0, 0.0]]);
        let cents = ClassCentroids {
            class: 1,
            range: LayerRange::new(1, 3),
            centroids: vec![vec![2.0, 1.0, 2.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            sample_count: 1,
        };
        let rec = layerwise_cosine(&t, &cents).unwrap();
        // (1,2,2)·(2,1,2) = 8, norms 3 and 3.
        assert!((rec.at(1) - 8.0 / 9.0).abs() < 1e-12);
        // Orthogonal vectors.
        assert_eq!(rec.at(2), 0.0);
        // Zero vector convention.
        assert_eq!(rec.at(3), 0.0);

        let self_sim = layerwise_cosine(
            &trace(vec![vec![2.0, 1.0, 2.0], vec![0.0, 1.0], vec![1.0, 1.0]]),
            &cents,
        )
        .unwrap();
        assert!((self_sim.at(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_profile_arithmetic() {
        let r1 = SimilarityRecord {
            range: LayerRange::new(3, 4),
            values: vec![0.2, 0.8],
        };
        let r2 = SimilarityRecord {
            range: LayerRange::new(3, 4),
            values: vec![0.4, 0.6],
        };
        let p = mean_profile(&[r1, r2], 1).unwrap();
        assert!((p.at(3) - 0.3).abs() < 1e-12);
        assert!((p.at(4) - 0.7).abs() < 1e-12);
        assert!(matches!(mean_profile(&[], 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn loi_single_dominant_jump() {
        let p = SimilarityProfile {
            class: 1,
            range: LayerRange::new(5, 9),
            values: vec![0.20, 0.30, 0.35, 0.90, 0.95],
        };
        assert_eq!(identify_loi(&p).unwrap(), 8);
    }

    #[test]
    fn loi_uniform_increments_keep_initialization() {
        // Steps of 0.25 are exactly representable, so all jumps compare
        // equal and strict > never updates past the first candidate.
        let p = SimilarityProfile {
            class: 1,
            range: LayerRange::new(4, 8),
            values: vec![0.25, 0.5, 0.75, 1.0, 1.25],
        };
        assert_eq!(identify_loi(&p).unwrap(), 5);
    }

    #[test]
    fn loi_rejects_short_profiles() {
        let p = SimilarityProfile {
            class: 1,
            range: LayerRange::new(5, 5),
            values: vec![0.2],
        };
        assert!(matches!(
            identify_loi(&p),
            Err(Error::ProfileTooShort { .. })
        ));
    }

    #[test]
    fn export_writes_rows_and_diff() {
        let benign = SimilarityProfile {
            class: 1,
            range: LayerRange::new(5, 9),
            values: vec![0.2, 0.3, 0.35, 0.9, 0.95],
        };
        let poisoned = SimilarityProfile {
            class: 1,
            range: LayerRange::new(5, 9),
            values: vec![0.15, 0.2, 0.1, 0.3, 0.9],
        };
        let dir = std::env::temp_dir().join("layerguard-export-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("profiles.csv");
        export_profiles(&benign, &poisoned, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "layer,benign_mean_cs,poisoned_mean_cs,diff");
        assert_eq!(lines[1], "5,0.200000,0.150000,0.050000");
        assert_eq!(lines[4], "8,0.900000,0.300000,0.600000");
        std::fs::remove_dir_all(&dir).ok();

        let short = SimilarityProfile {
            class: 1,
            range: LayerRange::new(5, 8),
            values: vec![0.0; 4],
        };
        let path2 = std::env::temp_dir().join("never-written.csv");
        assert!(export_profiles(&benign, &short, &path2).is_err());
    }
}
