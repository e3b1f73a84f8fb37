//! Trigger injection and dataset poisoning.
//!
//! Two trigger families are supported: a corner patch that overwrites a
//! small pixel block, and a blended full-image pattern mixed in at a fixed
//! ratio. Poisoning is dirty-label: triggered training samples are relabeled
//! to the target class.

pub mod adaptive;

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where a patch trigger is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchAnchor {
    /// Flush against the bottom-right image corner.
    BottomRight,
    /// Top-left corner of the patch at `(row, col)`.
    Offset { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerSpec {
    /// Overwrite a pixel block. `pixels` has shape `[channels, ph, pw]`.
    Patch { pixels: Tensor, anchor: PatchAnchor },
    /// Blend a full-size pattern: `out = img + blend_ratio * (pattern - img)`.
    Blended { pattern: Tensor, blend_ratio: f64 },
}

impl TriggerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TriggerSpec::Patch { .. } => "patch",
            TriggerSpec::Blended { .. } => "blended",
        }
    }
}

/// A complete poisoning recipe: trigger, target class, rate, and seed for
/// the sample selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub trigger: TriggerSpec,
    pub target_class: usize,
    pub poison_rate: f64,
    pub seed: u64,
}

impl PoisonSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.target_class < 1 || self.target_class > num_classes {
            return Err(Error::LabelOutOfRange {
                label: self.target_class,
                num_classes,
            });
        }
        if !(self.poison_rate > 0.0 && self.poison_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "poison_rate {} must be in (0,1)",
                self.poison_rate
            )));
        }
        if let TriggerSpec::Blended { blend_ratio, .. } = &self.trigger {
            if !(*blend_ratio > 0.0 && *blend_ratio < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "blend_ratio {blend_ratio} must be in (0,1)"
                )));
            }
        }
        Ok(())
    }
}

/// Stamps the patch into the image; pixels outside the patch region and the
/// label are untouched.
pub fn apply_patch_trigger(img: &ImageSample, trigger: &TriggerSpec) -> Result<ImageSample> {
    let TriggerSpec::Patch { pixels, anchor } = trigger else {
        return Err(Error::TriggerKindMismatch { expected: "patch" });
    };
    let (c, h, w) = (
        img.pixels.shape()[0],
        img.pixels.shape()[1],
        img.pixels.shape()[2],
    );
    let (pc, ph, pw) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if pc != c {
        return Err(Error::ShapeMismatch {
            expected: vec![c, ph, pw],
            got: pixels.shape().to_vec(),
        });
    }
    let (row, col) = match anchor {
        PatchAnchor::BottomRight => {
            if ph > h || pw > w {
                return Err(Error::PatchOutOfBounds {
                    row: 0,
                    col: 0,
                    height: ph,
                    width: pw,
                    image_height: h,
                    image_width: w,
                });
            }
            (h - ph, w - pw)
        }
        PatchAnchor::Offset { row, col } => (*row, *col),
    };
    if row + ph > h || col + pw > w {
        return Err(Error::PatchOutOfBounds {
            row,
            col,
            height: ph,
            width: pw,
            image_height: h,
            image_width: w,
        });
    }
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                out.pixels.set3(ch, row + y, col + x, pixels.at3(ch, y, x));
            }
        }
    }
    Ok(out)
}

/// Blends the pattern into the image: `out = clamp(img + r*(pattern - img))`.
pub fn apply_blended_trigger(img: &ImageSample, trigger: &TriggerSpec) -> Result<ImageSample> {
    let TriggerSpec::Blended {
        pattern,
        blend_ratio,
    } = trigger
    else {
        return Err(Error::TriggerKindMismatch { expected: "blended" });
    };
    if pattern.shape() != img.pixels.shape() {
        return Err(Error::ShapeMismatch {
            expected: img.pixels.shape().to_vec(),
            got: pattern.shape().to_vec(),
        });
    }
    let r = *blend_ratio as f32;
    let mut out = img.clone();
    for (o, p) in out.pixels.data_mut().iter_mut().zip(pattern.data()) {
        *o = (*o + r * (*p - *o)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Applies whichever trigger kind the spec carries.
pub fn apply_trigger(img: &ImageSample, trigger: &TriggerSpec) -> Result<ImageSample> {
    match trigger {
        TriggerSpec::Patch { .. } => apply_patch_trigger(img, trigger),
        TriggerSpec::Blended { .. } => apply_blended_trigger(img, trigger),
    }
}

/// Poisons a seeded `ceil(rate * N)`-subset of the training set: the trigger
/// is applied and labels are rewritten to the target class. Returns the new
/// set plus the sorted poisoned indices.
pub fn poison_train_set(
    train_set: &[ImageSample],
    spec: &PoisonSpec,
) -> Result<(Vec<ImageSample>, Vec<usize>)> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = train_set.len();
    let budget = spec.poison_rate * n as f64;
    if budget < 1.0 {
        return Err(Error::PoisonBudgetUnderflow {
            rate: spec.poison_rate,
            count: n,
        });
    }
    let count = budget.ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let mut poisoned: Vec<usize> = indices[..count].to_vec();
    poisoned.sort_unstable();

    let mut out = train_set.to_vec();
    for &i in &poisoned {
        let mut triggered = apply_trigger(&out[i], &spec.trigger)?;
        triggered.label = spec.target_class;
        out[i] = triggered;
    }
    Ok((out, poisoned))
}

/// Builds the poisoned test set: every sample whose true label differs from
/// the target gets the trigger; true-target samples are excluded. Labels
/// keep the original ground truth.
pub fn make_poisoned_test_set(
    test_set: &[ImageSample],
    spec: &PoisonSpec,
) -> Result<Vec<ImageSample>> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let poisoned: Vec<ImageSample> = test_set
        .iter()
        .filter(|s| s.label != spec.target_class)
        .map(|s| apply_trigger(s, &spec.trigger))
        .collect::<Result<_>>()?;
    if poisoned.is_empty() {
        return Err(Error::NoPoisonableSamples {
            target: spec.target_class,
        });
    }
    Ok(poisoned)
}

/// Constant-valued square patch, the classic corner trigger.
pub fn solid_patch(channels: usize, size: usize, value: f32) -> TriggerSpec {
    TriggerSpec::Patch {
        pixels: Tensor::new(
            vec![channels, size, size],
            vec![value; channels * size * size],
        )
        .expect("finite patch"),
        anchor: PatchAnchor::BottomRight,
    }
}

/// Seeded uniform-noise pattern covering the whole image.
pub fn noise_pattern(shape: &[usize], seed: u64) -> TriggerSpec {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    TriggerSpec::Blended {
        pattern: Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
            .expect("finite pattern"),
        blend_ratio: 0.1,
    }
}
