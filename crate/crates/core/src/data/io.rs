//! Dataset files and poisoning manifests.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "LGDS"
//! version      u16      currently 1
//! count        u32      number of samples
//! num_classes  u16
//! channels     u16
//! height       u16
//! width        u16
//! pixels       f32 * count*channels*height*width, sample-major CHW
//! labels       u16 * count, 1-based
//! ```
//!
//! A poisoned dataset is accompanied by a JSON manifest listing the
//! [`PoisonSpec`](crate::poison::PoisonSpec) used and the poisoned indices.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::io::{malformed, read_f32_vec, read_u16, read_u32, write_f32_slice, write_u16, write_u32};
use crate::poison::PoisonSpec;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DATASET_MAGIC: &[u8; 4] = b"LGDS";
const VERSION: u16 = 1;

/// Writes samples (uniform shape required) and their labels.
pub fn save_dataset(samples: &[ImageSample], num_classes: usize, path: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = samples[0].pixels.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            got: shape,
        });
    }
    for s in samples {
        if s.pixels.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.clone(),
                got: s.pixels.shape().to_vec(),
            });
        }
        if s.label < 1 || s.label > num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                num_classes,
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    write_u16(&mut w, VERSION)?;
    write_u32(&mut w, samples.len() as u32)?;
    write_u16(&mut w, num_classes as u16)?;
    write_u16(&mut w, shape[0] as u16)?;
    write_u16(&mut w, shape[1] as u16)?;
    write_u16(&mut w, shape[2] as u16)?;
    for s in samples {
        write_f32_slice(&mut w, s.pixels.data())?;
    }
    for s in samples {
        write_u16(&mut w, s.label as u16)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file back; returns the samples and the class count.
pub fn load_dataset(path: &Path) -> Result<(Vec<ImageSample>, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(malformed(path, "bad magic, not a dataset file"));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let num_classes = read_u16(&mut r)? as usize;
    let channels = read_u16(&mut r)? as usize;
    let height = read_u16(&mut r)? as usize;
    let width = read_u16(&mut r)? as usize;
    let pixels_per = channels * height * width;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let data = read_f32_vec(&mut r, pixels_per)?;
        samples.push(ImageSample {
            pixels: Tensor::new(vec![channels, height, width], data)
                .map_err(|e| malformed(path, format!("bad pixel data: {e}")))?,
            label: 0,
        });
    }
    for s in &mut samples {
        let label = read_u16(&mut r)? as usize;
        if label < 1 || label > num_classes {
            return Err(malformed(path, format!("label {label} out of range")));
        }
        s.label = label;
    }
    Ok((samples, num_classes))
}

/// Companion manifest for a poisoned dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonManifest {
    pub spec: PoisonSpec,
    pub poisoned_indices: Vec<usize>,
}

pub fn save_poison_manifest(manifest: &PoisonManifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_poison_manifest(path: &Path) -> Result<PoisonManifest> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, SyntheticDatasetConfig};

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let cfg = SyntheticDatasetConfig {
            train_count: 24,
            test_count: 8,
            seed: 9,
            ..SyntheticDatasetConfig::default()
        };
        let (train, _) = gen_synthetic_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join("layerguard-ds-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.bin");
        save_dataset(&train, cfg.num_classes, &path).unwrap();
        let (loaded, classes) = load_dataset(&path).unwrap();
        assert_eq!(classes, cfg.num_classes);
        assert_eq!(loaded, train);
        let path2 = dir.join("train2.bin");
        save_dataset(&loaded, classes, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_counts_match_content() {
        let cfg = SyntheticDatasetConfig {
            train_count: 10,
            test_count: 5,
            seed: 2,
            ..SyntheticDatasetConfig::default()
        };
        let (_, test) = gen_synthetic_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join("layerguard-ds-hdr-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.bin");
        save_dataset(&test, cfg.num_classes, &path).unwrap();
        let (loaded, _) = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        assert_eq!(loaded[0].pixels.shape(), &[1, 16, 16]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
