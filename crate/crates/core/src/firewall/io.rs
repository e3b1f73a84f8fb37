//! Firewall model serialization.
//!
//! Binary layout (all integers little-endian, floats as raw IEEE-754 bits,
//! so files round-trip bit-exactly):
//!
//! ```text
//! magic        4 bytes  "LGFW"
//! version      u16      currently 1
//! metric       u8       0=cosine 1=euclidean
//! tau          f64
//! tap_count    u16
//! num_classes  u16
//! per class:
//!   class u16, loi u16, sample_count u32, mu f64, sigma f64,
//!   window_len u8,
//!   per window layer: layer u16, centroid_len u32, centroid f64*len
//! ```

use crate::error::Result;
use crate::firewall::{ClassCalibration, FirewallModel, Metric};
use crate::nn::io::{malformed, read_f64, read_u16, read_u32, write_f64, write_u16, write_u32};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub(crate) const FIREWALL_MAGIC: &[u8; 4] = b"LGFW";
const VERSION: u16 = 1;

pub fn save_firewall(fw: &FirewallModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIREWALL_MAGIC)?;
    write_u16(&mut w, VERSION)?;
    w.write_all(&[match fw.metric {
        Metric::Cosine => 0u8,
        Metric::Euclidean => 1,
    }])?;
    write_f64(&mut w, fw.tau)?;
    write_u16(&mut w, fw.tap_count as u16)?;
    write_u16(&mut w, fw.calibrations.len() as u16)?;
    for cal in &fw.calibrations {
        write_u16(&mut w, cal.class as u16)?;
        write_u16(&mut w, cal.loi as u16)?;
        write_u32(&mut w, cal.sample_count as u32)?;
        write_f64(&mut w, cal.mu)?;
        write_f64(&mut w, cal.sigma)?;
        w.write_all(&[cal.window.len() as u8])?;
        for (slot, &layer) in cal.window.iter().enumerate() {
            write_u16(&mut w, layer as u16)?;
            let centroid = &cal.centroids[slot];
            write_u32(&mut w, centroid.len() as u32)?;
            for &v in centroid {
                write_f64(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_firewall(path: &Path) -> Result<FirewallModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIREWALL_MAGIC {
        return Err(malformed(path, "bad magic, not a firewall file"));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    let mut metric_byte = [0u8; 1];
    r.read_exact(&mut metric_byte)?;
    let metric = match metric_byte[0] {
        0 => Metric::Cosine,
        1 => Metric::Euclidean,
        m => return Err(malformed(path, format!("unknown metric {m}"))),
    };
    let tau = read_f64(&mut r)?;
    let tap_count = read_u16(&mut r)? as usize;
    let num_classes = read_u16(&mut r)? as usize;
    let mut calibrations = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let class = read_u16(&mut r)? as usize;
        let loi = read_u16(&mut r)? as usize;
        let sample_count = read_u32(&mut r)? as usize;
        let mu = read_f64(&mut r)?;
        let sigma = read_f64(&mut r)?;
        let mut window_len = [0u8; 1];
        r.read_exact(&mut window_len)?;
        let mut window = Vec::with_capacity(window_len[0] as usize);
        let mut centroids = Vec::with_capacity(window_len[0] as usize);
        for _ in 0..window_len[0] {
            window.push(read_u16(&mut r)? as usize);
            let len = read_u32(&mut r)? as usize;
            let mut centroid = Vec::with_capacity(len);
            for _ in 0..len {
                centroid.push(read_f64(&mut r)?);
            }
            centroids.push(centroid);
        }
        calibrations.push(ClassCalibration {
            class,
            loi,
            window,
            centroids,
            mu,
            sigma,
            sample_count,
        });
    }
    Ok(FirewallModel {
        tau,
        metric,
        tap_count,
        calibrations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn firewall_round_trips_bit_exactly() {
        let fw = FirewallModel {
            tau: 2.5,
            metric: Metric::Cosine,
            tap_count: 6,
            calibrations: vec![
                ClassCalibration {
                    class: 1,
                    loi: 5,
                    window: vec![3, 4, 5],
                    centroids: vec![vec![0.1, 0.2], vec![0.3], vec![0.4, 0.5, 0.6]],
                    mu: 2.987654321,
                    sigma: 0.0123456789,
                    sample_count: 17,
                },
                ClassCalibration {
                    class: 2,
                    loi: 4,
                    window: vec![2, 3, 4],
                    centroids: vec![vec![-1.5], vec![2.25], vec![1e-17]],
                    mu: 1.0 / 3.0,
                    sigma: 2.0f64.sqrt(),
                    sample_count: 2,
                },
            ],
        };
        let dir = std::env::temp_dir().join("layerguard-fw-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fw.bin");
        save_firewall(&fw, &path).unwrap();
        let loaded = load_firewall(&path).unwrap();
        assert_eq!(loaded.tau.to_bits(), fw.tau.to_bits());
        assert_eq!(loaded.metric, fw.metric);
        assert_eq!(loaded.tap_count, fw.tap_count);
        for (a, b) in fw.calibrations.iter().zip(&loaded.calibrations) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.loi, b.loi);
            assert_eq!(a.window, b.window);
            assert_eq!(a.mu.to_bits(), b.mu.to_bits());
            assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
            assert_eq!(a.sample_count, b.sample_count);
            for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
                let bits_a: Vec<u64> = ca.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = cb.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
        let path2 = dir.join("fw2.bin");
        save_firewall(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
