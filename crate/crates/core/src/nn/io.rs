//! Model serialization.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "LGNN"
//! version      u16      currently 1
//! ndims        u8       rank of the input shape
//! input_shape  u32 * ndims
//! num_classes  u32
//! layer_count  u32
//! per layer:
//!   kind       u8       0=conv 1=dense 2=relu 3=max-pool 4=flatten
//!   is_tap     u8       0 or 1
//!   conv:      out_c u32, in_c u32, kernel u32, padding u32,
//!              weight f32*(out_c*in_c*kernel^2), bias f32*out_c
//!   dense:     out u32, in u32, weight f32*(out*in), bias f32*out
//!   max-pool:  size u32
//! ```
//!
//! Weights are stored as raw IEEE-754 bits, so save/load round-trips
//! bit-exactly.

use crate::error::{Error, Result};
use crate::nn::{LayerOp, LayerSpec, Network};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub(crate) const MODEL_MAGIC: &[u8; 4] = b"LGNN";
const VERSION: u16 = 1;

pub(crate) fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32_slice<W: Write>(w: &mut W, vs: &[f32]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    write_u16(&mut w, VERSION)?;
    w.write_all(&[net.input_shape().len() as u8])?;
    for &d in net.input_shape() {
        write_u32(&mut w, d as u32)?;
    }
    write_u32(&mut w, net.num_classes() as u32)?;
    write_u32(&mut w, net.layers().len() as u32)?;
    for layer in net.layers() {
        let kind: u8 = match layer.op {
            LayerOp::Conv { .. } => 0,
            LayerOp::Dense { .. } => 1,
            LayerOp::Relu => 2,
            LayerOp::MaxPool { .. } => 3,
            LayerOp::Flatten => 4,
        };
        w.write_all(&[kind, layer.is_tap as u8])?;
        match &layer.op {
            LayerOp::Conv {
                weight,
                bias,
                padding,
            } => {
                let s = weight.shape();
                write_u32(&mut w, s[0] as u32)?;
                write_u32(&mut w, s[1] as u32)?;
                write_u32(&mut w, s[2] as u32)?;
                write_u32(&mut w, *padding as u32)?;
                write_f32_slice(&mut w, weight.data())?;
                write_f32_slice(&mut w, bias)?;
            }
            LayerOp::Dense { weight, bias } => {
                let s = weight.shape();
                write_u32(&mut w, s[0] as u32)?;
                write_u32(&mut w, s[1] as u32)?;
                write_f32_slice(&mut w, weight.data())?;
                write_f32_slice(&mut w, bias)?;
            }
            LayerOp::MaxPool { size } => write_u32(&mut w, *size as u32)?,
            LayerOp::Relu | LayerOp::Flatten => {}
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(malformed(path, "bad magic, not a model file"));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    let mut ndims = [0u8; 1];
    r.read_exact(&mut ndims)?;
    let input_shape: Vec<usize> = (0..ndims[0])
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let num_classes = read_u32(&mut r)? as usize;
    let layer_count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        let is_tap = hdr[1] != 0;
        let op = match hdr[0] {
            0 => {
                let out_c = read_u32(&mut r)? as usize;
                let in_c = read_u32(&mut r)? as usize;
                let k = read_u32(&mut r)? as usize;
                let padding = read_u32(&mut r)? as usize;
                let weight = Tensor::new(
                    vec![out_c, in_c, k, k],
                    read_f32_vec(&mut r, out_c * in_c * k * k)?,
                )?;
                LayerOp::Conv {
                    weight,
                    bias: read_f32_vec(&mut r, out_c)?,
                    padding,
                }
            }
            1 => {
                let out = read_u32(&mut r)? as usize;
                let inp = read_u32(&mut r)? as usize;
                let weight = Tensor::new(vec![out, inp], read_f32_vec(&mut r, out * inp)?)?;
                LayerOp::Dense {
                    weight,
                    bias: read_f32_vec(&mut r, out)?,
                }
            }
            2 => LayerOp::Relu,
            3 => LayerOp::MaxPool {
                size: read_u32(&mut r)? as usize,
            },
            4 => LayerOp::Flatten,
            k => return Err(malformed(path, format!("unknown layer kind {k}"))),
        };
        layers.push(LayerSpec { is_tap, op });
    }
    Network::new(layers, input_shape, num_classes)
}
