//! Trainable feed-forward network engine with per-layer activation taps.
//!
//! A [`Network`] is an ordered list of layers; selected layers are marked as
//! *taps*. [`forward_traced`] emits the flattened output of every tap as an
//! [`ActivationTrace`], which is what the analysis and detection code
//! consumes. Taps are indexed 1..=L in layer order.

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod train;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A single layer: the operation plus whether its output is a tap point.
#[derive(Debug, Clone)]
pub struct LayerSpec<F = f32> {
    pub op: LayerOp<F>,
    pub is_tap: bool,
}

#[derive(Debug, Clone)]
pub enum LayerOp<F = f32> {
    /// Stride-1 convolution with symmetric zero padding.
    /// Weight shape `[out_c, in_c, k, k]`, bias length `out_c`.
    Conv {
        weight: Tensor<F>,
        bias: Vec<F>,
        padding: usize,
    },
    /// Fully connected layer. Weight shape `[out, in]`, bias length `out`.
    Dense { weight: Tensor<F>, bias: Vec<F> },
    Relu,
    /// Square max-pool with stride equal to the window size.
    MaxPool { size: usize },
    Flatten,
}

impl<F: Scalar> LayerOp<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Conv { .. } => "conv",
            LayerOp::Dense { .. } => "dense",
            LayerOp::Relu => "relu",
            LayerOp::MaxPool { .. } => "max-pool",
            LayerOp::Flatten => "flatten",
        }
    }

    fn param_count(&self) -> usize {
        match self {
            LayerOp::Conv { weight, bias, .. } | LayerOp::Dense { weight, bias } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }

    /// Output shape for a given input shape, or an error if incompatible.
    fn infer_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: Vec<usize>| Error::ShapeMismatch {
            expected,
            got: input.to_vec(),
        };
        match self {
            LayerOp::Conv {
                weight, padding, ..
            } => {
                let (co, ci, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                if input.len() != 3 || input[0] != ci {
                    return Err(bad(vec![ci, 0, 0]));
                }
                let (h, w) = (input[1], input[2]);
                if h + 2 * padding < k || w + 2 * padding < k {
                    return Err(bad(vec![ci, k, k]));
                }
                Ok(vec![co, h + 2 * padding - k + 1, w + 2 * padding - k + 1])
            }
            LayerOp::Dense { weight, .. } => {
                let (m, n) = (weight.shape()[0], weight.shape()[1]);
                if input.len() != 1 || input[0] != n {
                    return Err(bad(vec![n]));
                }
                Ok(vec![m])
            }
            LayerOp::Relu => Ok(input.to_vec()),
            LayerOp::MaxPool { size } => {
                if input.len() != 3 || input[1] % size != 0 || input[2] % size != 0 {
                    return Err(bad(input.to_vec()));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerOp::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Layered classifier with tap points. Immutable once built; training
/// produces a new instance.
#[derive(Debug, Clone)]
pub struct Network<F = f32> {
    layers: Vec<LayerSpec<F>>,
    input_shape: Vec<usize>,
    num_classes: usize,
    /// Layer positions whose outputs are taps, ascending.
    tap_layers: Vec<usize>,
    /// Flattened vector length at each tap.
    tap_widths: Vec<usize>,
}

/// Minimum number of tap points a network must expose.
pub const MIN_TAPS: usize = 4;

impl<F: Scalar> Network<F> {
    /// Validates layer shape compatibility and tap structure.
    pub fn new(layers: Vec<LayerSpec<F>>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidNetwork("need at least 2 classes".into()));
        }
        let mut shape = input_shape.clone();
        let mut tap_layers = Vec::new();
        let mut tap_widths = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.op.infer_shape(&shape).map_err(|e| {
                Error::InvalidNetwork(format!("layer {i} ({}): {e}", layer.op.kind_name()))
            })?;
            if layer.is_tap {
                tap_layers.push(i);
                tap_widths.push(shape.iter().product());
            }
        }
        if shape != [num_classes] {
            return Err(Error::InvalidNetwork(format!(
                "final layer outputs {shape:?}, expected [{num_classes}]"
            )));
        }
        if tap_layers.len() < MIN_TAPS {
            return Err(Error::InvalidNetwork(format!(
                "{} tap points, at least {MIN_TAPS} required",
                tap_layers.len()
            )));
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            tap_layers,
            tap_widths,
        })
    }

    pub fn layers(&self) -> &[LayerSpec<F>] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of tap points L.
    pub fn tap_count(&self) -> usize {
        self.tap_layers.len()
    }

    /// Layer index of each tap, ascending.
    pub fn tap_layers(&self) -> &[usize] {
        &self.tap_layers
    }

    /// Flattened feature width at each tap.
    pub fn tap_widths(&self) -> &[usize] {
        &self.tap_widths
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.op.param_count()).sum()
    }

    /// Copies all parameters into one flat vector, layer by layer, weights
    /// before biases. The order matches [`Network::assign_params`] and the
    /// gradient vectors returned by the backward pass.
    pub fn flatten_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match &layer.op {
                LayerOp::Conv { weight, bias, .. } | LayerOp::Dense { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn assign_params(&mut self, params: &[F]) {
        assert_eq!(params.len(), self.param_count());
        let mut off = 0;
        for layer in &mut self.layers {
            match &mut layer.op {
                LayerOp::Conv { weight, bias, .. } | LayerOp::Dense { weight, bias } => {
                    let wl = weight.len();
                    weight.data_mut().copy_from_slice(&params[off..off + wl]);
                    off += wl;
                    let bl = bias.len();
                    bias.copy_from_slice(&params[off..off + bl]);
                    off += bl;
                }
                _ => {}
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    op: match &l.op {
                        LayerOp::Conv {
                            weight,
                            bias,
                            padding,
                        } => LayerOp::Conv {
                            weight: weight.cast(),
                            bias: bias.iter().map(|v| G::from_double(v.to_double())).collect(),
                            padding: *padding,
                        },
                        LayerOp::Dense { weight, bias } => LayerOp::Dense {
                            weight: weight.cast(),
                            bias: bias.iter().map(|v| G::from_double(v.to_double())).collect(),
                        },
                        LayerOp::Relu => LayerOp::Relu,
                        LayerOp::MaxPool { size } => LayerOp::MaxPool { size: *size },
                        LayerOp::Flatten => LayerOp::Flatten,
                    },
                    is_tap: l.is_tap,
                })
                .collect(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            tap_layers: self.tap_layers.clone(),
            tap_widths: self.tap_widths.clone(),
        }
    }
}

/// Softmax probabilities and the winning class of one forward pass.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    /// Raw final-layer outputs, length C.
    pub logits: Vec<f32>,
    /// Softmax of the logits; sums to 1.
    pub probabilities: Vec<f32>,
    /// 1-based class with the highest probability.
    pub predicted_class: usize,
}

/// Flattened feature vectors collected at every tap, indexed 1..=L.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    taps: Vec<Vec<f32>>,
}

impl ActivationTrace {
    pub fn new(taps: Vec<Vec<f32>>) -> Self {
        Self { taps }
    }

    /// Number of taps L.
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Feature vector at 1-based tap index `l`.
    pub fn tap(&self, l: usize) -> &[f32] {
        &self.taps[l - 1]
    }

    pub fn tap_mut(&mut self, l: usize) -> &mut Vec<f32> {
        &mut self.taps[l - 1]
    }

    pub fn taps(&self) -> &[Vec<f32>] {
        &self.taps
    }
}

/// Numerically stable softmax.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// All layer outputs for one input, in layer order. `cache.last()` is the
/// logits tensor.
pub(crate) fn forward_cache<F: Scalar>(net: &Network<F>, x: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    if x.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    let mut cache = Vec::with_capacity(net.layers.len());
    let mut cur = x;
    for layer in &net.layers {
        let out = match &layer.op {
            LayerOp::Conv {
                weight,
                bias,
                padding,
            } => layers::conv_forward(cur, weight, bias, *padding),
            LayerOp::Dense { weight, bias } => layers::dense_forward(cur, weight, bias),
            LayerOp::Relu => layers::relu_forward(cur),
            LayerOp::MaxPool { size } => layers::maxpool_forward(cur, *size),
            LayerOp::Flatten => cur.reshaped(vec![cur.len()])?,
        };
        cache.push(out);
        cur = cache.last().unwrap();
    }
    Ok(cache)
}

fn prediction_from_logits(logits: &Tensor<f32>) -> PredictionResult {
    let probabilities = softmax(logits.data());
    // First maximal entry wins ties.
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    PredictionResult {
        logits: logits.data().to_vec(),
        probabilities,
        predicted_class: best + 1,
    }
}

/// Runs the network on `x` and returns logits, probabilities, and the
/// predicted class.
pub fn forward(net: &Network, x: &Tensor) -> Result<PredictionResult> {
    let cache = forward_cache(net, x)?;
    Ok(prediction_from_logits(cache.last().unwrap()))
}

/// Like [`forward`], additionally collecting the flattened output of every
/// tap point.
pub fn forward_traced(net: &Network, x: &Tensor) -> Result<(PredictionResult, ActivationTrace)> {
    let cache = forward_cache(net, x)?;
    let taps = net
        .tap_layers
        .iter()
        .map(|&i| cache[i].data().to_vec())
        .collect();
    Ok((
        prediction_from_logits(cache.last().unwrap()),
        ActivationTrace::new(taps),
    ))
}

/// Cross-entropy loss of `logits` against 1-based `label`, and its gradient
/// with respect to the logits (`softmax - onehot`).
pub(crate) fn cross_entropy<F: Scalar>(logits: &[F], label: usize) -> (F, Vec<F>) {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &v in logits {
        sum += (v - max).exp();
    }
    let log_sum = sum.ln() + max;
    let loss = log_sum - logits[label - 1];
    let mut grad: Vec<F> = logits.iter().map(|&v| (v - log_sum).exp()).collect();
    grad[label - 1] -= F::one();
    (loss, grad)
}

/// Backpropagates `d_logits` (and optional extra gradients injected at tap
/// outputs) to a flat parameter-gradient vector aligned with
/// [`Network::flatten_params`].
///
/// `tap_grads`, when present, holds one optional gradient per tap (1..=L in
/// slot l-1) on the flattened tap output; it is added to the downstream
/// gradient before the tap's layer is traversed.
pub(crate) fn backward_flat<F: Scalar>(
    net: &Network<F>,
    input: &Tensor<F>,
    cache: &[Tensor<F>],
    d_logits: Vec<F>,
    tap_grads: Option<&[Option<Vec<F>>]>,
) -> Vec<F> {
    let mut grads = vec![F::zero(); net.param_count()];
    // Parameter offset of each layer in the flat vector.
    let mut offsets = Vec::with_capacity(net.layers.len());
    let mut off = 0;
    for layer in &net.layers {
        offsets.push(off);
        off += layer.op.param_count();
    }

    let logits_shape = cache.last().unwrap().shape().to_vec();
    let mut grad_out = Tensor::new(logits_shape, d_logits).expect("finite logits gradient");
    let mut tap_slot = net.tap_layers.len();

    for (i, layer) in net.layers.iter().enumerate().rev() {
        if layer.is_tap {
            tap_slot -= 1;
            if let Some(extra) = tap_grads.and_then(|t| t[tap_slot].as_ref()) {
                debug_assert_eq!(extra.len(), grad_out.len());
                for (g, e) in grad_out.data_mut().iter_mut().zip(extra) {
                    *g += *e;
                }
            }
        }
        let layer_input = if i == 0 { input } else { &cache[i - 1] };
        grad_out = match &layer.op {
            LayerOp::Conv {
                weight, padding, ..
            } => {
                let (gin, gw, gb) = layers::conv_backward(layer_input, weight, *padding, &grad_out);
                let o = offsets[i];
                grads[o..o + gw.len()].copy_from_slice(gw.data());
                grads[o + gw.len()..o + gw.len() + gb.len()].copy_from_slice(&gb);
                gin
            }
            LayerOp::Dense { weight, .. } => {
                let (gin, gw, gb) = layers::dense_backward(layer_input, weight, &grad_out);
                let o = offsets[i];
                grads[o..o + gw.len()].copy_from_slice(gw.data());
                grads[o + gw.len()..o + gw.len() + gb.len()].copy_from_slice(&gb);
                gin
            }
            LayerOp::Relu => layers::relu_backward(layer_input, &grad_out),
            LayerOp::MaxPool { size } => layers::maxpool_backward(layer_input, *size, &grad_out),
            LayerOp::Flatten => grad_out.reshaped(layer_input.shape().to_vec()).unwrap(),
        };
    }
    grads
}

/// He-style fan-in scaled normal initializer.
fn he_normal<F: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| F::from_double(dist.sample(rng))).collect()
}

/// Seeded conv layer with He initialization and zero bias.
pub fn conv_layer(
    rng: &mut ChaCha8Rng,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    padding: usize,
    is_tap: bool,
) -> LayerSpec {
    let fan_in = in_channels * kernel * kernel;
    let weight = Tensor::new(
        vec![out_channels, in_channels, kernel, kernel],
        he_normal(rng, fan_in, out_channels * fan_in),
    )
    .expect("finite init");
    LayerSpec {
        op: LayerOp::Conv {
            weight,
            bias: vec![0.0; out_channels],
            padding,
        },
        is_tap,
    }
}

/// Seeded dense layer with He initialization and zero bias.
pub fn dense_layer(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, is_tap: bool) -> LayerSpec {
    let weight = Tensor::new(
        vec![outputs, inputs],
        he_normal(rng, inputs, outputs * inputs),
    )
    .expect("finite init");
    LayerSpec {
        op: LayerOp::Dense {
            weight,
            bias: vec![0.0; outputs],
        },
        is_tap,
    }
}

pub fn relu_layer(is_tap: bool) -> LayerSpec {
    LayerSpec {
        op: LayerOp::Relu,
        is_tap,
    }
}

pub fn maxpool_layer(size: usize, is_tap: bool) -> LayerSpec {
    LayerSpec {
        op: LayerOp::MaxPool { size },
        is_tap,
    }
}

pub fn flatten_layer(is_tap: bool) -> LayerSpec {
    LayerSpec {
        op: LayerOp::Flatten,
        is_tap,
    }
}

/// Seeded RNG used for all weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds a small dense classifier `dims[0] -> ... -> dims.last()` with ReLU
/// after every hidden layer. Hidden dense and ReLU outputs are taps; the
/// logits layer is neither activated nor tapped. Needs at least two hidden
/// layers to satisfy the tap minimum.
pub fn dense_network(dims: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    assert!(dims.len() >= 4, "need at least two hidden layers");
    assert_eq!(*dims.last().unwrap(), num_classes);
    let mut rng = init_rng(seed);
    let mut layers = Vec::new();
    for w in dims[..dims.len() - 1].windows(2) {
        layers.push(dense_layer(&mut rng, w[0], w[1], true));
        layers.push(relu_layer(true));
    }
    layers.push(dense_layer(
        &mut rng,
        dims[dims.len() - 2],
        num_classes,
        false,
    ));
    Network::new(layers, vec![dims[0]], num_classes)
}

#[allow(unused)]
fn ensure_rng_is_send() {
    fn check<T: Send>() {}
    check::<ChaCha8Rng>();
}
