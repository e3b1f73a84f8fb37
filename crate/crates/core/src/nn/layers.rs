//! Per-layer forward and backward kernels.
//!
//! All kernels are plain loops over row-major buffers, generic over the
//! scalar type so the same code runs at `f32` for training and `f64` for
//! gradient checking. Convolutions use stride 1 with symmetric zero padding;
//! max-pooling uses a square window with stride equal to the window size.

use crate::tensor::{Scalar, Tensor};

/// `input [ci,h,w]`, `weight [co,ci,k,k]`, `bias [co]` -> `[co, h', w']`
/// with `h' = h + 2*pad - k + 1`.
pub fn conv_forward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &[F],
    pad: usize,
) -> Tensor<F> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    debug_assert_eq!(weight.shape()[1], ci);
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let mut out = Tensor::zeros(vec![co, ho, wo]);
    let xd = input.data();
    let wd = weight.data();
    let od = out.data_mut();
    for oc in 0..co {
        let w_oc = &wd[oc * ci * k * k..(oc + 1) * ci * k * k];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[oc];
                for ic in 0..ci {
                    let w_ic = &w_oc[ic * k * k..(ic + 1) * k * k];
                    let x_ic = &xd[ic * h * w..(ic + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &x_ic[iy as usize * w..(iy as usize + 1) * w];
                        let wrow = &w_ic[ky * k..(ky + 1) * k];
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wrow[kx] * row[ix as usize];
                        }
                    }
                }
                od[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Backward pass of [`conv_forward`]. Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    pad: usize,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Vec<F>) {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);
    let mut gin = Tensor::zeros(vec![ci, h, w]);
    let mut gw = Tensor::zeros(weight.shape().to_vec());
    let mut gb = vec![F::zero(); co];
    let xd = input.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let gid = gin.data_mut();
    let gwd = gw.data_mut();
    for oc in 0..co {
        let w_oc = &wd[oc * ci * k * k..(oc + 1) * ci * k * k];
        let gw_oc = &mut gwd[oc * ci * k * k..(oc + 1) * ci * k * k];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gd[(oc * ho + oy) * wo + ox];
                if g == F::zero() {
                    continue;
                }
                gb[oc] += g;
                for ic in 0..ci {
                    let base_w = ic * k * k;
                    let base_x = ic * h * w;
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = base_x + iy as usize * w + ix as usize;
                            let wi = base_w + ky * k + kx;
                            gw_oc[wi] += g * xd[xi];
                            gid[xi] += g * w_oc[wi];
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// `input [n]`, `weight [m,n]`, `bias [m]` -> `[m]`.
pub fn dense_forward<F: Scalar>(input: &Tensor<F>, weight: &Tensor<F>, bias: &[F]) -> Tensor<F> {
    let n = input.len();
    let m = weight.shape()[0];
    debug_assert_eq!(weight.shape()[1], n);
    let xd = input.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(vec![m]);
    for (j, o) in out.data_mut().iter_mut().enumerate() {
        let row = &wd[j * n..(j + 1) * n];
        let mut acc = bias[j];
        for (wv, xv) in row.iter().zip(xd) {
            acc += *wv * *xv;
        }
        *o = acc;
    }
    out
}

/// Backward pass of [`dense_forward`]. Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Vec<F>) {
    let n = input.len();
    let m = weight.shape()[0];
    let xd = input.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let mut gin = Tensor::zeros(vec![n]);
    let mut gw = Tensor::zeros(vec![m, n]);
    let gwd = gw.data_mut();
    let gid = gin.data_mut();
    for j in 0..m {
        let g = gd[j];
        let row = &wd[j * n..(j + 1) * n];
        let grow = &mut gwd[j * n..(j + 1) * n];
        for i in 0..n {
            grow[i] = g * xd[i];
            gid[i] += g * row[i];
        }
    }
    (gin, gw, gd.to_vec())
}

pub fn relu_forward<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    out
}

/// Gradient flows only where the input was strictly positive.
pub fn relu_backward<F: Scalar>(input: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let mut gin = grad_out.clone();
    for (g, x) in gin.data_mut().iter_mut().zip(input.data()) {
        if *x <= F::zero() {
            *g = F::zero();
        }
    }
    gin
}

/// `input [c,h,w]` -> `[c, h/size, w/size]`, taking the max of each window.
pub fn maxpool_forward<F: Scalar>(input: &Tensor<F>, size: usize) -> Tensor<F> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ho, wo) = (h / size, w / size);
    let mut out = Tensor::zeros(vec![c, ho, wo]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = input.at3(ch, oy * size, ox * size);
                for ky in 0..size {
                    for kx in 0..size {
                        let v = input.at3(ch, oy * size + ky, ox * size + kx);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.set3(ch, oy, ox, best);
            }
        }
    }
    out
}

/// Routes each output gradient to the first maximal element of its window,
/// matching the scan order of [`maxpool_forward`].
pub fn maxpool_backward<F: Scalar>(
    input: &Tensor<F>,
    size: usize,
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ho, wo) = (h / size, w / size);
    let mut gin = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut best_y, mut best_x) = (oy * size, ox * size);
                let mut best = input.at3(ch, best_y, best_x);
                for ky in 0..size {
                    for kx in 0..size {
                        let (iy, ix) = (oy * size + ky, ox * size + kx);
                        let v = input.at3(ch, iy, ix);
                        if v > best {
                            best = v;
                            best_y = iy;
                            best_x = ix;
                        }
                    }
                }
                let g = grad_out.at3(ch, oy, ox);
                let cur = gin.at3(ch, best_y, best_x);
                gin.set3(ch, best_y, best_x, cur + g);
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 1x1 kernel with weight 1 and no padding is the identity map.
        let x = Tensor::from_fn(vec![1, 3, 3], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv_forward(&x, &w, &[0.0], 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_hand_computed_3x3() {
        // Single 3x3 input, 3x3 averaging-like kernel of ones, pad 1:
        // the center output is the sum of all inputs.
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv_forward(&x, &w, &[0.5], 1);
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.at3(0, 1, 1), 45.0 + 0.5);
        // Top-left output only sees the 2x2 corner.
        assert_eq!(y.at3(0, 0, 0), (1 + 2 + 4 + 5) as f64 + 0.5);
    }

    #[test]
    fn dense_matches_hand_product() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 1.0, -0.5]).unwrap();
        let y = dense_forward(&x, &w, &[0.5, -0.5]);
        assert_eq!(y.data(), &[-2.0 + 0.5, 1.0 - 0.5]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = Tensor::new(
            vec![1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 1.0, //
                3.0, 4.0, 2.0, 0.0, //
                0.0, 1.0, 1.0, 1.0, //
                9.0, 0.0, 1.0, 2.0,
            ],
        )
        .unwrap();
        let y = maxpool_forward(&x, 2);
        assert_eq!(y.data(), &[4.0, 5.0, 9.0, 2.0]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 7.0, 3.0, 2.0]).unwrap();
        let g = Tensor::new(vec![1, 1, 1], vec![2.5]).unwrap();
        let gin = maxpool_backward(&x, 2, &g);
        assert_eq!(gin.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn relu_masks_negative_inputs() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let gin = relu_backward(&x, &g);
        assert_eq!(gin.data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
