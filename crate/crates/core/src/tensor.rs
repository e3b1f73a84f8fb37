//! Dense n-dimensional arrays in row-major order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Scalar type the numeric kernels are generic over.
///
/// Training runs at `f32`; the gradient checker re-runs the same kernels at
/// `f64` so finite differences are not drowned by rounding noise.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Default + Send + Sync + std::fmt::Debug + 'static
{
    fn from_double(x: f64) -> Self;
    fn to_double(self) -> f64;
}

impl Scalar for f32 {
    fn from_double(x: f64) -> Self {
        x as f32
    }
    fn to_double(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_double(x: f64) -> Self {
        x
    }
    fn to_double(self) -> f64 {
        self
    }
}

/// Dense real-valued tensor. Data is stored row-major; the element at
/// multi-index `(i, j, k)` of a `[a, b, c]` tensor lives at `(i*b + j)*c + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, validating that the data length matches the shape
    /// product and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::LengthMismatch {
                shape,
                len: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Element of a rank-3 tensor at `(plane, row, col)`.
    #[inline]
    pub fn at3(&self, plane: usize, row: usize, col: usize) -> F {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(plane * h + row) * w + col]
    }

    #[inline]
    pub fn set3(&mut self, plane: usize, row: usize, col: usize, value: F) {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(plane * h + row) * w + col] = value;
    }

    /// Converts the tensor to another scalar type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_double(v.to_double())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_product() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0f32, f32::NAN]),
            Err(Error::NonFiniteValue)
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::INFINITY]),
            Err(Error::NonFiniteValue)
        ));
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rank3_indexing_is_row_major() {
        let t = Tensor::from_fn(vec![2, 2, 3], |i| i as f32);
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 1, 2), 5.0);
        assert_eq!(t.at3(1, 0, 1), 7.0);
    }

    #[test]
    fn reshape_preserves_element_count() {
        let t = Tensor::from_fn(vec![2, 6], |i| i as f32);
        let r = t.reshaped(vec![12]).unwrap();
        assert_eq!(r.shape(), &[12]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![5]).is_err());
    }
}
