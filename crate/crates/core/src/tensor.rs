//! Dense row-major `f64` tensors with shape metadata.
//!
//! Every value flowing through the crate lives in a [`Tensor`]: inputs,
//! parameters, embedding maps, gradients. Construction enforces that the
//! flat data length matches the shape product and that every element is
//! finite.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor contains a non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape dimensions must be positive, got {shape:?}")]
    EmptyDimension { shape: Vec<usize> },
}

/// Dense n-dimensional array of finite 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyDimension { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by already-validated kernels.
    /// Finiteness is checked by the evaluator at node granularity instead.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a rank-0/rank-1 singleton tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1 }));
        let err = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 0 }));
    }

    #[test]
    fn rejects_zero_dimension() {
        let err = Tensor::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyDimension { .. }));
    }

    #[test]
    fn shape_product_matches_len() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }
}
