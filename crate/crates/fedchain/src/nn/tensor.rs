//! Row-major double-precision tensors.

use super::NnError;

/// An n-dimensional array of f64 values in row-major order. The value count
/// always equals the product of the shape dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    /// Reinterpret the same values under a new shape with equal product.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if self.data.len() != expected {
            return Err(NnError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Copy out rows [start, end) along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, NnError> {
        let n = *self.shape.first().ok_or_else(|| {
            NnError::ShapeMismatch("cannot slice a rank-0 tensor".into())
        })?;
        if start > end || end > n {
            return Err(NnError::ShapeMismatch(format!(
                "row range {start}..{end} outside 0..{n}"
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        })
    }

    /// Error if any value is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<(), NnError> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(format!(
                "{context}: value at flat index {pos}"
            )));
        }
        Ok(())
    }
}
