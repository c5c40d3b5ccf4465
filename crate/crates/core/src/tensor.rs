//! Dense n-dimensional tensors, the universal value type of the autodiff core.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense tensor with an optional gradient buffer.
///
/// Invariants enforced by every constructor:
/// - `shape.iter().product() == data.len()`
/// - all stored values are finite (NaN/Inf rejected)
/// - `grad`, when present, has the same length as `data`
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], grad: None, requires_grad: false }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: Vec<usize>, value: S) -> Result<Self> {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    /// 1-element tensor holding a scalar.
    pub fn scalar(value: S) -> Result<Self> {
        Self::from_vec(vec![1], vec![value])
    }

    /// Mark this tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                detail: format!("expected 1 element, got {}", self.numel()),
            });
        }
        Ok(self.data[0])
    }

    /// Overwrite the data buffer in place; shape is unchanged.
    pub(crate) fn set_data(&mut self, data: Vec<S>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} elements, got {}", self.data.len(), data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        self.data = data;
        Ok(())
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<S>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
}

impl<S: Scalar> Tensor<S> {
    /// Mutate one element; training updates go through here or `set_data`.
    pub fn update(&mut self, f: impl Fn(usize, S) -> S) -> Result<()> {
        let updated: Vec<S> = self.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        self.set_data(updated)
    }
}
