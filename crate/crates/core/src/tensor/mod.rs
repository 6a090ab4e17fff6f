//! Dense row-major tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]s (shape + shared storage). Computation is recorded on a
//! [`Graph`]; every operation returns a [`Var`] handle into the graph and registers its
//! backward rule when any input requires a gradient.
//!
//! Broadcasting is limited to scalar-against-tensor. Everything else must be aligned
//! explicitly (`tile`, `bias_add`, `reshape`, ...).

mod density;
mod elementwise;
pub(crate) mod gemm;
mod gradcheck;
mod graph;
mod linalg;
mod nn;
mod shape_ops;
mod spatial;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use density::bin_centers;
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Graph, Var};
pub use spatial::{box_sum_values, sample_point};

/// Scalar type of the engine. `f32` by default; the `f64` feature widens it.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Sentinel index in gather maps meaning "emit zero" (used for zero padding).
pub const PAD_INDEX: u32 = u32::MAX;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: input outside the domain ({msg})")]
    Domain { op: &'static str, msg: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type TResult<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array with shared, copy-on-write storage.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> TResult<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::invalid(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub(crate) fn with_storage(shape: Vec<usize>, data: Arc<Vec<Real>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: Real) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// Builds a tensor from `f64` values, rounding to [`Real`].
    pub fn from_f64(shape: &[usize], data: &[f64]) -> TResult<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as Real).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub(crate) fn storage(&self) -> &Arc<Vec<Real>> {
        &self.data
    }

    /// Mutable access; clones the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [Real] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<Real> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> TResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor::with_storage(shape.to_vec(), self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn data_mut_copies_shared_storage() {
        let a = Tensor::full(&[3], 1.0);
        let mut b = a.clone();
        b.data_mut()[0] = 7.0;
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.data(), &[7.0, 1.0, 1.0]);
    }
}
