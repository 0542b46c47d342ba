//! Dense n-dimensional tensors.
//!
//! Feature maps use the `(batch, channels, height, width)` layout. A tensor
//! owns its contiguous buffer; gradient bookkeeping lives on the tape, not
//! here, so plain tensors are freely shareable across threads for read-only
//! inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::scalar::Scalar;

/// Errors produced by tensor and layer operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    /// Buffer length does not match the product of the shape extents.
    DataLength { expected: usize, got: usize },
    /// Two operands have incompatible shapes for the requested operation.
    ShapeMismatch { context: String },
    /// Channel count is not divisible by the group count.
    BadGroups { channels: usize, groups: usize },
    /// Convolution arithmetic produced an empty output.
    ZeroSizeOutput { dim: &'static str },
    /// An operation produced or received a NaN/Inf value.
    NonFinite { context: String },
    /// A scalar was required (loss reduction, finite-difference probe).
    NotScalar { len: usize },
    /// Backward was called twice on the same tape.
    TapeConsumed,
    /// Invalid structural parameter (zero experts, empty dilation set, ...).
    BadParameter { context: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "buffer length {got} does not match shape volume {expected}")
            }
            TensorError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            TensorError::BadGroups { channels, groups } => {
                write!(f, "{channels} channels not divisible by {groups} groups")
            }
            TensorError::ZeroSizeOutput { dim } => {
                write!(f, "convolution output has zero size along {dim}")
            }
            TensorError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            TensorError::NotScalar { len } => {
                write!(f, "expected a scalar tensor, got {len} elements")
            }
            TensorError::TapeConsumed => write!(f, "tape already consumed by backward"),
            TensorError::BadParameter { context } => write!(f, "invalid parameter: {context}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TensorError {}

pub type Result<T> = core::result::Result<T, TensorError>;

/// Dense tensor with a contiguous row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let volume: usize = shape.iter().product();
        if volume != data.len() {
            return Err(TensorError::DataLength { expected: volume, got: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let volume: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); volume] }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let volume: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; volume] }
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar { len: self.data.len() });
        }
        Ok(self.data[0])
    }

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let volume: usize = shape.iter().product();
        if volume != self.data.len() {
            return Err(TensorError::DataLength { expected: volume, got: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Batch size of an NCHW tensor.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// (batch, channels, height, width) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                context: format!("expected rank-4 tensor, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { context: String::from(context) });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise accumulate `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(TensorError::ShapeMismatch {
                context: format!("add_assign {:?} vs {:?}", self.shape, other.shape),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Convert elementwise to a different precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_mismatch_is_rejected() {
        let r = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]);
        assert_eq!(r, Err(TensorError::DataLength { expected: 6, got: 5 }));
    }

    #[test]
    fn finiteness_check_flags_nan() {
        let t = Tensor::<f64>::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
        let t = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(t.check_finite("test").is_ok());
    }

    #[test]
    fn cast_round_trips_through_f32() {
        let t = Tensor::<f64>::new(&[3], vec![1.0, 0.5, -2.25]).unwrap();
        let f: Tensor<f32> = t.cast();
        let back: Tensor<f64> = f.cast();
        assert_eq!(t, back);
    }
}
