use crate::error::{Error, Result};
use crate::scalar::Real;

/// Flat row-major buffer of finite values with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    values: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting a shape/length mismatch or any NaN/Inf.
    ///
    /// Zero-length tensors are representable (shape `[0]`); the quantization
    /// routines reject them.
    pub fn new(values: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ShapeLength {
                shape,
                len: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Tensor { values, shape })
    }

    /// One-dimensional tensor.
    pub fn from_vec(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![n])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            values: vec![T::zero(); n],
            shape,
        }
    }

    pub(crate) fn from_parts_unchecked(values: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { values, shape }
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::ShapeLength {
                shape,
                len: self.values.len(),
            });
        }
        Ok(Tensor {
            values: self.values,
            shape,
        })
    }

    /// `(min, max)` over all values, `None` when empty.
    pub fn min_max(&self) -> Option<(T, T)> {
        let mut it = self.values.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Converts every element to another scalar type (rounding to nearest).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            values: self.values.iter().map(|v| U::narrow(v.widen())).collect(),
            shape: self.shape.clone(),
        }
    }
}
