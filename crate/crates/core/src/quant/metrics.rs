use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Weights with `|w|` at or below this are left out of the relative error.
pub const RQE_EPSILON: f64 = 1e-12;

fn check_shapes<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Mean squared difference, accumulated in f64. Zero for empty tensors.
pub fn quantization_mse<T: Real>(original: &Tensor<T>, dequantized: &Tensor<T>) -> Result<T> {
    check_shapes(original, dequantized)?;
    if original.is_empty() {
        return Ok(T::zero());
    }
    let sum: f64 = original
        .values()
        .iter()
        .zip(dequantized.values())
        .map(|(&o, &d)| {
            let e = o.widen() - d.widen();
            e * e
        })
        .sum();
    Ok(T::narrow(sum / original.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqeStats<T> {
    /// Signed mean of `(w - w') / w` over the included elements.
    pub value: T,
    pub included: usize,
    /// Near-zero weights left out of the mean.
    pub excluded: usize,
}

/// Mean of `(original - dequantized) / original`, skipping near-zero weights.
pub fn relative_qe<T: Real>(original: &Tensor<T>, dequantized: &Tensor<T>) -> Result<T> {
    Ok(relative_qe_stats(original, dequantized)?.value)
}

pub fn relative_qe_stats<T: Real>(
    original: &Tensor<T>,
    dequantized: &Tensor<T>,
) -> Result<RqeStats<T>> {
    check_shapes(original, dequantized)?;
    let mut sum = 0.0f64;
    let mut included = 0usize;
    for (&o, &d) in original.values().iter().zip(dequantized.values()) {
        let o = o.widen();
        if o.abs() <= RQE_EPSILON {
            continue;
        }
        sum += (o - d.widen()) / o;
        included += 1;
    }
    let value = if included == 0 {
        0.0
    } else {
        sum / included as f64
    };
    Ok(RqeStats {
        value: T::narrow(value),
        included,
        excluded: original.len() - included,
    })
}
