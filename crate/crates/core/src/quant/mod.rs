//! Asymmetric affine quantization at 2 to 8 bits.
//!
//! A tensor `r` is mapped onto signed codes with
//!
//! ```text
//! scale      = (max(r) - min(r)) / (qmax - qmin)
//! zero_point = qmin - trunc(min(r) / scale)
//! code       = clamp(round(r / scale) + zero_point, qmin, qmax)
//! r'         = (code - zero_point) * scale
//! ```
//!
//! `round` is half-away-from-zero and `trunc` rounds toward zero. Because the
//! zero point is truncated rather than rounded, the lattice can sit up to one
//! step off the data range; the clamp keeps every code representable at the
//! requested width. A tensor whose values are all equal has no range and is
//! quantized with a substitute scale of 1.0.

mod affine;
mod bitwidth;
mod metrics;
mod tensor;

pub use affine::{
    compute_scale, compute_zero_point, dequantize, quantize, roundtrip, AffineQuantizer,
    QuantParams, QuantizedTensor, Quantizer, DEGENERATE_SCALE,
};
pub use bitwidth::BitWidth;
pub use metrics::{quantization_mse, relative_qe, relative_qe_stats, RqeStats, RQE_EPSILON};
pub use tensor::Tensor;
