//! Post-training mixed-precision weight quantization.
//!
//! The crate quantizes model weights with asymmetric affine (scale / zero-point)
//! quantization at 2 to 8 bits, measures per-layer quantization error, and
//! searches for the narrowest bit-width per layer whose error stays within a
//! user-chosen multiple of the int8 error.
//!
//! All math is generic over [`Real`] (implemented for `f32` and `f64`). The
//! on-disk formats are `f32`, and the `*32` / `*64` aliases below name the
//! common concrete instantiations.

pub mod error;
pub mod inference;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod search;
pub mod sensitivity;

pub use error::{Error, Result};
pub use model::{LayerRecord, LayerType, ModelWeights};
pub use quant::{
    compute_scale, compute_zero_point, dequantize, quantization_mse, quantize, relative_qe,
    AffineQuantizer, BitWidth, QuantParams, QuantizedTensor, Quantizer, Tensor,
};
pub use scalar::Real;
pub use search::{
    build_error_table, oracle_select, select_bitwidths, sweep_qems, BitAllocation, ErrorTable,
};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type QuantParams32 = QuantParams<f32>;
pub type QuantizedTensor32 = QuantizedTensor<f32>;
pub type QuantizedTensor64 = QuantizedTensor<f64>;
pub type LayerRecord32 = LayerRecord<f32>;
pub type ModelWeights32 = ModelWeights<f32>;
pub type ModelWeights64 = ModelWeights<f64>;
pub type ErrorTable32 = ErrorTable<f32>;
pub type ErrorTable64 = ErrorTable<f64>;
pub type BitAllocation32 = BitAllocation<f32>;
pub type BitAllocation64 = BitAllocation<f64>;
pub type EvalReport32 = inference::EvalReport<f32>;
pub type PositionRqeTable32 = sensitivity::PositionRqeTable<f32>;
