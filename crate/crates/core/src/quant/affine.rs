use super::{BitWidth, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Scale used when a tensor has zero range (`max == min`).
pub const DEGENERATE_SCALE: f64 = 1.0;

/// Scale, zero point and width of one per-tensor affine mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams<T> {
    scale: T,
    zero_point: i64,
    bit_width: BitWidth,
}

impl<T: Real> QuantParams<T> {
    pub fn new(scale: T, zero_point: i64, bit_width: BitWidth) -> Result<Self> {
        if !(scale.is_finite() && scale > T::zero()) {
            return Err(Error::NonFinite);
        }
        Ok(QuantParams {
            scale,
            zero_point,
            bit_width,
        })
    }

    /// Fits scale and zero point to the range of `values`.
    pub fn fit(values: &[T], bit_width: BitWidth) -> Result<Self> {
        let (min, max) = finite_min_max(values)?;
        let range = max - min;
        if !range.is_finite() {
            return Err(Error::RangeOverflow);
        }
        let steps = T::from_i32(bit_width.steps()).expect("small integer");
        let mut scale = range / steps;
        // max == min, or a range so small the division underflows.
        if scale <= T::zero() {
            scale = T::narrow(DEGENERATE_SCALE);
        }
        let zero_point = bit_width.qmin() as i64 - saturating_i64((min / scale).trunc());
        Ok(QuantParams {
            scale,
            zero_point,
            bit_width,
        })
    }

    #[inline]
    pub fn scale(&self) -> T {
        self.scale
    }

    #[inline]
    pub fn zero_point(&self) -> i64 {
        self.zero_point
    }

    #[inline]
    pub fn bit_width(&self) -> BitWidth {
        self.bit_width
    }

    /// `round(v / scale) + zero_point` before clamping.
    #[inline]
    pub fn raw_code(&self, v: T) -> i64 {
        saturating_i64((v / self.scale).round()).saturating_add(self.zero_point)
    }

    #[inline]
    pub fn code(&self, v: T) -> i8 {
        let b = self.bit_width;
        self.raw_code(v).clamp(b.qmin() as i64, b.qmax() as i64) as i8
    }

    #[inline]
    pub fn value(&self, code: i8) -> T {
        let offset = code as i64 - self.zero_point;
        T::from_i64(offset).expect("i64 converts to float") * self.scale
    }
}

fn finite_min_max<T: Real>(values: &[T]) -> Result<(T, T)> {
    let first = *values.first().ok_or(Error::EmptyTensor)?;
    let mut lo = first;
    let mut hi = first;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Integer part of an already-integral float, saturating at the i64 range.
#[inline]
fn saturating_i64<T: Real>(v: T) -> i64 {
    v.to_i64()
        .unwrap_or(if v > T::zero() { i64::MAX } else { i64::MIN })
}

/// Integer codes plus the mapping that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    codes: Vec<i8>,
    params: QuantParams<T>,
    shape: Vec<usize>,
}

impl<T: Real> QuantizedTensor<T> {
    /// Reassembles a quantized tensor, checking code range and length.
    pub fn from_parts(codes: Vec<i8>, params: QuantParams<T>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::ShapeLength {
                shape,
                len: codes.len(),
            });
        }
        let b = params.bit_width;
        if let Some(&c) = codes
            .iter()
            .find(|&&c| (c as i32) < b.qmin() || (c as i32) > b.qmax())
        {
            return Err(Error::CodeOutOfRange {
                code: c as i64,
                qmin: b.qmin(),
                qmax: b.qmax(),
            });
        }
        Ok(QuantizedTensor {
            codes,
            params,
            shape,
        })
    }

    #[inline]
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    #[inline]
    pub fn params(&self) -> &QuantParams<T> {
        &self.params
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn bit_width(&self) -> BitWidth {
        self.params.bit_width
    }

    pub fn dequantize(&self) -> Tensor<T> {
        dequantize(self)
    }
}

/// `(max - min) / (qmax - qmin)`, or 1.0 for a zero-range tensor.
pub fn compute_scale<T: Real>(t: &Tensor<T>, b: BitWidth) -> Result<T> {
    Ok(QuantParams::fit(t.values(), b)?.scale)
}

/// `qmin - trunc(min / scale)`.
pub fn compute_zero_point<T: Real>(t: &Tensor<T>, b: BitWidth) -> Result<i64> {
    Ok(QuantParams::fit(t.values(), b)?.zero_point)
}

pub fn quantize<T: Real>(t: &Tensor<T>, b: BitWidth) -> Result<QuantizedTensor<T>> {
    let params = QuantParams::fit(t.values(), b)?;
    let codes = t.values().iter().map(|&v| params.code(v)).collect();
    Ok(QuantizedTensor {
        codes,
        params,
        shape: t.shape().to_vec(),
    })
}

pub fn dequantize<T: Real>(q: &QuantizedTensor<T>) -> Tensor<T> {
    let values = q.codes.iter().map(|&c| q.params.value(c)).collect();
    Tensor::from_parts_unchecked(values, q.shape.clone())
}

/// Simulated quantization: quantize then dequantize.
pub fn roundtrip<T: Real>(t: &Tensor<T>, b: BitWidth) -> Result<Tensor<T>> {
    Ok(dequantize(&quantize(t, b)?))
}

/// A per-tensor quantization method. The search and sensitivity drivers are
/// written against this trait so any method can be plugged in.
pub trait Quantizer<T: Real> {
    fn quantize(&self, t: &Tensor<T>, bits: BitWidth) -> Result<QuantizedTensor<T>>;

    fn roundtrip(&self, t: &Tensor<T>, bits: BitWidth) -> Result<Tensor<T>> {
        Ok(dequantize(&self.quantize(t, bits)?))
    }
}

/// Per-tensor asymmetric affine quantization.
#[derive(Debug, Clone, Copy, Default)]
pub struct AffineQuantizer;

impl<T: Real> Quantizer<T> for AffineQuantizer {
    fn quantize(&self, t: &Tensor<T>, bits: BitWidth) -> Result<QuantizedTensor<T>> {
        quantize(t, bits)
    }
}
