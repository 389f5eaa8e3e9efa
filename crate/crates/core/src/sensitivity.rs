//! Layer-type and layer-position sensitivity ablations.
//!
//! The type sweep quantizes all layers of one type at a candidate width while
//! every other layer stays at int8, then scores the result with a caller
//! supplied evaluation. The position table records the relative quantization
//! error `mean((w - w') / w)` of each layer at each width and, per width, the
//! position with the largest `|RQE|` (lowest position on ties).

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{model_qmse, LayerType, ModelWeights};
use crate::quant::{relative_qe_stats, AffineQuantizer, BitWidth, Quantizer};
use crate::scalar::Real;

/// What an evaluation callback reports for one simulated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepMetrics<T> {
    pub top1_agreement: T,
    pub avg_loss: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeSweepMetrics<T> {
    pub top1_agreement: T,
    pub avg_loss: T,
    pub model_qmse: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeSweepResult<T> {
    pub layer_type: LayerType,
    pub bit_width: BitWidth,
    pub metrics: TypeSweepMetrics<T>,
}

/// One sweep configuration: `layer_bits[position]` for every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepPoint {
    pub layer_type: LayerType,
    pub bit_width: BitWidth,
    pub layer_bits: Vec<BitWidth>,
}

fn check_bits(bits: &[BitWidth]) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::NoBitWidths);
    }
    for (i, b) in bits.iter().enumerate() {
        if bits[..i].contains(b) {
            return Err(Error::DuplicateBitWidth(b.bits()));
        }
    }
    Ok(())
}

/// Every (present layer type, width) configuration, types in order of first
/// appearance.
pub fn sweep_points<T: Real>(
    model: &ModelWeights<T>,
    bits: &[BitWidth],
) -> Result<Vec<SweepPoint>> {
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    check_bits(bits)?;
    let mut points = Vec::new();
    for ty in model.layer_types() {
        for &b in bits {
            let layer_bits = model
                .layers()
                .iter()
                .map(|l| {
                    if l.layer_type == ty {
                        b
                    } else {
                        BitWidth::INT8
                    }
                })
                .collect();
            points.push(SweepPoint {
                layer_type: ty,
                bit_width: b,
                layer_bits,
            });
        }
    }
    Ok(points)
}

/// Runs `eval` on each sweep configuration. The float weights are only read.
pub fn layer_type_sweep<T, F>(
    model: &ModelWeights<T>,
    bits: &[BitWidth],
    mut eval: F,
) -> Result<Vec<TypeSweepResult<T>>>
where
    T: Real,
    F: FnMut(&ModelWeights<T>) -> Result<SweepMetrics<T>>,
{
    sweep_points(model, bits)?
        .into_iter()
        .map(|p| {
            let simulated = model.fake_quantize(&AffineQuantizer, |l| p.layer_bits[l.position])?;
            let m = eval(&simulated)?;
            Ok(TypeSweepResult {
                layer_type: p.layer_type,
                bit_width: p.bit_width,
                metrics: TypeSweepMetrics {
                    top1_agreement: m.top1_agreement,
                    avg_loss: m.avg_loss,
                    model_qmse: model_qmse(model, &simulated)?,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IsolationReport {
    pub points_checked: usize,
    /// `(swept type, width, layer name)` for each layer outside the swept type
    /// whose codes differ from uniform int8.
    pub violations: Vec<(LayerType, BitWidth, String)>,
}

impl IsolationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Confirms that in every sweep configuration the layers outside the swept
/// type carry exactly the codes of a uniform int8 quantization.
pub fn check_sweep_isolation<T: Real>(
    model: &ModelWeights<T>,
    bits: &[BitWidth],
) -> Result<IsolationReport> {
    let baseline = model.quantize_layers(&AffineQuantizer, |_| BitWidth::INT8)?;
    let mut report = IsolationReport::default();
    for p in sweep_points(model, bits)? {
        let codes = model.quantize_layers(&AffineQuantizer, |l| p.layer_bits[l.position])?;
        for ((l, got), want) in model.layers().iter().zip(&codes).zip(&baseline) {
            if l.layer_type != p.layer_type && got != want {
                report
                    .violations
                    .push((p.layer_type, p.bit_width, l.name.clone()));
            }
        }
        report.points_checked += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SensitivePosition {
    pub bits: BitWidth,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionRqeTable<T> {
    pub bit_widths: Vec<BitWidth>,
    /// `rqe[position][j]` for `bit_widths[j]`.
    pub rqe: Vec<Vec<T>>,
    /// Near-zero weights left out of each layer's mean.
    pub excluded: Vec<usize>,
    /// One entry per width, in `bit_widths` order.
    pub most_sensitive: Vec<SensitivePosition>,
}

impl<T: Real> PositionRqeTable<T> {
    pub fn most_sensitive_for(&self, bits: BitWidth) -> Option<usize> {
        self.most_sensitive
            .iter()
            .find(|s| s.bits == bits)
            .map(|s| s.position)
    }
}

/// Largest `|value|`, ties to the lowest index.
fn argmax_abs<T: Real>(column: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in column.enumerate() {
        if v.abs() > best.1 {
            best = (i, v.abs());
        }
    }
    best.0
}

pub fn layer_position_rqe<T: Real>(
    model: &ModelWeights<T>,
    bits: &[BitWidth],
) -> Result<PositionRqeTable<T>> {
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    check_bits(bits)?;
    let rows: Vec<(Vec<T>, usize)> = model
        .layers()
        .par_iter()
        .map(|l| {
            let mut excluded = 0;
            let row = bits
                .iter()
                .map(|&b| {
                    let s =
                        relative_qe_stats(&l.weights, &AffineQuantizer.roundtrip(&l.weights, b)?)?;
                    excluded = s.excluded;
                    Ok(s.value)
                })
                .collect::<Result<Vec<T>>>()?;
            Ok((row, excluded))
        })
        .collect::<Result<_>>()?;
    let (rqe, excluded): (Vec<Vec<T>>, Vec<usize>) = rows.into_iter().unzip();
    let most_sensitive = bits
        .iter()
        .enumerate()
        .map(|(j, &b)| SensitivePosition {
            bits: b,
            position: argmax_abs(rqe.iter().map(|r| r[j])),
        })
        .collect();
    Ok(PositionRqeTable {
        bit_widths: bits.to_vec(),
        rqe,
        excluded,
        most_sensitive,
    })
}
