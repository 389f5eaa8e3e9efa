//! Per-layer bit-width search.
//!
//! For every layer the quantization error (MSE of the quantize/dequantize
//! roundtrip) is measured at each candidate width, giving an `L x B` table.
//! A layer is then assigned the narrowest width whose error is within `qem`
//! times its int8 error:
//!
//! ```text
//! bits(l) = min { b in B : qe[l][b] <= qe[l][8] * qem }
//! ```
//!
//! Written literally as `argmin qe` subject to the same constraint, the
//! objective would always pick 8 bits; minimizing the width is what makes the
//! multiplier a useful knob. For `qem >= 1` the int8 column satisfies its own
//! constraint, so a width always exists. Below 1 a layer may have no feasible
//! width; it then falls back to 8 bits and is reported in `fallback_layers`.
//!
//! Building the table costs `L * B` quantizations; each additional QEM only
//! repeats the cheap selection pass over the same table.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::quant::{quantization_mse, AffineQuantizer, BitWidth, Quantizer, Tensor};
use crate::scalar::Real;

/// Quantization error of every layer at every candidate width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableRepr<T>", into = "TableRepr<T>", bound = "T: Real")]
pub struct ErrorTable<T> {
    layer_names: Vec<String>,
    bit_widths: Vec<BitWidth>,
    qe: Vec<Vec<T>>,
    baseline_qe: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct TableRepr<T> {
    layers: Vec<String>,
    bits: Vec<BitWidth>,
    qe: Vec<Vec<T>>,
}

impl<T: Real> TryFrom<TableRepr<T>> for ErrorTable<T> {
    type Error = Error;

    fn try_from(r: TableRepr<T>) -> Result<Self> {
        ErrorTable::new(r.layers, r.bits, r.qe)
    }
}

impl<T: Real> From<ErrorTable<T>> for TableRepr<T> {
    fn from(t: ErrorTable<T>) -> Self {
        TableRepr {
            layers: t.layer_names,
            bits: t.bit_widths,
            qe: t.qe,
        }
    }
}

fn validate_bits(bits: &[BitWidth]) -> Result<usize> {
    if bits.is_empty() {
        return Err(Error::NoBitWidths);
    }
    let mut seen = HashSet::new();
    for b in bits {
        if !seen.insert(*b) {
            return Err(Error::DuplicateBitWidth(b.bits()));
        }
    }
    bits.iter()
        .position(|&b| b == BitWidth::INT8)
        .ok_or(Error::MissingBaseline)
}

impl<T: Real> ErrorTable<T> {
    /// Assembles a table from precomputed rows, `qe[layer][bit]`.
    pub fn new(
        layer_names: Vec<String>,
        bit_widths: Vec<BitWidth>,
        qe: Vec<Vec<T>>,
    ) -> Result<Self> {
        let base = validate_bits(&bit_widths)?;
        if layer_names.is_empty() {
            return Err(Error::EmptyModel);
        }
        if qe.len() != layer_names.len() {
            return Err(Error::InvalidErrorTable(format!(
                "{} rows for {} layers",
                qe.len(),
                layer_names.len()
            )));
        }
        for (name, row) in layer_names.iter().zip(&qe) {
            if row.len() != bit_widths.len() {
                return Err(Error::InvalidErrorTable(format!(
                    "layer {name}: {} entries for {} bit-widths",
                    row.len(),
                    bit_widths.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite() || *v < T::zero()) {
                return Err(Error::InvalidErrorTable(format!(
                    "layer {name}: negative or non-finite error"
                )));
            }
        }
        let baseline_qe = qe.iter().map(|row| row[base]).collect();
        Ok(ErrorTable {
            layer_names,
            bit_widths,
            qe,
            baseline_qe,
        })
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn bit_widths(&self) -> &[BitWidth] {
        &self.bit_widths
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.qe
    }

    /// The int8 column.
    pub fn baseline_qe(&self) -> &[T] {
        &self.baseline_qe
    }

    pub fn num_layers(&self) -> usize {
        self.layer_names.len()
    }

    pub fn qe(&self, layer: usize, bits: BitWidth) -> Option<T> {
        let j = self.bit_widths.iter().position(|&b| b == bits)?;
        self.qe.get(layer).map(|row| row[j])
    }

    /// Mean over layers of the error at each layer's allocated width.
    pub fn allocation_qmse(&self, allocation: &BitAllocation<T>) -> Result<T> {
        let mut sum = 0.0f64;
        for (i, name) in self.layer_names.iter().enumerate() {
            let bits = allocation
                .bits_for(name)
                .ok_or_else(|| Error::AllocationMissingLayer(name.clone()))?;
            let qe = self
                .qe(i, bits)
                .ok_or_else(|| Error::InvalidErrorTable(format!("no column for {bits}-bit")))?;
            sum += qe.widen();
        }
        Ok(T::narrow(sum / self.num_layers() as f64))
    }
}

fn layer_row<T, Q>(weights: &Tensor<T>, bits: &[BitWidth], quantizer: &Q) -> Result<Vec<T>>
where
    T: Real,
    Q: Quantizer<T> + ?Sized,
{
    bits.iter()
        .map(|&b| quantization_mse(weights, &quantizer.roundtrip(weights, b)?))
        .collect()
}

/// Builds the table with affine quantization.
pub fn build_error_table<T: Real>(
    model: &ModelWeights<T>,
    bits: &[BitWidth],
) -> Result<ErrorTable<T>> {
    build_error_table_with(model, bits, &AffineQuantizer)
}

/// Builds the table with any quantization method; exactly
/// `model.len() * bits.len()` calls to `quantizer.quantize`.
pub fn build_error_table_with<T, Q>(
    model: &ModelWeights<T>,
    bits: &[BitWidth],
    quantizer: &Q,
) -> Result<ErrorTable<T>>
where
    T: Real,
    Q: Quantizer<T> + ?Sized,
{
    validate_bits(bits)?;
    let qe = model
        .layers()
        .iter()
        .map(|l| layer_row(&l.weights, bits, quantizer))
        .collect::<Result<Vec<_>>>()?;
    ErrorTable::new(model.layer_names(), bits.to_vec(), qe)
}

/// Same as [`build_error_table_with`], with layers evaluated on the rayon pool.
pub fn build_error_table_par<T, Q>(
    model: &ModelWeights<T>,
    bits: &[BitWidth],
    quantizer: &Q,
) -> Result<ErrorTable<T>>
where
    T: Real,
    Q: Quantizer<T> + Sync + ?Sized,
{
    validate_bits(bits)?;
    let qe = model
        .layers()
        .par_iter()
        .map(|l| layer_row(&l.weights, bits, quantizer))
        .collect::<Result<Vec<_>>>()?;
    ErrorTable::new(model.layer_names(), bits.to_vec(), qe)
}

fn check_qem<T: Real>(qem: T) -> Result<()> {
    if qem.is_finite() && qem > T::zero() {
        Ok(())
    } else {
        Err(Error::InvalidQem(qem.widen()))
    }
}

/// Assigns each layer the narrowest width within `qem` times its int8 error.
pub fn select_bitwidths<T: Real>(table: &ErrorTable<T>, qem: T) -> Result<BitAllocation<T>> {
    check_qem(qem)?;
    let mut ascending: Vec<usize> = (0..table.bit_widths.len()).collect();
    ascending.sort_by_key(|&j| table.bit_widths[j]);

    let mut per_layer = IndexMap::with_capacity(table.num_layers());
    let mut fallback = Vec::new();
    for ((name, row), &base) in table
        .layer_names
        .iter()
        .zip(&table.qe)
        .zip(&table.baseline_qe)
    {
        let threshold = base * qem;
        let chosen = ascending
            .iter()
            .find(|&&j| row[j] <= threshold)
            .map(|&j| table.bit_widths[j]);
        let bits = chosen.unwrap_or_else(|| {
            fallback.push(name.clone());
            BitWidth::INT8
        });
        per_layer.insert(name.clone(), bits);
    }
    Ok(BitAllocation::assemble(qem, per_layer, fallback))
}

/// Exhaustive reference for [`select_bitwidths`], used to cross-check it.
pub fn oracle_select<T: Real>(table: &ErrorTable<T>, qem: T) -> Result<BitAllocation<T>> {
    if !(qem.is_finite() && qem > T::zero()) {
        return Err(Error::InvalidQem(qem.widen()));
    }
    let mut int8_col = None;
    for (j, b) in table.bit_widths.iter().enumerate() {
        if b.bits() == 8 {
            int8_col = Some(j);
        }
    }
    let int8_col = int8_col.ok_or(Error::MissingBaseline)?;

    let mut per_layer = IndexMap::new();
    let mut fallback = Vec::new();
    for l in 0..table.layer_names.len() {
        let limit = table.qe[l][int8_col] * qem;
        let mut feasible: Vec<u8> = Vec::new();
        for j in 0..table.bit_widths.len() {
            if table.qe[l][j] <= limit {
                feasible.push(table.bit_widths[j].bits());
            }
        }
        let best = feasible.iter().copied().fold(u8::MAX, u8::min);
        let bits = if best == u8::MAX {
            fallback.push(table.layer_names[l].clone());
            8
        } else {
            best
        };
        per_layer.insert(table.layer_names[l].clone(), BitWidth::new(bits)?);
    }
    Ok(BitAllocation::assemble(qem, per_layer, fallback))
}

/// One allocation per QEM, all from the same table.
pub fn sweep_qems<T: Real>(table: &ErrorTable<T>, qems: &[T]) -> Result<Vec<BitAllocation<T>>> {
    if qems.is_empty() {
        return Err(Error::NoQems);
    }
    qems.iter().try_for_each(|&q| check_qem(q))?;
    qems.iter().map(|&q| select_bitwidths(table, q)).collect()
}

/// Per-layer bit-widths chosen for one QEM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "AllocationRepr<T>",
    into = "AllocationRepr<T>",
    bound = "T: Real"
)]
pub struct BitAllocation<T> {
    per_layer_bits: IndexMap<String, BitWidth>,
    qem: T,
    bit_set: Vec<BitWidth>,
    fallback_layers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct AllocationRepr<T> {
    qem: T,
    bits: IndexMap<String, BitWidth>,
    bit_set: Vec<BitWidth>,
    #[serde(default)]
    fallback_layers: Vec<String>,
}

impl<T: Real> TryFrom<AllocationRepr<T>> for BitAllocation<T> {
    type Error = Error;

    fn try_from(r: AllocationRepr<T>) -> Result<Self> {
        let a =
            BitAllocation::from_layer_bits(r.qem, r.bits.into_iter().collect(), r.fallback_layers)?;
        if a.bit_set != r.bit_set {
            return Err(Error::InvalidErrorTable(
                "bit_set disagrees with per-layer bits".into(),
            ));
        }
        Ok(a)
    }
}

impl<T: Real> From<BitAllocation<T>> for AllocationRepr<T> {
    fn from(a: BitAllocation<T>) -> Self {
        AllocationRepr {
            qem: a.qem,
            bits: a.per_layer_bits,
            bit_set: a.bit_set,
            fallback_layers: a.fallback_layers,
        }
    }
}

impl<T: Real> BitAllocation<T> {
    fn assemble(
        qem: T,
        per_layer_bits: IndexMap<String, BitWidth>,
        fallback_layers: Vec<String>,
    ) -> Self {
        let bit_set = per_layer_bits
            .values()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        BitAllocation {
            per_layer_bits,
            qem,
            bit_set,
            fallback_layers,
        }
    }

    pub fn from_layer_bits(
        qem: T,
        layers: Vec<(String, BitWidth)>,
        fallback_layers: Vec<String>,
    ) -> Result<Self> {
        check_qem(qem)?;
        let mut per_layer = IndexMap::with_capacity(layers.len());
        for (name, bits) in layers {
            if per_layer.insert(name.clone(), bits).is_some() {
                return Err(Error::DuplicateLayer(name));
            }
        }
        if let Some(f) = fallback_layers.iter().find(|f| !per_layer.contains_key(*f)) {
            return Err(Error::AllocationUnknownLayer(f.clone()));
        }
        Ok(Self::assemble(qem, per_layer, fallback_layers))
    }

    /// Every layer of `model` at the same width (`qem` = 1).
    pub fn uniform(model: &ModelWeights<T>, bits: BitWidth) -> Self {
        let per_layer = model
            .layers()
            .iter()
            .map(|l| (l.name.clone(), bits))
            .collect();
        Self::assemble(T::one(), per_layer, Vec::new())
    }

    pub fn qem(&self) -> T {
        self.qem
    }

    pub fn per_layer_bits(&self) -> &IndexMap<String, BitWidth> {
        &self.per_layer_bits
    }

    pub fn bits_for(&self, layer: &str) -> Option<BitWidth> {
        self.per_layer_bits.get(layer).copied()
    }

    /// Distinct widths used, ascending.
    pub fn bit_set(&self) -> &[BitWidth] {
        &self.bit_set
    }

    pub fn fallback_layers(&self) -> &[String] {
        &self.fallback_layers
    }

    pub fn is_fallback(&self, layer: &str) -> bool {
        self.fallback_layers.iter().any(|f| f == layer)
    }

    /// The bit set as `"6, 7"`.
    pub fn bit_set_label(&self) -> String {
        let mut s = String::new();
        for (i, b) in self.bit_set.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            write!(s, "{b}").unwrap();
        }
        s
    }

    /// Errors unless the allocation names exactly the layers of `model`.
    pub fn check_covers(&self, model: &ModelWeights<T>) -> Result<()>
    where
        T: Real,
    {
        self.check_covers_names(model.layers().iter().map(|l| l.name.as_str()))
    }

    pub(crate) fn check_covers_names<'a>(
        &self,
        names: impl Iterator<Item = &'a str>,
    ) -> Result<()> {
        let mut count = 0;
        for name in names {
            if !self.per_layer_bits.contains_key(name) {
                return Err(Error::AllocationMissingLayer(name.into()));
            }
            count += 1;
        }
        if count != self.per_layer_bits.len() {
            let extra = self
                .per_layer_bits
                .keys()
                .next()
                .cloned()
                .unwrap_or_default();
            return Err(Error::AllocationUnknownLayer(extra));
        }
        Ok(())
    }
}

/// Packed size in bytes if codes were stored at their allocated widths.
pub fn theoretical_size_bytes<T: Real>(
    model: &ModelWeights<T>,
    allocation: &BitAllocation<T>,
) -> Result<f64> {
    allocation.check_covers(model)?;
    Ok(model
        .layers()
        .iter()
        .map(|l| l.weights.len() as f64 * allocation.bits_for(&l.name).unwrap().bits() as f64 / 8.0)
        .sum())
}
