//! Wall-clock measurement of the search, with and without materializing the
//! quantized weights.

use std::time::{Duration, Instant};

use mixprec::{
    build_error_table, sweep_qems, AffineQuantizer, BitAllocation32, BitWidth, ErrorTable32,
    ModelWeights32,
};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeReport {
    pub architecture: String,
    pub search_seconds: f32,
    pub search_plus_quantization_seconds: f32,
    pub layer_count: usize,
    pub qem_count: usize,
}

/// Error table plus one selection per QEM, timed.
pub fn time_search(
    model: &ModelWeights32,
    bits: &[BitWidth],
    qems: &[f32],
) -> mixprec::Result<(Duration, ErrorTable32, Vec<BitAllocation32>)> {
    let t0 = Instant::now();
    let table = build_error_table(model, bits)?;
    let allocations = sweep_qems(&table, qems)?;
    Ok((t0.elapsed(), table, allocations))
}

/// Quantizes every layer at its allocated width for each allocation.
pub fn materialize(model: &ModelWeights32, allocations: &[BitAllocation32]) -> mixprec::Result<()> {
    for a in allocations {
        let codes = model.quantize_layers(&AffineQuantizer, |l| {
            a.bits_for(&l.name).unwrap_or(BitWidth::INT8)
        })?;
        std::hint::black_box(codes);
    }
    Ok(())
}

/// `count` QEMs evenly spaced from 1.0 in steps of 0.5.
pub fn qem_grid(count: usize) -> Vec<f32> {
    (0..count).map(|i| 1.0 + 0.5 * i as f32).collect()
}

/// One report per entry of `qem_counts`.
pub fn measure_runtime(
    model: &ModelWeights32,
    bits: &[BitWidth],
    qem_counts: &[usize],
) -> mixprec::Result<Vec<RuntimeReport>> {
    qem_counts
        .iter()
        .map(|&m| {
            let qems = qem_grid(m);
            let t0 = Instant::now();
            let (search, _, allocations) = time_search(model, bits, &qems)?;
            materialize(model, &allocations)?;
            Ok(RuntimeReport {
                architecture: model.model_name().to_string(),
                search_seconds: search.as_secs_f32(),
                search_plus_quantization_seconds: t0.elapsed().as_secs_f32(),
                layer_count: model.len(),
                qem_count: m,
            })
        })
        .collect()
}
