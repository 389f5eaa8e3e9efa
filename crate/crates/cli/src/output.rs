//! Row types and the CSV / JSON writers. Both formats carry the same values.

use std::fs;
use std::path::{Path, PathBuf};

use mixprec::{BitWidth, LayerType};
use serde::Serialize;

use crate::args::Format;
use crate::{CliError, CliResult};

/// One search result per QEM.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub architecture: String,
    pub qem: f32,
    pub layers_bit_widths: String,
    pub model_qmse: f32,
    pub fallback_layers: usize,
    pub f32_bytes: f64,
    pub theoretical_bytes: f64,
    pub top1_agreement: Option<f32>,
    pub topk_agreement: Option<f32>,
    pub avg_loss: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizeRow {
    pub architecture: String,
    pub qem: Option<f32>,
    pub uniform_bits: Option<BitWidth>,
    pub layers_bit_widths: String,
    pub model_qmse: f32,
    pub f32_bytes: f64,
    pub theoretical_bytes: f64,
    pub stored_bytes: u64,
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeSweepRow {
    pub layer_type: LayerType,
    pub bits: BitWidth,
    pub top1_agreement: f32,
    pub avg_loss: f32,
    pub model_qmse: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RqeRow {
    pub position: usize,
    pub layer: String,
    pub bits: BitWidth,
    pub rqe: f32,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitiveRow {
    pub bits: BitWidth,
    pub most_sensitive_position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationSummaryRow {
    pub architecture: String,
    pub points: usize,
    pub rank_correlation: f32,
    pub warning: String,
}

pub fn output_path(dir: &Path, stem: &str, format: Format) -> PathBuf {
    dir.join(format!("{stem}.{}", format.ext()))
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Writes `rows` to `<dir>/<stem>.<ext>`.
pub fn write_rows<S: Serialize>(
    dir: &Path,
    stem: &str,
    format: Format,
    rows: &[S],
) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    let path = output_path(dir, stem, format);
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(&path).map_err(|e| data_err(&path, e))?;
            for r in rows {
                w.serialize(r).map_err(|e| data_err(&path, e))?;
            }
            w.flush().map_err(|e| data_err(&path, e))?;
        }
        Format::Json => write_json(&path, &rows)?,
    }
    Ok(path)
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| data_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| data_err(path, e))
}
