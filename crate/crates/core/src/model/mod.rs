//! Named, typed, positioned weight tensors and their on-disk container.

mod io;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::{
    load_model, load_quantized, save_model, save_quantized, QuantizedLayer, QuantizedModel,
    MANIFEST_FILE, QUANTIZED_MANIFEST_FILE,
};
pub use synthetic::{generate_synthetic_model, SyntheticLayer, SyntheticSpec};

use crate::error::{Error, Result};
use crate::quant::{quantization_mse, BitWidth, QuantizedTensor, Quantizer, Tensor};
use crate::scalar::Real;

/// Coarse role of a layer within a convolutional network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    FirstConv,
    Conv3x3,
    Conv1x1,
    FullyConnected,
    Other,
}

impl LayerType {
    pub const ALL: [LayerType; 5] = [
        LayerType::FirstConv,
        LayerType::Conv3x3,
        LayerType::Conv1x1,
        LayerType::FullyConnected,
        LayerType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerType::FirstConv => "first_conv",
            LayerType::Conv3x3 => "conv3x3",
            LayerType::Conv1x1 => "conv1x1",
            LayerType::FullyConnected => "fully_connected",
            LayerType::Other => "other",
        }
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LayerType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown layer type {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord<T> {
    pub name: String,
    pub position: usize,
    pub layer_type: LayerType,
    pub weights: Tensor<T>,
}

/// Ordered layers of one model. Construction enforces unique names and
/// positions `0..n` in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    model_name: String,
    layers: Vec<LayerRecord<T>>,
}

impl<T: Real> ModelWeights<T> {
    /// Sorts `layers` by position and validates the model invariants.
    pub fn new(model_name: impl Into<String>, mut layers: Vec<LayerRecord<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        let mut seen = HashSet::with_capacity(layers.len());
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::DuplicateLayer(l.name.clone()));
            }
        }
        layers.sort_by_key(|l| l.position);
        if layers.iter().enumerate().any(|(i, l)| l.position != i) {
            return Err(Error::NonContiguousPositions(
                layers.iter().map(|l| l.position).collect(),
            ));
        }
        Ok(ModelWeights {
            model_name: model_name.into(),
            layers,
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn layers(&self) -> &[LayerRecord<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerRecord<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Layer types present, in first-appearance order.
    pub fn layer_types(&self) -> Vec<LayerType> {
        let mut out = Vec::new();
        for l in &self.layers {
            if !out.contains(&l.layer_type) {
                out.push(l.layer_type);
            }
        }
        out
    }

    /// Copy of this model with every weight tensor replaced by `f(layer)`.
    pub fn map_weights<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&LayerRecord<T>) -> Result<Tensor<T>>,
    {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weights = f(l)?;
                if weights.shape() != l.weights.shape() {
                    return Err(Error::ShapeMismatch(
                        l.weights.shape().to_vec(),
                        weights.shape().to_vec(),
                    ));
                }
                Ok(LayerRecord {
                    name: l.name.clone(),
                    position: l.position,
                    layer_type: l.layer_type,
                    weights,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelWeights {
            model_name: self.model_name.clone(),
            layers,
        })
    }

    /// Quantizes every layer at the width chosen by `bits_for`.
    pub fn quantize_layers<Q, F>(
        &self,
        quantizer: &Q,
        mut bits_for: F,
    ) -> Result<Vec<QuantizedTensor<T>>>
    where
        Q: Quantizer<T> + ?Sized,
        F: FnMut(&LayerRecord<T>) -> BitWidth,
    {
        self.layers
            .iter()
            .map(|l| quantizer.quantize(&l.weights, bits_for(l)))
            .collect()
    }

    /// Simulated-quantization copy: each layer quantized at `bits_for(layer)`
    /// and dequantized back.
    pub fn fake_quantize<Q, F>(&self, quantizer: &Q, mut bits_for: F) -> Result<Self>
    where
        Q: Quantizer<T> + ?Sized,
        F: FnMut(&LayerRecord<T>) -> BitWidth,
    {
        self.map_weights(|l| quantizer.roundtrip(&l.weights, bits_for(l)))
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            model_name: self.model_name.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    name: l.name.clone(),
                    position: l.position,
                    layer_type: l.layer_type,
                    weights: l.weights.cast(),
                })
                .collect(),
        }
    }
}

/// Mean over layers of the per-layer quantization MSE between two weight sets
/// with identical layer names and shapes.
pub fn model_qmse<T: Real>(reference: &ModelWeights<T>, other: &ModelWeights<T>) -> Result<T> {
    if reference.layer_names() != other.layer_names() {
        return Err(Error::MismatchedLayers(format!(
            "{:?} vs {:?}",
            reference.layer_names(),
            other.layer_names()
        )));
    }
    let mut sum = 0.0f64;
    for (a, b) in reference.layers().iter().zip(other.layers()) {
        sum += quantization_mse(&a.weights, &b.weights)?.widen();
    }
    Ok(T::narrow(sum / reference.len() as f64))
}
