use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LayerRecord, LayerType, ModelWeights};
use crate::error::{Error, Result};
use crate::quant::Tensor;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLayer {
    pub name: String,
    pub layer_type: LayerType,
    pub shape: Vec<usize>,
    /// Standard deviation; defaults to He initialization `sqrt(2 / fan_in)`.
    #[serde(default)]
    pub std: Option<f64>,
}

/// Recipe for a Gaussian-initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub model_name: String,
    pub seed: u64,
    pub layers: Vec<SyntheticLayer>,
}

impl SyntheticSpec {
    /// `layers` fully connected layers of identical `[rows, cols]` shape.
    pub fn dense_stack(
        model_name: &str,
        seed: u64,
        layers: usize,
        rows: usize,
        cols: usize,
    ) -> Self {
        SyntheticSpec {
            model_name: model_name.into(),
            seed,
            layers: (0..layers)
                .map(|i| SyntheticLayer {
                    name: format!("fc{i}"),
                    layer_type: LayerType::FullyConnected,
                    shape: vec![rows, cols],
                    std: None,
                })
                .collect(),
        }
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [] => 1,
        [n] => *n,
        [_, rest @ ..] => rest.iter().product(),
    }
}

/// Same spec and seed always give bit-identical weights.
pub fn generate_synthetic_model<T: Real>(spec: &SyntheticSpec) -> Result<ModelWeights<T>> {
    if spec.layers.is_empty() {
        return Err(Error::NoSyntheticLayers);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (position, l) in spec.layers.iter().enumerate() {
        let std = l
            .std
            .unwrap_or_else(|| (2.0 / fan_in(&l.shape).max(1) as f64).sqrt());
        let normal = Normal::new(0.0, std).map_err(|_| Error::NonFinite)?;
        let n: usize = l.shape.iter().product();
        let values = (0..n).map(|_| T::narrow(normal.sample(&mut rng))).collect();
        layers.push(LayerRecord {
            name: l.name.clone(),
            position,
            layer_type: l.layer_type,
            weights: Tensor::new(values, l.shape.clone())?,
        });
    }
    ModelWeights::new(spec.model_name.clone(), layers)
}
