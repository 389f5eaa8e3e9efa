//! Small forward-pass engine (dense, same-padded 2-D convolution, ReLU,
//! global average pooling) for checking how weight quantization changes a
//! network's predictions.
//!
//! Quality is measured as agreement with the float network's own outputs on
//! random inputs: the float argmax acts as the label, so no trained
//! checkpoint or dataset is needed. All arithmetic runs in the scalar type of
//! the weights; quantized weights arrive already dequantized.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{model_qmse, LayerType, ModelWeights, SyntheticLayer, SyntheticSpec};
use crate::quant::{AffineQuantizer, BitWidth, Tensor};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Weight shape `[out_features, in_features]`.
    Dense {
        weight: String,
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Stride 1, zero "same" padding. Weight shape `[out, in, kernel, kernel]`.
    Conv2d {
        weight: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        activation: Activation,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    fn label(&self, index: usize) -> String {
        match self {
            LayerSpec::Dense { weight, .. } | LayerSpec::Conv2d { weight, .. } => weight.clone(),
            LayerSpec::GlobalAvgPool => format!("#{index} global_avg_pool"),
        }
    }
}

/// Network topology; weights are bound by name at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-example input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

fn net_err(layer: String, reason: impl Into<String>) -> Error {
    Error::Network {
        layer,
        reason: reason.into(),
    }
}

impl NetworkSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::ManifestNotFound(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Checks that layer shapes compose and that every referenced weight
    /// exists in `weights` with the expected shape.
    pub fn validate<T: Real>(&self, weights: &ModelWeights<T>) -> Result<()> {
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer.label(i);
            let (expect_weight, next) = match *layer {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    if cur.iter().product::<usize>() != in_features {
                        return Err(net_err(
                            name,
                            format!("expects {in_features} inputs, got {cur:?}"),
                        ));
                    }
                    (Some(vec![out_features, in_features]), vec![out_features])
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    if kernel % 2 == 0 {
                        return Err(net_err(name, format!("kernel {kernel} must be odd")));
                    }
                    match cur[..] {
                        [c, h, w] if c == in_channels => (
                            Some(vec![out_channels, in_channels, kernel, kernel]),
                            vec![out_channels, h, w],
                        ),
                        _ => {
                            return Err(net_err(
                                name,
                                format!("expects input [{in_channels}, H, W], got {cur:?}"),
                            ))
                        }
                    }
                }
                LayerSpec::GlobalAvgPool => match cur[..] {
                    [c, _, _] => (None, vec![c]),
                    _ => return Err(net_err(name, format!("expects [C, H, W], got {cur:?}"))),
                },
            };
            if let Some(shape) = expect_weight {
                let w = weights
                    .layer(&name)
                    .ok_or_else(|| net_err(name.clone(), "weight not found"))?;
                if w.weights.shape() != shape.as_slice() {
                    return Err(net_err(
                        name,
                        format!("weight shape {:?}, expected {shape:?}", w.weights.shape()),
                    ));
                }
            }
            cur = next;
        }
        if cur != [self.classes] {
            return Err(net_err(
                "output".into(),
                format!("produces {cur:?}, expected [{}]", self.classes),
            ));
        }
        Ok(())
    }
}

fn activate<T: Real>(xs: &mut [T], act: Activation) {
    if act == Activation::Relu {
        for x in xs {
            *x = x.max(T::zero());
        }
    }
}

fn dense<T: Real>(x: &[T], w: &[T], in_f: usize, out_f: usize) -> Vec<T> {
    (0..out_f)
        .map(|o| {
            let row = &w[o * in_f..(o + 1) * in_f];
            row.iter()
                .zip(x)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
        })
        .collect()
}

fn conv2d<T: Real>(x: &[T], w: &[T], shape: [usize; 3], out_c: usize, k: usize) -> Vec<T> {
    let [in_c, h, wd] = shape;
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); out_c * h * wd];
    for oc in 0..out_c {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = T::zero();
                for ic in 0..in_c {
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let wv = w[((oc * in_c + ic) * k + ky) * k + kx];
                            let xv = x[(ic * h + iy as usize) * wd + ix as usize];
                            acc = acc + wv * xv;
                        }
                    }
                }
                out[(oc * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

fn forward_row<T: Real>(spec: &NetworkSpec, bound: &[Option<&[T]>], input: &[T]) -> Vec<T> {
    let mut cur = input.to_vec();
    let mut shape = spec.input_shape.clone();
    for (layer, w) in spec.layers.iter().zip(bound) {
        match *layer {
            LayerSpec::Dense {
                in_features,
                out_features,
                activation,
                ..
            } => {
                cur = dense(&cur, w.unwrap(), in_features, out_features);
                activate(&mut cur, activation);
                shape = vec![out_features];
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                activation,
                ..
            } => {
                let s = [shape[0], shape[1], shape[2]];
                cur = conv2d(&cur, w.unwrap(), s, out_channels, kernel);
                activate(&mut cur, activation);
                shape = vec![out_channels, s[1], s[2]];
            }
            LayerSpec::GlobalAvgPool => {
                let area = shape[1] * shape[2];
                let denom = T::from_usize(area).unwrap();
                cur = cur
                    .chunks_exact(area)
                    .map(|c| c.iter().copied().sum::<T>() / denom)
                    .collect();
                shape = vec![shape[0]];
            }
        }
    }
    cur
}

/// Logits `[N, classes]` for a batch shaped `[N, ..input_shape]`. Rows run in
/// parallel; each row's arithmetic order is fixed, so results do not depend
/// on the thread count.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    weights: &ModelWeights<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.validate(weights)?;
    let row_len = spec.input_len();
    let bshape = batch.shape();
    if bshape.len() != spec.input_shape.len() + 1 || bshape[1..] != spec.input_shape[..] {
        return Err(Error::BatchShape {
            expected: spec.input_shape.clone(),
            got: bshape.to_vec(),
        });
    }
    let n = bshape[0];
    let bound: Vec<Option<&[T]>> = spec
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { weight, .. } | LayerSpec::Conv2d { weight, .. } => {
                Some(weights.layer(weight).expect("validated").weights.values())
            }
            LayerSpec::GlobalAvgPool => None,
        })
        .collect();
    let rows: Vec<Vec<T>> = if row_len == 0 {
        vec![vec![T::zero(); spec.classes]; n]
    } else {
        batch
            .values()
            .par_chunks_exact(row_len)
            .map(|row| forward_row(spec, &bound, row))
            .collect()
    };
    Tensor::new(rows.concat(), vec![n, spec.classes])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Zero-based rank of `label` when classes are ordered by descending logit,
/// ties ordered by ascending index.
fn rank_of<T: Real>(xs: &[T], label: usize) -> usize {
    let v = xs[label];
    xs.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

fn cross_entropy<T: Real>(logits: &[T], label: usize) -> f64 {
    let max = logits
        .iter()
        .map(|v| v.widen())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|v| (v.widen() - max).exp())
            .sum::<f64>()
            .ln();
    lse - logits[label].widen()
}

/// Agreement of a quantized network with its float reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport<T> {
    pub top1_agreement: T,
    pub topk_agreement: T,
    pub avg_loss: T,
    pub model_qmse: T,
    pub k: usize,
}

pub fn evaluate_agreement<T: Real>(
    spec: &NetworkSpec,
    f32_weights: &ModelWeights<T>,
    q_weights: &ModelWeights<T>,
    batch: &Tensor<T>,
    k: usize,
) -> Result<EvalReport<T>> {
    if k == 0 {
        return Err(Error::InvalidTopK);
    }
    let shapes = |m: &ModelWeights<T>| -> Vec<(String, Vec<usize>)> {
        m.layers()
            .iter()
            .map(|l| (l.name.clone(), l.weights.shape().to_vec()))
            .collect()
    };
    if shapes(f32_weights) != shapes(q_weights) {
        return Err(Error::MismatchedLayers(
            "layer names or shapes differ".into(),
        ));
    }
    let reference = forward(spec, f32_weights, batch)?;
    let quantized = forward(spec, q_weights, batch)?;
    let c = spec.classes;
    let k = k.min(c);
    let n = batch.shape()[0];

    let (mut top1, mut topk, mut loss) = (0usize, 0usize, 0.0f64);
    for (r, q) in reference
        .values()
        .chunks_exact(c)
        .zip(quantized.values().chunks_exact(c))
    {
        let label = argmax(r);
        if argmax(q) == label {
            top1 += 1;
        }
        if rank_of(q, label) < k {
            topk += 1;
        }
        loss += cross_entropy(q, label);
    }
    let denom = n.max(1) as f64;
    Ok(EvalReport {
        top1_agreement: T::narrow(top1 as f64 / denom),
        topk_agreement: T::narrow(topk as f64 / denom),
        avg_loss: T::narrow(loss / denom),
        model_qmse: model_qmse(f32_weights, q_weights)?,
        k,
    })
}

/// Spearman rank correlation (average ranks for ties). `None` when either
/// side has no variance.
pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationPoint<T> {
    pub bits: BitWidth,
    pub model_qmse: T,
    pub top1_agreement: T,
    pub topk_agreement: T,
    pub avg_loss: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport<T> {
    pub points: Vec<CorrelationPoint<T>>,
    /// Rank correlation of model QMSE against top-1 agreement.
    pub rank_correlation: T,
    pub warning: Option<String>,
}

/// QMSE spread at or below this is flagged as low variance.
pub const LOW_VARIANCE_QMSE: f64 = 1e-12;

/// Top-k used for the correlation points.
pub const DEFAULT_TOPK: usize = 5;

/// Quantizes uniformly at each width and correlates model QMSE with top-1
/// agreement.
pub fn qe_accuracy_correlation<T: Real>(
    spec: &NetworkSpec,
    f32_weights: &ModelWeights<T>,
    batch: &Tensor<T>,
    bits: &[BitWidth],
) -> Result<CorrelationReport<T>> {
    if bits.len() < 3 {
        return Err(Error::TooFewPoints(bits.len()));
    }
    let mut points = Vec::with_capacity(bits.len());
    for &b in bits {
        let q = f32_weights.fake_quantize(&AffineQuantizer, |_| b)?;
        let r = evaluate_agreement(spec, f32_weights, &q, batch, DEFAULT_TOPK)?;
        points.push(CorrelationPoint {
            bits: b,
            model_qmse: r.model_qmse,
            top1_agreement: r.top1_agreement,
            topk_agreement: r.topk_agreement,
            avg_loss: r.avg_loss,
        });
    }
    let qmse: Vec<f64> = points.iter().map(|p| p.model_qmse.widen()).collect();
    let top1: Vec<f64> = points.iter().map(|p| p.top1_agreement.widen()).collect();
    let spread = qmse.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - qmse.iter().copied().fold(f64::INFINITY, f64::min);

    let (rho, mut warning) = match rank_correlation(&qmse, &top1) {
        Some(r) => (r, None),
        None => (
            0.0,
            Some("no variance in QMSE or agreement; correlation set to 0".to_string()),
        ),
    };
    if warning.is_none() && spread <= LOW_VARIANCE_QMSE {
        warning = Some(format!("low variance: QMSE spread {spread:e}"));
    }
    Ok(CorrelationReport {
        points,
        rank_correlation: T::narrow(rho),
        warning,
    })
}

/// Standard-normal batch `[n, ..input_shape]`.
pub fn random_batch<T: Real>(spec: &NetworkSpec, n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * spec.input_len();
    let values = (0..len)
        .map(|_| T::narrow(StandardNormal.sample(&mut rng)))
        .collect();
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    Tensor::new(values, shape).expect("finite normal samples")
}

/// Reads a raw little-endian f32 blob as a batch for `spec`.
pub fn load_batch(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::BlobNotFound(path.display().to_string()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let row_bytes = 4 * spec.input_len() as u64;
    if row_bytes == 0 || !(bytes.len() as u64).is_multiple_of(row_bytes) {
        return Err(Error::ShapeBlobMismatch {
            name: path.display().to_string(),
            expected: row_bytes,
            found: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut shape = vec![bytes.len() / row_bytes as usize];
    shape.extend_from_slice(&spec.input_shape);
    Tensor::new(values, shape)
}

/// Shape of a seeded convolutional test network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvNetConfig {
    /// Weight layers including the first conv and the classifier; at least 2.
    pub layers: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub width: usize,
    pub spatial: usize,
    pub seed: u64,
    /// Pool before the classifier instead of flattening. Pooling averages
    /// away most of the input dependence of random-weight features, so the
    /// float predictions tend to collapse onto one class.
    pub global_pool: bool,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        ConvNetConfig {
            layers: 6,
            classes: 10,
            in_channels: 3,
            width: 8,
            spatial: 8,
            seed: 0,
            global_pool: false,
        }
    }
}

/// A ResNet-flavoured stack: first 3x3 conv, alternating 3x3 / 1x1 convs,
/// flattened (or globally pooled) features, fully connected classifier.
/// Returns the weight recipe and the matching topology.
pub fn convnet_blueprint(
    model_name: &str,
    cfg: &ConvNetConfig,
) -> Result<(SyntheticSpec, NetworkSpec)> {
    if cfg.layers < 2 {
        return Err(net_err(
            "blueprint".into(),
            "at least 2 weight layers required",
        ));
    }
    let mut weights = Vec::with_capacity(cfg.layers);
    let mut net = Vec::with_capacity(cfg.layers + 1);

    weights.push(SyntheticLayer {
        name: "conv0".into(),
        layer_type: LayerType::FirstConv,
        shape: vec![cfg.width, cfg.in_channels, 3, 3],
        std: None,
    });
    net.push(LayerSpec::Conv2d {
        weight: "conv0".into(),
        in_channels: cfg.in_channels,
        out_channels: cfg.width,
        kernel: 3,
        activation: Activation::Relu,
    });
    for i in 1..cfg.layers - 1 {
        let (kernel, layer_type) = if i % 2 == 1 {
            (3, LayerType::Conv3x3)
        } else {
            (1, LayerType::Conv1x1)
        };
        let name = format!("conv{i}");
        weights.push(SyntheticLayer {
            name: name.clone(),
            layer_type,
            shape: vec![cfg.width, cfg.width, kernel, kernel],
            std: None,
        });
        net.push(LayerSpec::Conv2d {
            weight: name,
            in_channels: cfg.width,
            out_channels: cfg.width,
            kernel,
            activation: Activation::Relu,
        });
    }
    let features = if cfg.global_pool {
        net.push(LayerSpec::GlobalAvgPool);
        cfg.width
    } else {
        cfg.width * cfg.spatial * cfg.spatial
    };
    weights.push(SyntheticLayer {
        name: "fc".into(),
        layer_type: LayerType::FullyConnected,
        shape: vec![cfg.classes, features],
        std: None,
    });
    net.push(LayerSpec::Dense {
        weight: "fc".into(),
        in_features: features,
        out_features: cfg.classes,
        activation: Activation::None,
    });

    let synthetic = SyntheticSpec {
        model_name: model_name.into(),
        seed: cfg.seed,
        layers: weights,
    };
    let network = NetworkSpec {
        input_shape: vec![cfg.in_channels, cfg.spatial, cfg.spatial],
        layers: net,
        classes: cfg.classes,
    };
    Ok((synthetic, network))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic_model, LayerRecord};

    fn identity_net(n: usize) -> (NetworkSpec, ModelWeights<f32>) {
        let mut eye = vec![0.0f32; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let spec = NetworkSpec {
            input_shape: vec![n],
            layers: vec![LayerSpec::Dense {
                weight: "fc".into(),
                in_features: n,
                out_features: n,
                activation: Activation::None,
            }],
            classes: n,
        };
        let w = ModelWeights::new(
            "eye",
            vec![LayerRecord {
                name: "fc".into(),
                position: 0,
                layer_type: LayerType::FullyConnected,
                weights: Tensor::new(eye, vec![n, n]).unwrap(),
            }],
        )
        .unwrap();
        (spec, w)
    }

    fn convnet(seed: u64, layers: usize) -> (NetworkSpec, ModelWeights<f32>) {
        let cfg = ConvNetConfig {
            layers,
            seed,
            ..Default::default()
        };
        let (syn, net) = convnet_blueprint("cnn", &cfg).unwrap();
        (net, generate_synthetic_model(&syn).unwrap())
    }

    #[test]
    fn flattened_head_predictions_vary() {
        let (spec, w) = convnet(0, 3);
        assert_eq!(w.layer("fc").unwrap().weights.shape(), [10, 8 * 8 * 8]);
        let batch = random_batch::<f32>(&spec, 256, 2);
        let out = forward(&spec, &w, &batch).unwrap();
        let mut seen = [false; 10];
        for row in out.values().chunks_exact(10) {
            seen[argmax(row)] = true;
        }
        assert!(seen.iter().filter(|&&s| s).count() >= 3);
    }

    #[test]
    fn dense_reads_flattened_input() {
        let spec = NetworkSpec {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::Dense {
                weight: "fc".into(),
                in_features: 4,
                out_features: 1,
                activation: Activation::None,
            }],
            classes: 1,
        };
        let w = ModelWeights::new(
            "flat",
            vec![LayerRecord {
                name: "fc".into(),
                position: 0,
                layer_type: LayerType::FullyConnected,
                weights: Tensor::new(vec![1.0f32, 2.0, 3.0, 4.0], vec![1, 4]).unwrap(),
            }],
        )
        .unwrap();
        let batch = Tensor::new(vec![1.0f32, 1.0, 1.0, 2.0], vec![1, 1, 2, 2]).unwrap();
        assert_eq!(forward(&spec, &w, &batch).unwrap().values(), [14.0]);
    }

    #[test]
    fn identity_dense() {
        let (spec, w) = identity_net(4);
        let batch =
            Tensor::new(vec![1.0, -2.0, 3.5, 0.25, 0.0, 1.0, 2.0, 3.0], vec![2, 4]).unwrap();
        let out = forward(&spec, &w, &batch).unwrap();
        assert_eq!(out.values(), batch.values());
    }

    #[test]
    fn zero_weights_zero_logits() {
        let (spec, w) = convnet(3, 4);
        let zero = w
            .map_weights(|l| Ok(Tensor::zeros(l.weights.shape().to_vec())))
            .unwrap();
        let batch = random_batch::<f32>(&spec, 5, 1);
        let out = forward(&spec, &zero, &batch).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[5, 10]);
    }

    #[test]
    fn forward_is_deterministic() {
        let (spec, w) = convnet(11, 5);
        let batch = random_batch::<f32>(&spec, 64, 2);
        let a = forward(&spec, &w, &batch).unwrap();
        let b = forward(&spec, &w, &batch).unwrap();
        let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn parallel_rows_match_sequential() {
        let (spec, w) = convnet(5, 4);
        let batch = random_batch::<f32>(&spec, 16, 9);
        let all = forward(&spec, &w, &batch).unwrap();
        for i in 0..16 {
            let row = Tensor::new(
                batch.values()[i * 192..(i + 1) * 192].to_vec(),
                vec![1, 3, 8, 8],
            )
            .unwrap();
            let one = forward(&spec, &w, &row).unwrap();
            assert_eq!(one.values(), &all.values()[i * 10..(i + 1) * 10]);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 channel 3x3 input, one 3x3 kernel of ones: each output is the sum of its in-bounds neighbourhood.
        let spec = NetworkSpec {
            input_shape: vec![1, 3, 3],
            layers: vec![
                LayerSpec::Conv2d {
                    weight: "k".into(),
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 3,
                    activation: Activation::None,
                },
                LayerSpec::GlobalAvgPool,
            ],
            classes: 1,
        };
        let w = ModelWeights::new(
            "c",
            vec![LayerRecord {
                name: "k".into(),
                position: 0,
                layer_type: LayerType::Conv3x3,
                weights: Tensor::new(vec![1.0f32; 9], vec![1, 1, 3, 3]).unwrap(),
            }],
        )
        .unwrap();
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let batch = Tensor::new(x.clone(), vec![1, 1, 3, 3]).unwrap();
        // Brute force: average over output pixels of neighbourhood sums.
        let mut total = 0.0;
        for y in 0..3i32 {
            for xx in 0..3i32 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (iy, ix) = (y + dy, xx + dx);
                        if (0..3).contains(&iy) && (0..3).contains(&ix) {
                            total += x[(iy * 3 + ix) as usize];
                        }
                    }
                }
            }
        }
        let out = forward(&spec, &w, &batch).unwrap();
        assert_eq!(out.values(), &[total / 9.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let (mut spec, w) = convnet(1, 4);
        if let LayerSpec::Dense { in_features, .. } = spec.layers.last_mut().unwrap() {
            *in_features = 7;
        }
        let batch = random_batch::<f32>(&spec, 2, 0);
        let err = forward(&spec, &w, &batch).unwrap_err();
        assert!(
            matches!(&err, Error::Network { layer, .. } if layer == "fc"),
            "{err}"
        );

        let (spec, w) = convnet(1, 4);
        let bad = Tensor::zeros(vec![2, 3, 4, 4]);
        assert!(matches!(
            forward(&spec, &w, &bad),
            Err(Error::BatchShape { .. })
        ));
    }

    #[test]
    fn self_agreement() {
        let (spec, w) = convnet(4, 5);
        let batch = random_batch::<f32>(&spec, 128, 3);
        let r = evaluate_agreement(&spec, &w, &w, &batch, 1).unwrap();
        assert_eq!(r.top1_agreement, 1.0);
        assert_eq!(r.topk_agreement, 1.0);
        assert_eq!(r.model_qmse, 0.0);
        let r = evaluate_agreement(&spec, &w, &w, &batch, 10).unwrap();
        assert_eq!(r.topk_agreement, 1.0);
    }

    #[test]
    fn zero_weights_agree_at_chance() {
        let (spec, w) = convnet(8, 4);
        let zero = w
            .map_weights(|l| Ok(Tensor::zeros(l.weights.shape().to_vec())))
            .unwrap();
        let batch = random_batch::<f32>(&spec, 512, 5);
        let r = evaluate_agreement(&spec, &w, &zero, &batch, 3).unwrap();
        // All-zero logits tie; the lowest index (class 0) wins, so agreement is
        // the share of rows whose float argmax is class 0, and top-3 covers classes 0..3.
        let logits = forward(&spec, &w, &batch).unwrap();
        let labels: Vec<usize> = logits.values().chunks_exact(10).map(argmax).collect();
        let want1 = labels.iter().filter(|&&l| l == 0).count() as f32 / 512.0;
        let want3 = labels.iter().filter(|&&l| l < 3).count() as f32 / 512.0;
        assert_eq!(r.top1_agreement, want1);
        assert_eq!(r.topk_agreement, want3);
        assert!(r.model_qmse > 0.0);
        assert!((r.avg_loss - 10f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn top1_never_exceeds_topk() {
        let (spec, w) = convnet(2, 6);
        let batch = random_batch::<f32>(&spec, 256, 4);
        for b in BitWidth::ALL {
            let q = w.fake_quantize(&AffineQuantizer, |_| b).unwrap();
            for k in [1, 2, 5] {
                let r = evaluate_agreement(&spec, &w, &q, &batch, k).unwrap();
                assert!(r.top1_agreement <= r.topk_agreement);
            }
        }
    }

    #[test]
    fn agreement_errors() {
        let (spec, w) = convnet(2, 4);
        let batch = random_batch::<f32>(&spec, 4, 4);
        assert!(matches!(
            evaluate_agreement(&spec, &w, &w, &batch, 0),
            Err(Error::InvalidTopK)
        ));
        let (_, other) = convnet(2, 5);
        assert!(matches!(
            evaluate_agreement(&spec, &w, &other, &batch, 1),
            Err(Error::MismatchedLayers(_))
        ));
    }

    #[test]
    fn rank_correlation_matches_closed_form() {
        // Without ties Spearman is 1 - 6 sum(d^2) / (n (n^2 - 1)).
        let xs = [0.3, 1.2, -0.5, 4.0, 2.2, 0.0];
        let ys = [10.0, 3.0, 7.0, 1.0, 2.0, 8.0];
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64)
                .collect()
        };
        let (rx, ry) = (rank(&xs), rank(&ys));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let n = xs.len() as f64;
        let want = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((rank_correlation(&xs, &ys).unwrap() - want).abs() < 1e-12);
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]),
            Some(-1.0)
        );
        assert_eq!(rank_correlation(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
        // Ties get average ranks: x ranks [1.5, 1.5, 3], y ranks [1, 2, 3].
        let r = rank_correlation(&[5.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn correlation_is_negative_on_seeded_net() {
        let (spec, w) = convnet(21, 5);
        let batch = random_batch::<f32>(&spec, 256, 1);
        let rep = qe_accuracy_correlation(&spec, &w, &batch, &BitWidth::ALL).unwrap();
        assert_eq!(rep.points.len(), 7);
        assert!(rep.rank_correlation < 0.0, "{rep:?}");
    }

    #[test]
    fn correlation_needs_three_points() {
        let (spec, w) = convnet(21, 3);
        let batch = random_batch::<f32>(&spec, 8, 1);
        let bits = [BitWidth::INT8, BitWidth::new(4).unwrap()];
        assert!(matches!(
            qe_accuracy_correlation(&spec, &w, &batch, &bits),
            Err(Error::TooFewPoints(2))
        ));
    }

    #[test]
    fn two_valued_weights_have_no_qmse_spread() {
        // Every layer holds only 0 and 0.5, which land exactly on the
        // lattice at every width, so QMSE is zero everywhere.
        let (spec, w) = convnet(2, 3);
        let binary = w
            .map_weights(|l| {
                let v = l
                    .weights
                    .values()
                    .iter()
                    .map(|&x| if x >= 0.0 { 0.5 } else { 0.0 })
                    .collect();
                Tensor::new(v, l.weights.shape().to_vec())
            })
            .unwrap();
        let batch = random_batch::<f32>(&spec, 32, 1);
        let bits: Vec<BitWidth> = BitWidth::ALL[..3].to_vec();
        let rep = qe_accuracy_correlation(&spec, &binary, &batch, &bits).unwrap();
        assert_eq!(rep.rank_correlation, 0.0);
        assert!(rep.warning.is_some());
        assert!(rep.points.iter().all(|p| p.model_qmse == 0.0));
    }

    #[test]
    fn spec_json_roundtrip() {
        let cfg = ConvNetConfig {
            layers: 3,
            global_pool: true,
            ..Default::default()
        };
        let (_, spec) = convnet_blueprint("cnn", &cfg).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"conv2d\""));
        assert!(text.contains("\"kind\":\"global_avg_pool\""));
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn batch_blob() {
        let (spec, _) = identity_net(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let vals = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        fs::write(
            &p,
            vals.iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let b = load_batch(&p, &spec).unwrap();
        assert_eq!(b.shape(), &[2, 3]);
        fs::write(&p, [0u8; 8]).unwrap();
        assert!(load_batch(&p, &spec).is_err());
    }
}
