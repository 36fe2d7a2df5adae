//! White-box projection watermark.
//!
//! A binary mark is embedded by regularizing training so that a secret random
//! projection of the target layer's feature vector lands on the mark's signs.
//! The feature vector is the mean over the output-neuron axis of the layer's
//! weights, flattened over the remaining axes; it therefore lives on the
//! layer's input-channel axis, and a neuron permutation of the layer below
//! scrambles it, which is exactly the geometric attack the re-synchronizer
//! undoes.
//!
//! The bundle metadata records where and how a mark was embedded, never the
//! bits themselves; the bits stay with the verifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, LayerKind, LayerSpec, ModelBundle};
use crate::rng::{streams, CounterRng};
use crate::trainer::{train_with_hook, ParamGrads, Regularizer, TrainConfig, TrainResult};

/// Verifier-side watermark key: everything needed to embed and extract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkRecord {
    pub target_layer: usize,
    /// The binary mark, one 0/1 entry per bit.
    pub bits: Vec<u8>,
    pub projection_seed: u64,
    pub lambda: f64,
    /// Feature dimension at embed time; extraction rejects models whose
    /// target layer disagrees.
    pub feature_dim: usize,
}

/// What the model file itself carries: the mark's location and strength, not
/// its content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkStamp {
    pub target_layer: usize,
    pub bit_count: usize,
    pub projection_seed: u64,
    pub lambda: f64,
}

impl WatermarkRecord {
    /// Random mark of `bit_count` bits drawn from `bits_seed`.
    pub fn generate(
        m: &ModelBundle,
        target_layer: usize,
        bit_count: usize,
        projection_seed: u64,
        bits_seed: u64,
        lambda: f64,
    ) -> Result<Self> {
        if target_layer >= m.depth() {
            return Err(Error::Validation(format!(
                "target layer {target_layer} out of range for depth {}",
                m.depth()
            )));
        }
        if bit_count == 0 {
            return Err(Error::Validation("mark needs at least one bit".into()));
        }
        let mut rng = CounterRng::new(bits_seed, streams::WM_BITS);
        let bits = (0..bit_count).map(|_| (rng.next_u64() & 1) as u8).collect();
        Ok(WatermarkRecord {
            target_layer,
            bits,
            projection_seed,
            lambda,
            feature_dim: feature_dim(&m.layers[target_layer]),
        })
    }

    pub fn stamp(&self) -> WatermarkStamp {
        WatermarkStamp {
            target_layer: self.target_layer,
            bit_count: self.bits.len(),
            projection_seed: self.projection_seed,
            lambda: self.lambda,
        }
    }
}

/// Dimension of the per-neuron-averaged feature vector of a layer.
pub fn feature_dim(spec: &LayerSpec) -> usize {
    match spec.kind {
        LayerKind::FullyConnected { in_dim, .. } => in_dim,
        LayerKind::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            ..
        } => in_channels * kernel_h * kernel_w,
    }
}

/// Mean over the output-neuron axis of the layer's weights, flattened over
/// the remaining axes.
pub fn feature_vector(m: &ModelBundle, layer: usize) -> Result<Vec<f64>> {
    if layer >= m.depth() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range for depth {}",
            m.depth()
        )));
    }
    let spec = &m.layers[layer];
    let w = m.weights[layer].weight.data();
    let dim = feature_dim(spec);
    let mut f = vec![0.0f64; dim];
    match spec.kind {
        LayerKind::FullyConnected { in_dim, out_dim } => {
            for c in 0..in_dim {
                for n in 0..out_dim {
                    f[c] += w[c * out_dim + n] as f64;
                }
            }
            for v in &mut f {
                *v /= out_dim as f64;
            }
        }
        LayerKind::Conv2d { out_channels, .. } => {
            for o in 0..out_channels {
                for (i, fv) in f.iter_mut().enumerate() {
                    *fv += w[o * dim + i] as f64;
                }
            }
            for v in &mut f {
                *v /= out_channels as f64;
            }
        }
    }
    Ok(f)
}

/// Row-major `bit_count x dim` projection with i.i.d. standard normal entries.
fn projection_matrix(seed: u64, bit_count: usize, dim: usize) -> Vec<f64> {
    let mut rng = CounterRng::new(seed, streams::WM_PROJECTION);
    (0..bit_count * dim).map(|_| rng.normal()).collect()
}

fn project(record: &WatermarkRecord, f: &[f64]) -> Vec<f64> {
    let x = projection_matrix(
        record.projection_seed,
        record.bits.len(),
        record.feature_dim,
    );
    (0..record.bits.len())
        .map(|j| {
            f.iter()
                .enumerate()
                .map(|(c, &fc)| x[j * record.feature_dim + c] * fc)
                .sum()
        })
        .collect()
}

fn softplus(p: f64) -> f64 {
    p.max(0.0) + (-p.abs()).exp().ln_1p()
}

fn sigmoid(p: f64) -> f64 {
    1.0 / (1.0 + (-p).exp())
}

/// Training-time regularizer: `lambda` times the binary cross-entropy of the
/// sigmoid projections against the mark, summed over bits.
pub struct WatermarkRegularizer {
    pub record: WatermarkRecord,
}

impl Regularizer for WatermarkRegularizer {
    fn penalty(&self, model: &ModelBundle, grads: &mut [ParamGrads]) -> Result<f64> {
        let record = &self.record;
        let layer = record.target_layer;
        let spec = &model.layers[layer];
        if feature_dim(spec) != record.feature_dim {
            return Err(Error::Shape(format!(
                "target layer feature dim {} does not match record {}",
                feature_dim(spec),
                record.feature_dim
            )));
        }
        if record.lambda == 0.0 {
            return Ok(0.0);
        }
        let f = feature_vector(model, layer)?;
        let x = projection_matrix(
            record.projection_seed,
            record.bits.len(),
            record.feature_dim,
        );
        let mut loss = 0.0;
        let mut df = vec![0.0f64; record.feature_dim];
        for (j, &bit) in record.bits.iter().enumerate() {
            let p: f64 = f
                .iter()
                .enumerate()
                .map(|(c, &fc)| x[j * record.feature_dim + c] * fc)
                .sum();
            let b = bit as f64;
            loss += softplus(p) - b * p;
            let dp = record.lambda * (sigmoid(p) - b);
            for (c, dfc) in df.iter_mut().enumerate() {
                *dfc += x[j * record.feature_dim + c] * dp;
            }
        }
        // the feature averages over output units, so each unit's weight gets
        // an equal share of the feature gradient
        let units = spec.output_units() as f64;
        match spec.kind {
            LayerKind::FullyConnected { in_dim, out_dim } => {
                for c in 0..in_dim {
                    let g = df[c] / units;
                    for n in 0..out_dim {
                        grads[layer].weight[c * out_dim + n] += g;
                    }
                }
            }
            LayerKind::Conv2d { out_channels, .. } => {
                for o in 0..out_channels {
                    for (i, &dfc) in df.iter().enumerate() {
                        grads[layer].weight[o * record.feature_dim + i] += dfc / units;
                    }
                }
            }
        }
        Ok(record.lambda * loss)
    }
}

/// Trains with the watermark regularizer and stamps the result's metadata.
pub fn embed(
    m: &ModelBundle,
    d: &Dataset,
    cfg: &TrainConfig,
    record: &WatermarkRecord,
) -> Result<TrainResult> {
    if record.lambda < 0.0 {
        return Err(Error::Domain("lambda must be nonnegative".into()));
    }
    let reg = WatermarkRegularizer {
        record: record.clone(),
    };
    let mut result = train_with_hook(m, d, cfg, &reg)?;
    result.model.metadata.train = Some(cfg.clone());
    result.model.metadata.watermark = Some(record.stamp());
    Ok(result)
}

/// Extraction outcome: thresholded bits, the raw projections, their Pearson
/// correlation against the +-1 mapped mark, and the bit error rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub bits: Vec<u8>,
    pub projection: Vec<f64>,
    pub pearson: f64,
    pub ber: f64,
}

pub fn extract(m: &ModelBundle, record: &WatermarkRecord) -> Result<Extraction> {
    if record.target_layer >= m.depth() {
        return Err(Error::Shape(format!(
            "record targets layer {} but model has {} layers",
            record.target_layer,
            m.depth()
        )));
    }
    let spec = &m.layers[record.target_layer];
    if feature_dim(spec) != record.feature_dim {
        return Err(Error::Shape(format!(
            "target layer feature dim {} does not match record {}",
            feature_dim(spec),
            record.feature_dim
        )));
    }
    let f = feature_vector(m, record.target_layer)?;
    let projection = project(record, &f);
    let bits: Vec<u8> = projection.iter().map(|&p| (p > 0.0) as u8).collect();
    let signed: Vec<f64> = record
        .bits
        .iter()
        .map(|&b| if b == 1 { 1.0 } else { -1.0 })
        .collect();
    let pearson = pearson(&projection, &signed);
    let errors = bits
        .iter()
        .zip(&record.bits)
        .filter(|(a, b)| a != b)
        .count();
    Ok(Extraction {
        bits,
        projection,
        pearson,
        ber: errors as f64 / record.bits.len() as f64,
    })
}

/// Pearson correlation coefficient; 0.0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
