//! Model alterations: the neuron permutation attack and the perturbations
//! used to probe re-synchronization robustness (Gaussian noise, fine-tuning,
//! quantization, magnitude pruning) plus the scalar-multiple integrity
//! attack.
//!
//! Every function is a pure `ModelBundle -> ModelBundle` transformation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, LayerKind, ModelBundle};
use crate::rng::{streams, CounterRng};
use crate::tensor::Permutation;
use crate::trainer::fine_tune;

/// Which layer a perturbation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTarget {
    Index(usize),
    All,
}

/// Tagged perturbation with its magnitude parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Additive noise with std `omega` times the layer weight std.
    GaussianNoise { omega: f64 },
    /// Resume training for `theta` percent of the original epoch budget.
    FineTune { theta: f64 },
    /// Symmetric uniform quantization to `bits` bits.
    Quantize { bits: u32 },
    /// Zero the fraction `t` of smallest-magnitude weights.
    MagnitudePrune { t: f64 },
    /// Scale one neuron's parameters by `1 + k`.
    ScalarMultiple { k: f64, neuron: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub kind: PerturbationKind,
    pub target: LayerTarget,
}

/// Reading of the noise magnitude parameter: the default treats it as a
/// multiplier on the layer's weight std; the alternative treats the product
/// as a variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseModel {
    #[default]
    StdScaled,
    VarianceScaled,
}

fn check_layer(m: &ModelBundle, layer: usize) -> Result<()> {
    if layer >= m.depth() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range for depth {}",
            m.depth()
        )));
    }
    Ok(())
}

/// Permutes the neurons of layer `l` and compensates in layer `l + 1` so the
/// model function is preserved: column `i` of the layer's weights becomes old
/// column `pi(i)` (bias/scale/shift move identically), and the follower's
/// input-channel axis is reordered the same way.
pub fn permute_layer(m: &ModelBundle, layer: usize, p: &Permutation) -> Result<ModelBundle> {
    permute_layer_allowing_relabel(m, layer, p, false)
}

/// As `permute_layer`, but optionally allows the last layer, which relabels
/// the model's output classes.
pub fn permute_layer_allowing_relabel(
    m: &ModelBundle,
    layer: usize,
    p: &Permutation,
    allow_output_relabel: bool,
) -> Result<ModelBundle> {
    check_layer(m, layer)?;
    let n = m.layers[layer].output_units();
    if p.size() != n {
        return Err(Error::Shape(format!(
            "permutation size {} does not match layer {layer} width {n}",
            p.size()
        )));
    }
    let last = layer + 1 == m.depth();
    if last && !allow_output_relabel {
        return Err(Error::Validation(
            "permuting the last layer relabels output classes; refused".into(),
        ));
    }
    let mut out = m.clone();

    // neuron axis of layer l
    {
        let lw = &mut out.weights[layer];
        match m.layers[layer].kind {
            LayerKind::FullyConnected { in_dim, out_dim } => {
                let src = lw.weight.data().to_vec();
                let dst = lw.weight.data_mut();
                for c in 0..in_dim {
                    for i in 0..out_dim {
                        dst[c * out_dim + i] = src[c * out_dim + p.apply(i)];
                    }
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let block = in_channels * kernel_h * kernel_w;
                let src = lw.weight.data().to_vec();
                let dst = lw.weight.data_mut();
                for i in 0..out_channels {
                    let from = p.apply(i) * block;
                    dst[i * block..(i + 1) * block].copy_from_slice(&src[from..from + block]);
                }
            }
        }
        for t in [&mut lw.bias, &mut lw.scale, &mut lw.shift]
            .into_iter()
            .flatten()
        {
            let src = t.data().to_vec();
            let dst = t.data_mut();
            for i in 0..n {
                dst[i] = src[p.apply(i)];
            }
        }
    }

    // compensating input-channel axis of layer l+1
    if !last {
        let follower_kind = m.layers[layer + 1].kind;
        let fw = &mut out.weights[layer + 1];
        match follower_kind {
            LayerKind::FullyConnected { in_dim, out_dim } => {
                // a conv predecessor feeds the follower through a flatten, so
                // rows move in blocks of the spatial size
                let spatial = in_dim / n;
                let src = fw.weight.data().to_vec();
                let dst = fw.weight.data_mut();
                for i in 0..n {
                    for s in 0..spatial {
                        let to = (i * spatial + s) * out_dim;
                        let from = (p.apply(i) * spatial + s) * out_dim;
                        dst[to..to + out_dim].copy_from_slice(&src[from..from + out_dim]);
                    }
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let patch = kernel_h * kernel_w;
                let src = fw.weight.data().to_vec();
                let dst = fw.weight.data_mut();
                for o in 0..out_channels {
                    for i in 0..in_channels {
                        let to = (o * in_channels + i) * patch;
                        let from = (o * in_channels + p.apply(i)) * patch;
                        dst[to..to + patch].copy_from_slice(&src[from..from + patch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn weight_population_std(data: &[f32]) -> f64 {
    let n = data.len() as f64;
    let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Adds i.i.d. Gaussian noise to the weights of one layer. With the default
/// model the noise std is `omega` times the layer's weight std (measured
/// before the noise); biases are left untouched.
pub fn add_gaussian_noise(
    m: &ModelBundle,
    layer: usize,
    omega: f64,
    seed: u64,
) -> Result<ModelBundle> {
    add_gaussian_noise_with(m, layer, omega, seed, NoiseModel::StdScaled)
}

pub fn add_gaussian_noise_with(
    m: &ModelBundle,
    layer: usize,
    omega: f64,
    seed: u64,
    model: NoiseModel,
) -> Result<ModelBundle> {
    check_layer(m, layer)?;
    if omega < 0.0 {
        return Err(Error::Domain(format!(
            "omega must be nonnegative, got {omega}"
        )));
    }
    let mut out = m.clone();
    if omega == 0.0 {
        return Ok(out);
    }
    let sigma = weight_population_std(m.weights[layer].weight.data());
    let std = match model {
        NoiseModel::StdScaled => omega * sigma,
        NoiseModel::VarianceScaled => (omega * sigma).sqrt(),
    };
    let mut rng = CounterRng::new(seed, streams::NOISE + layer as u64);
    for v in out.weights[layer].weight.data_mut() {
        *v = (*v as f64 + std * rng.normal()) as f32;
    }
    Ok(out)
}

/// Symmetric uniform quantization of one layer's weights.
///
/// Scale is `max|w| / (2^(bits-1) - 1)` (for bits = 1 the scale is `max|w|`),
/// values round half away from zero and are de-quantized back to f32. An
/// all-zero layer is a no-op.
pub fn quantize(m: &ModelBundle, layer: usize, bits: u32) -> Result<ModelBundle> {
    check_layer(m, layer)?;
    if bits == 0 || bits > 32 {
        return Err(Error::Domain(format!("bits must be in 1..=32, got {bits}")));
    }
    let mut out = m.clone();
    let data = out.weights[layer].weight.data_mut();
    let max_abs = data
        .iter()
        .fold(0.0f64, |acc, &v| acc.max((v as f64).abs()));
    if max_abs == 0.0 {
        return Ok(out);
    }
    let levels = if bits == 1 {
        1.0
    } else {
        ((1u64 << (bits - 1)) - 1) as f64
    };
    let scale = max_abs / levels;
    for v in data {
        *v = ((*v as f64 / scale).round() * scale) as f32;
    }
    Ok(out)
}

/// Zeroes the `floor(t * count)` smallest-magnitude weights of one layer;
/// magnitude ties break by flat index, ascending.
pub fn magnitude_prune(m: &ModelBundle, layer: usize, t: f64) -> Result<ModelBundle> {
    check_layer(m, layer)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "prune fraction must be in [0,1], got {t}"
        )));
    }
    let mut out = m.clone();
    let data = out.weights[layer].weight.data_mut();
    let count = (t * data.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
    for &i in order.iter().take(count) {
        data[i] = 0.0;
    }
    Ok(out)
}

/// Scales neuron `i`'s full post-synaptic contribution by `1 + k`: its weight
/// column, its bias, and its shift. The direction of the neuron is unchanged,
/// so cosine matching cannot see this attack.
///
/// `k = -1` zeroes the neuron; allowed but degenerate.
pub fn scalar_attack(m: &ModelBundle, layer: usize, neuron: usize, k: f64) -> Result<ModelBundle> {
    check_layer(m, layer)?;
    let n = m.layers[layer].output_units();
    if neuron >= n {
        return Err(Error::Validation(format!(
            "neuron {neuron} out of range for layer width {n}"
        )));
    }
    let mut out = m.clone();
    let factor = 1.0 + k;
    let lw = &mut out.weights[layer];
    match m.layers[layer].kind {
        LayerKind::FullyConnected { in_dim, out_dim } => {
            let data = lw.weight.data_mut();
            for c in 0..in_dim {
                let idx = c * out_dim + neuron;
                data[idx] = (data[idx] as f64 * factor) as f32;
            }
        }
        LayerKind::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let block = in_channels * kernel_h * kernel_w;
            for v in &mut lw.weight.data_mut()[neuron * block..(neuron + 1) * block] {
                *v = (*v as f64 * factor) as f32;
            }
        }
    }
    for t in [&mut lw.bias, &mut lw.shift].into_iter().flatten() {
        let data = t.data_mut();
        data[neuron] = (data[neuron] as f64 * factor) as f32;
    }
    Ok(out)
}

/// Applies a perturbation spec. Fine-tuning needs the training data and the
/// base config from the bundle metadata.
pub fn apply_perturbation(
    m: &ModelBundle,
    spec: &PerturbationSpec,
    seed: u64,
    data: Option<&Dataset>,
) -> Result<ModelBundle> {
    let layers: Vec<usize> = match spec.target {
        LayerTarget::Index(l) => vec![l],
        LayerTarget::All => (0..m.depth()).collect(),
    };
    match spec.kind {
        PerturbationKind::GaussianNoise { omega } => {
            let mut out = m.clone();
            for l in layers {
                out = add_gaussian_noise(&out, l, omega, seed)?;
            }
            Ok(out)
        }
        PerturbationKind::Quantize { bits } => {
            let mut out = m.clone();
            for l in layers {
                out = quantize(&out, l, bits)?;
            }
            Ok(out)
        }
        PerturbationKind::MagnitudePrune { t } => match spec.target {
            LayerTarget::Index(l) => magnitude_prune(m, l, t),
            LayerTarget::All => global_prune(m, t),
        },
        PerturbationKind::ScalarMultiple { k, neuron } => {
            let mut out = m.clone();
            for l in layers {
                out = scalar_attack(&out, l, neuron, k)?;
            }
            Ok(out)
        }
        PerturbationKind::FineTune { theta } => {
            let data = data.ok_or_else(|| {
                Error::Validation("fine-tuning perturbation needs the training dataset".into())
            })?;
            let base = m.metadata.train.clone().ok_or_else(|| {
                Error::Validation("bundle metadata lacks a training config to resume".into())
            })?;
            Ok(fine_tune(m, data, theta, &base)?.model)
        }
    }
}

/// Global magnitude pruning: the threshold pools every layer's weights.
pub fn global_prune(m: &ModelBundle, t: f64) -> Result<ModelBundle> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "prune fraction must be in [0,1], got {t}"
        )));
    }
    let mut out = m.clone();
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    for (l, w) in m.weights.iter().enumerate() {
        for (i, &v) in w.weight.data().iter().enumerate() {
            entries.push((v.abs(), l, i));
        }
    }
    let count = (t * entries.len() as f64).floor() as usize;
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, l, i) in entries.iter().take(count) {
        out.weights[l].weight.data_mut()[i] = 0.0;
    }
    Ok(out)
}
