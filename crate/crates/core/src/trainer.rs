//! Minimal SGD training: cross-entropy, momentum, weight decay, and a
//! regularizer hook for watermark embedding.
//!
//! Mini-batch shuffling draws from a dedicated counter-based stream keyed by
//! `(seed, epoch)`, so seeding decisions elsewhere can never desynchronize a
//! training run. Fine-tuning continues the epoch numbering of the base run
//! but restarts momentum buffers at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::init_weights;
use crate::model::{
    channel_affine, linear_forward, reference_conv_layers, reference_dataset_spec,
    reference_input_shape, reference_mlp_layers, Dataset, LayerKind, ModelBundle,
};
use crate::rng::{streams, CounterRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults used by the desk reference models.
    pub fn reference(seed: u64) -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Validation("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Gradient accumulators mirroring one layer's tensors, in f64.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ParamGrads {
    fn zeros_like(m: &ModelBundle) -> Vec<ParamGrads> {
        m.weights
            .iter()
            .map(|w| ParamGrads {
                weight: vec![0.0; w.weight.len()],
                bias: vec![0.0; w.bias.as_ref().map_or(0, |t| t.len())],
                scale: vec![0.0; w.scale.as_ref().map_or(0, |t| t.len())],
                shift: vec![0.0; w.shift.as_ref().map_or(0, |t| t.len())],
            })
            .collect()
    }
}

/// Extra loss term evaluated once per optimization step. Implementations add
/// their gradient contribution in place and return the penalty value.
pub trait Regularizer {
    fn penalty(&self, model: &ModelBundle, grads: &mut [ParamGrads]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: ModelBundle,
    /// Mean per-sample objective per epoch.
    pub loss_history: Vec<f64>,
}

fn gather_batch(d: &Dataset, indices: &[usize]) -> Tensor {
    let row: usize = d.inputs.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&d.inputs.data()[i * row..(i + 1) * row]);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&d.inputs.shape()[1..]);
    Tensor::new(shape, data).unwrap()
}

/// Cross-entropy of a logit row, plus dL/dlogits scaled by `inv_batch`.
fn softmax_ce_row(logits: &[f32], label: usize, inv_batch: f64, dz: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (k, e) in exps.iter().enumerate() {
        let p = e / sum;
        dz[k] = (p - if k == label { 1.0 } else { 0.0 }) * inv_batch;
    }
    -(exps[label] / sum).ln()
}

/// Mean cross-entropy loss and parameter gradients on one mini-batch.
///
/// The gradient of exactly this value (including the optional regularizer)
/// is what the analytic backward pass returns, which is what the
/// finite-difference oracle checks.
pub fn batch_gradients(
    m: &ModelBundle,
    d: &Dataset,
    indices: &[usize],
    hook: Option<&dyn Regularizer>,
) -> Result<(f64, Vec<ParamGrads>)> {
    let x = gather_batch(d, indices);
    let batch = indices.len();
    let depth = m.depth();

    // forward, keeping the pre-affine linear output of every layer
    let mut inputs: Vec<Tensor> = Vec::with_capacity(depth);
    let mut linear: Vec<Tensor> = Vec::with_capacity(depth);
    let mut pre: Vec<Tensor> = Vec::with_capacity(depth);
    let mut post: Vec<Tensor> = Vec::with_capacity(depth);
    let mut current = x;
    for (spec, w) in m.layers.iter().zip(&m.weights) {
        inputs.push(current.clone());
        let a = linear_forward(spec, w, &current)?;
        let mut z = a.clone();
        channel_affine(spec, w, &mut z);
        let y_data: Vec<f32> = z.data().iter().map(|&v| spec.activation.apply(v)).collect();
        let y = Tensor::new(z.shape().to_vec(), y_data)?;
        linear.push(a);
        pre.push(z);
        post.push(y.clone());
        current = y;
    }

    let logits = post.last().expect("non-empty model");
    let k = m.num_classes();
    let inv_batch = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut dy = vec![0.0f64; logits.len()];
    for (s, &idx) in indices.iter().enumerate() {
        let label = d.labels[idx];
        if label >= k {
            return Err(Error::Validation(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        loss += softmax_ce_row(
            &logits.data()[s * k..(s + 1) * k],
            label,
            inv_batch,
            &mut dy[s * k..(s + 1) * k],
        );
    }
    loss *= inv_batch;

    let mut grads = ParamGrads::zeros_like(m);
    for l in (0..depth).rev() {
        let spec = &m.layers[l];
        let w = &m.weights[l];
        let n = spec.output_units();
        let z = &pre[l];
        let a = &linear[l];
        let per_unit: usize = z.shape()[2..].iter().product::<usize>().max(1);

        // through the activation
        let mut dz = dy;
        for (g, &zv) in dz.iter_mut().zip(z.data()) {
            *g *= spec.activation.grad(zv);
        }

        // through the per-channel affine
        let da = if spec.has_channel_scale {
            let scale = w.scale.as_ref().expect("validated scale");
            let mut da = vec![0.0f64; dz.len()];
            for s in 0..batch {
                for u in 0..n {
                    for p in 0..per_unit {
                        let idx = (s * n + u) * per_unit + p;
                        grads[l].shift[u] += dz[idx];
                        grads[l].scale[u] += a.data()[idx] as f64 * dz[idx];
                        da[idx] = scale.data()[u] as f64 * dz[idx];
                    }
                }
            }
            da
        } else {
            dz
        };

        if w.bias.is_some() {
            for s in 0..batch {
                for u in 0..n {
                    for p in 0..per_unit {
                        grads[l].bias[u] += da[(s * n + u) * per_unit + p];
                    }
                }
            }
        }

        let x_l = &inputs[l];
        let mut dx = vec![0.0f64; x_l.len()];
        match spec.kind {
            LayerKind::FullyConnected { in_dim, out_dim } => {
                let xd = x_l.data();
                let wd = w.weight.data();
                for s in 0..batch {
                    for o in 0..out_dim {
                        let g = da[s * out_dim + o];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..in_dim {
                            grads[l].weight[c * out_dim + o] += xd[s * in_dim + c] as f64 * g;
                            dx[s * in_dim + c] += wd[c * out_dim + o] as f64 * g;
                        }
                    }
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => {
                let [_, c, h, wid] = match x_l.shape() {
                    [n, c, h, w] => [*n, *c, *h, *w],
                    _ => unreachable!("validated conv input"),
                };
                let (oh, ow) = (z.shape()[2], z.shape()[3]);
                let xd = x_l.data();
                let wd = w.weight.data();
                for s in 0..batch {
                    for o in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = da[((s * out_channels + o) * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for i in 0..in_channels {
                                    for ky in 0..kernel_h {
                                        for kx in 0..kernel_w {
                                            let xi = ((s * c + i) * h + oy * stride + ky) * wid
                                                + ox * stride
                                                + kx;
                                            let wi = ((o * in_channels + i) * kernel_h + ky)
                                                * kernel_w
                                                + kx;
                                            grads[l].weight[wi] += xd[xi] as f64 * g;
                                            dx[xi] += wd[wi] as f64 * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dy = dx;
    }

    if let Some(reg) = hook {
        loss += reg.penalty(m, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Loss of `batch_gradients` without the gradients; finite-difference probes
/// call this.
pub fn batch_loss(
    m: &ModelBundle,
    d: &Dataset,
    indices: &[usize],
    hook: Option<&dyn Regularizer>,
) -> Result<f64> {
    batch_gradients(m, d, indices, hook).map(|(loss, _)| loss)
}

struct Velocity {
    weight: Vec<f64>,
    bias: Vec<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

fn sgd_step(
    m: &mut ModelBundle,
    grads: &[ParamGrads],
    velocity: &mut [Velocity],
    cfg: &TrainConfig,
) {
    let update = |w: &mut [f32], g: &[f64], v: &mut [f64]| {
        for i in 0..w.len() {
            let total = g[i] + cfg.weight_decay * w[i] as f64;
            v[i] = cfg.momentum * v[i] + total;
            w[i] = (w[i] as f64 - cfg.learning_rate * v[i]) as f32;
        }
    };
    for (l, lw) in m.weights.iter_mut().enumerate() {
        update(
            lw.weight.data_mut(),
            &grads[l].weight,
            &mut velocity[l].weight,
        );
        if let Some(b) = &mut lw.bias {
            update(b.data_mut(), &grads[l].bias, &mut velocity[l].bias);
        }
        if let Some(s) = &mut lw.scale {
            update(s.data_mut(), &grads[l].scale, &mut velocity[l].scale);
        }
        if let Some(s) = &mut lw.shift {
            update(s.data_mut(), &grads[l].shift, &mut velocity[l].shift);
        }
    }
}

fn train_epoch_range(
    m: &ModelBundle,
    d: &Dataset,
    cfg: &TrainConfig,
    epoch_range: std::ops::Range<usize>,
    hook: Option<&dyn Regularizer>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let mut model = m.clone();
    let mut velocity: Vec<Velocity> = model
        .weights
        .iter()
        .map(|w| Velocity {
            weight: vec![0.0; w.weight.len()],
            bias: vec![0.0; w.bias.as_ref().map_or(0, |t| t.len())],
            scale: vec![0.0; w.scale.as_ref().map_or(0, |t| t.len())],
            shift: vec![0.0; w.shift.as_ref().map_or(0, |t| t.len())],
        })
        .collect();
    let mut history = Vec::with_capacity(epoch_range.len());
    let n = d.len();
    for epoch in epoch_range {
        let mut order: Vec<usize> = (0..n).collect();
        CounterRng::new(cfg.seed, streams::SHUFFLE + epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(&model, d, batch, hook)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            sgd_step(&mut model, &grads, &mut velocity, cfg);
        }
        history.push(epoch_loss / n as f64);
    }
    Ok(TrainResult {
        model,
        loss_history: history,
    })
}

/// SGD training from epoch zero; deterministic in `cfg.seed`.
pub fn train(m: &ModelBundle, d: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    train_epoch_range(m, d, cfg, 0..cfg.epochs, None)
}

/// Training with an extra per-step loss term (watermark embedding).
pub fn train_with_hook(
    m: &ModelBundle,
    d: &Dataset,
    cfg: &TrainConfig,
    hook: &dyn Regularizer,
) -> Result<TrainResult> {
    train_epoch_range(m, d, cfg, 0..cfg.epochs, Some(hook))
}

/// Resume training for `round(theta/100 * base.epochs)` extra epochs.
///
/// `theta` is a percentage of the original epoch budget. Momentum buffers
/// restart at zero; the shuffle stream continues past the base run.
pub fn fine_tune(
    m: &ModelBundle,
    d: &Dataset,
    theta: f64,
    base: &TrainConfig,
) -> Result<TrainResult> {
    if theta < 0.0 {
        return Err(Error::Domain(format!(
            "theta must be nonnegative, got {theta}"
        )));
    }
    let extra = (theta / 100.0 * base.epochs as f64).round() as usize;
    train_epoch_range(m, d, base, base.epochs..base.epochs + extra, None)
}

/// Trains the desk reference model (MLP or conv) on its blob dataset and
/// stamps the metadata needed to regenerate the run.
pub fn train_reference(seed: u64, conv: bool) -> Result<(ModelBundle, Dataset)> {
    let layers = if conv {
        reference_conv_layers()
    } else {
        reference_mlp_layers()
    };
    let spec = reference_dataset_spec(seed, conv);
    let data = spec.realize()?;
    let init = init_weights(&layers, &reference_input_shape(conv), seed)?;
    let cfg = TrainConfig::reference(seed);
    let mut result = train(&init, &data, &cfg)?;
    result.model.metadata.seed = seed;
    result.model.metadata.train = Some(cfg);
    result.model.metadata.dataset = Some(spec);
    Ok((result.model, data))
}
