//! Sequential models: fully-connected and single-path convolutional stacks
//! with ReLU, optional per-neuron bias and folded per-channel scale/shift.
//!
//! The forward pass keeps every intermediate activation so output-similarity
//! analysis can inspect single neurons before and after the nonlinearity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, CounterRng};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use crate::watermark::WatermarkStamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn grad(self, z: f32) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub has_bias: bool,
    pub has_channel_scale: bool,
}

impl LayerSpec {
    pub fn fully_connected(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected { in_dim, out_dim },
            activation,
            has_bias: true,
            has_channel_scale: false,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
            },
            activation,
            has_bias: true,
            has_channel_scale: false,
        }
    }

    /// Number of neurons (output units or output channels) of the layer.
    pub fn output_units(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected { out_dim, .. } => out_dim,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::FullyConnected { in_dim, out_dim } => vec![in_dim, out_dim],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![out_channels, in_channels, kernel_h, kernel_w],
        }
    }
}

/// Weight tensors for one layer.
///
/// Fully-connected weights are `[in, out]` (column n holds neuron n); conv
/// weights are `[out_c, in_c, kh, kw]`. Per-neuron vectors `bias`, `scale`
/// and `shift` all have length `output_units`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub scale: Option<Tensor>,
    pub shift: Option<Tensor>,
}

/// Blob dataset parameters; kept in metadata so any pipeline stage can
/// regenerate the exact training data from the model file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Reshape flat samples to `[c, h, w]` for convolutional models.
    pub image: Option<(usize, usize, usize)>,
}

impl DatasetSpec {
    pub fn realize(&self) -> Result<Dataset> {
        let mut d = make_blobs(self.seed, self.num_classes, self.per_class, self.dim)?;
        if let Some((c, h, w)) = self.image {
            let n = d.labels.len();
            d.inputs = d.inputs.reshape(vec![n, c, h, w])?;
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub watermark: Option<WatermarkStamp>,
}

impl Metadata {
    pub fn bare(seed: u64) -> Self {
        Metadata {
            seed,
            train: None,
            dataset: None,
            watermark: None,
        }
    }
}

/// Ordered layer specs plus their weight tensors; the unit every attack,
/// re-synchronization and serialization step operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub layers: Vec<LayerSpec>,
    pub weights: Vec<LayerWeights>,
    pub input_shape: Vec<usize>,
    pub metadata: Metadata,
}

impl ModelBundle {
    pub fn new(
        layers: Vec<LayerSpec>,
        weights: Vec<LayerWeights>,
        input_shape: Vec<usize>,
        metadata: Metadata,
    ) -> Result<Self> {
        let bundle = ModelBundle {
            layers,
            weights,
            input_shape,
            metadata,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer output shapes (without the batch axis), obtained by walking
    /// the layer chain from `input_shape`. Fails on any dimension mismatch.
    pub fn shape_flow(&self) -> Result<Vec<Vec<usize>>> {
        let mut current = self.input_shape.clone();
        let mut flow = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            current = match spec.kind {
                LayerKind::FullyConnected { in_dim, out_dim } => {
                    let flat: usize = current.iter().product();
                    if flat != in_dim {
                        return Err(Error::Shape(format!(
                            "layer {l}: fc expects {in_dim} inputs, got {flat} from {current:?}"
                        )));
                    }
                    vec![out_dim]
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                } => {
                    let [c, h, w] = match current.as_slice() {
                        [c, h, w] => [*c, *h, *w],
                        other => {
                            return Err(Error::Shape(format!(
                                "layer {l}: conv expects [c,h,w] input, got {other:?}"
                            )))
                        }
                    };
                    if c != in_channels || h < kernel_h || w < kernel_w || stride == 0 {
                        return Err(Error::Shape(format!(
                            "layer {l}: conv {in_channels}->{out_channels} k{kernel_h}x{kernel_w} s{stride} \
                             cannot consume input {current:?}"
                        )));
                    }
                    vec![
                        out_channels,
                        (h - kernel_h) / stride + 1,
                        (w - kernel_w) / stride + 1,
                    ]
                }
            };
            flow.push(current.clone());
        }
        Ok(flow)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() != self.weights.len() {
            return Err(Error::Validation(format!(
                "{} layer specs but {} weight sets",
                self.layers.len(),
                self.weights.len()
            )));
        }
        if let Some(last) = self.layers.last() {
            if last.activation != Activation::Identity {
                return Err(Error::Validation(
                    "last layer activation must be identity".into(),
                ));
            }
        }
        self.shape_flow()?;
        for (l, (spec, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            let expect = spec.weight_shape();
            if w.weight.shape() != expect.as_slice() {
                return Err(Error::Validation(format!(
                    "layer {l}: weight shape {:?} does not match declared {expect:?}",
                    w.weight.shape()
                )));
            }
            let n = spec.output_units();
            for (name, present, tensor) in [
                ("bias", spec.has_bias, &w.bias),
                ("scale", spec.has_channel_scale, &w.scale),
                ("shift", spec.has_channel_scale, &w.shift),
            ] {
                match (present, tensor) {
                    (true, Some(t)) if t.shape() == [n] => {}
                    (true, Some(t)) => {
                        return Err(Error::Validation(format!(
                            "layer {l}: {name} shape {:?}, expected [{n}]",
                            t.shape()
                        )))
                    }
                    (true, None) => {
                        return Err(Error::Validation(format!("layer {l}: missing {name}")))
                    }
                    (false, Some(_)) => {
                        return Err(Error::Validation(format!("layer {l}: unexpected {name}")))
                    }
                    (false, None) => {}
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .last()
            .map(|spec| spec.output_units())
            .unwrap_or(0)
    }
}

/// Labeled inputs; `inputs` is `[n, d]` or `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of sample `i` with a leading batch axis of 1.
    pub fn sample(&self, i: usize) -> Tensor {
        let row: usize = self.inputs.shape()[1..].iter().product();
        let mut shape = vec![1usize];
        shape.extend_from_slice(&self.inputs.shape()[1..]);
        Tensor::new(shape, self.inputs.data()[i * row..(i + 1) * row].to_vec()).unwrap()
    }
}

/// Gaussian clusters centered on the radius-2 vertices of a regular simplex,
/// unit variance per coordinate. Deterministic in `seed`.
pub fn make_blobs(seed: u64, num_classes: usize, per_class: usize, dim: usize) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Validation(
            "make_blobs arguments must be positive".into(),
        ));
    }
    if dim < num_classes {
        return Err(Error::Validation(format!(
            "simplex with {num_classes} vertices needs dim >= {num_classes}, got {dim}"
        )));
    }
    let k = num_classes as f64;
    // Centered one-hot construction: every vertex sits at radius 2 and all
    // pairwise distances are equal.
    let radius_scale = 2.0 / (1.0 - 1.0 / k).sqrt();
    let n = num_classes * per_class;
    let mut rng = CounterRng::new(seed, streams::BLOBS);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for _ in 0..per_class {
            for d in 0..dim {
                let center = if d < num_classes {
                    let base = if d == class { 1.0 - 1.0 / k } else { -1.0 / k };
                    base * radius_scale
                } else {
                    0.0
                };
                data.push((center + rng.normal()) as f32);
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, dim], data)?,
        labels,
        name: format!("blobs-c{num_classes}-p{per_class}-d{dim}-s{seed}"),
    })
}

/// All intermediate activations of one forward pass.
///
/// `pre[l]` is the post-synaptic tensor fed to the activation (after bias and
/// any scale/shift); `post[l]` is the activation output.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.post.last().expect("trace of a non-empty model")
    }
}

fn fc_forward(spec: &LayerSpec, w: &LayerWeights, x: &Tensor) -> Result<Tensor> {
    let (in_dim, out_dim) = match spec.kind {
        LayerKind::FullyConnected { in_dim, out_dim } => (in_dim, out_dim),
        _ => unreachable!(),
    };
    let batch = x.shape()[0];
    let flat: usize = x.shape()[1..].iter().product();
    if flat != in_dim {
        return Err(Error::Shape(format!(
            "fc expects {in_dim} inputs, got {flat}"
        )));
    }
    let xd = x.data();
    let wd = w.weight.data();
    let mut out = vec![0.0f32; batch * out_dim];
    for s in 0..batch {
        for o in 0..out_dim {
            let mut acc = 0.0f64;
            for c in 0..in_dim {
                acc += xd[s * in_dim + c] as f64 * wd[c * out_dim + o] as f64;
            }
            if let Some(b) = &w.bias {
                acc += b.data()[o] as f64;
            }
            out[s * out_dim + o] = acc as f32;
        }
    }
    Tensor::new(vec![batch, out_dim], out)
}

fn conv_forward(spec: &LayerSpec, w: &LayerWeights, x: &Tensor) -> Result<Tensor> {
    let (ic, oc, kh, kw, stride) = match spec.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
        } => (in_channels, out_channels, kernel_h, kernel_w, stride),
        _ => unreachable!(),
    };
    let [batch, c, h, wid] = match x.shape() {
        [n, c, h, w] => [*n, *c, *h, *w],
        other => {
            return Err(Error::Shape(format!(
                "conv expects [n,c,h,w] input, got {other:?}"
            )))
        }
    };
    if c != ic {
        return Err(Error::Shape(format!("conv expects {ic} channels, got {c}")));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (wid - kw) / stride + 1;
    let xd = x.data();
    let wd = w.weight.data();
    let mut out = vec![0.0f32; batch * oc * oh * ow];
    for s in 0..batch {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for i in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let xi = xd
                                    [((s * c + i) * h + oy * stride + ky) * wid + ox * stride + kx];
                                let wi = wd[((o * ic + i) * kh + ky) * kw + kx];
                                acc += xi as f64 * wi as f64;
                            }
                        }
                    }
                    if let Some(b) = &w.bias {
                        acc += b.data()[o] as f64;
                    }
                    out[((s * oc + o) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![batch, oc, oh, ow], out)
}

/// Linear part of a layer (matmul or convolution plus bias), before any
/// channel affine and before the activation.
pub(crate) fn linear_forward(spec: &LayerSpec, w: &LayerWeights, x: &Tensor) -> Result<Tensor> {
    match spec.kind {
        LayerKind::FullyConnected { .. } => fc_forward(spec, w, x),
        LayerKind::Conv2d { .. } => conv_forward(spec, w, x),
    }
}

pub(crate) fn channel_affine(spec: &LayerSpec, w: &LayerWeights, t: &mut Tensor) {
    if !spec.has_channel_scale {
        return;
    }
    let n = spec.output_units();
    let per_unit: usize = t.shape()[2..].iter().product::<usize>().max(1);
    let batch = t.shape()[0];
    let (scale, shift) = (
        w.scale.as_ref().expect("validated scale"),
        w.shift.as_ref().expect("validated shift"),
    );
    let data = t.data_mut();
    for s in 0..batch {
        for u in 0..n {
            let g = scale.data()[u] as f64;
            let b = shift.data()[u] as f64;
            for p in 0..per_unit {
                let idx = (s * n + u) * per_unit + p;
                data[idx] = (g * data[idx] as f64 + b) as f32;
            }
        }
    }
}

/// Batched forward pass returning every intermediate activation.
pub fn forward(m: &ModelBundle, x: &Tensor) -> Result<ForwardTrace> {
    if x.shape().is_empty() || x.shape()[1..] != m.input_shape[..] {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            m.input_shape
        )));
    }
    let mut pre = Vec::with_capacity(m.depth());
    let mut post = Vec::with_capacity(m.depth());
    let mut current = x.clone();
    for (spec, w) in m.layers.iter().zip(&m.weights) {
        let mut z = linear_forward(spec, w, &current)?;
        channel_affine(spec, w, &mut z);
        let y_data: Vec<f32> = z.data().iter().map(|&v| spec.activation.apply(v)).collect();
        let y = Tensor::new(z.shape().to_vec(), y_data)?;
        pre.push(z);
        post.push(y.clone());
        current = y;
    }
    Ok(ForwardTrace { pre, post })
}

/// Top-1 classification error in percent; argmax ties resolve to the lowest
/// class index.
pub fn error_rate(m: &ModelBundle, d: &Dataset) -> Result<f64> {
    if m.num_classes() == 0 {
        return Err(Error::Validation("model has no output layer".into()));
    }
    let trace = forward(m, &d.inputs)?;
    let logits = trace.output();
    let k = m.num_classes();
    let mut wrong = 0usize;
    for (s, &label) in d.labels.iter().enumerate() {
        let row = &logits.data()[s * k..(s + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best != label {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / d.labels.len() as f64)
}

/// He-style seeded initialization for a spec chain.
pub fn init_weights(layers: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<ModelBundle> {
    let mut rng = CounterRng::new(seed, streams::INIT);
    let mut weights = Vec::with_capacity(layers.len());
    for spec in layers {
        let shape = spec.weight_shape();
        let fan_in: usize = match spec.kind {
            LayerKind::FullyConnected { in_dim, .. } => in_dim,
            LayerKind::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
        };
        let gain = match spec.activation {
            Activation::Relu => 2.0f64,
            Activation::Identity => 1.0,
        };
        let std = (gain / fan_in as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f32> = (0..len).map(|_| (std * rng.normal()) as f32).collect();
        let n = spec.output_units();
        weights.push(LayerWeights {
            weight: Tensor::new(shape, data)?,
            bias: spec.has_bias.then(|| Tensor::zeros(vec![n])),
            scale: spec
                .has_channel_scale
                .then(|| Tensor::new(vec![n], vec![1.0; n]).unwrap()),
            shift: spec.has_channel_scale.then(|| Tensor::zeros(vec![n])),
        });
    }
    ModelBundle::new(
        layers.to_vec(),
        weights,
        input_shape.to_vec(),
        Metadata::bare(seed),
    )
}

/// Desk reference MLP: 8 -> 32 -> 32 -> 4, ReLU, bias.
pub fn reference_mlp_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::fully_connected(8, 32, Activation::Relu),
        LayerSpec::fully_connected(32, 32, Activation::Relu),
        LayerSpec::fully_connected(32, 4, Activation::Identity),
    ]
}

/// Desk reference conv stack: 1x8x8 -> Conv(1->8,3x3) -> Conv(8->8,3x3) ->
/// flatten -> FC(128->4).
pub fn reference_conv_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(1, 8, 3, 1, Activation::Relu),
        LayerSpec::conv2d(8, 8, 3, 1, Activation::Relu),
        LayerSpec::fully_connected(128, 4, Activation::Identity),
    ]
}

pub fn reference_input_shape(conv: bool) -> Vec<usize> {
    if conv {
        vec![1, 8, 8]
    } else {
        vec![8]
    }
}

/// Dataset matching the reference models: 4-class blobs, 30 samples per class.
pub fn reference_dataset_spec(seed: u64, conv: bool) -> DatasetSpec {
    DatasetSpec {
        seed,
        num_classes: 4,
        per_class: 30,
        dim: if conv { 64 } else { 8 },
        image: conv.then_some((1, 8, 8)),
    }
}
