//! A small convolutional network with exact analytic gradients, written
//! directly against 64-bit floats. No BLAS, no autograd: every layer
//! implements its own forward and backward pass, which keeps the whole stack
//! auditable against finite differences.
//!
//! Two reference architectures are provided: `mini_googlenet` (an
//! InceptionLite block of parallel 1x1/3x3/5x5 branches) and `mini_vgg`
//! (plain stacked convolutions). Both end in Dense + Softmax and are trained
//! with soft-target cross-entropy.

mod train;
mod weights_io;

pub use train::{
    train, pretrain_proxy, write_loss_trace_csv, EpochLoss, LabeledTile, PretrainOutcome,
    TrainConfig, TrainMode, TrainOutcome,
};
pub use weights_io::{load_weights, save_weights};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;
use crate::survey::BucketDistribution;
use crate::tiler::TileImage;

#[derive(Debug, Error)]
pub enum ConvNetError {
    #[error("invalid spec at layer {layer}: {message}")]
    InvalidSpec { layer: usize, message: String },
    #[error("shape mismatch at {site}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        site: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid training config field `{field}`: {message}")]
    InvalidTrainConfig {
        field: &'static str,
        message: String,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("target has {actual} entries, network outputs {expected}")]
    BadTargetLength { expected: usize, actual: usize },
    #[error("training requires a Softmax head, found {0}")]
    NeedsSoftmaxHead(String),
    #[error("loss diverged to a non-finite value at epoch {epoch} (learning_rate = {learning_rate})")]
    Diverged { epoch: usize, learning_rate: f64 },
    #[error("weights at {path} were saved for a different network spec")]
    IncompatibleWeights { path: std::path::PathBuf },
    #[error("weight file {path}: {message}")]
    WeightFormat {
        path: std::path::PathBuf,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dense row-major value block with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; count],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    /// Same-padded convolution with an odd square kernel.
    Conv {
        kernel: usize,
        out_channels: usize,
        stride: usize,
    },
    Relu,
    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped.
    MaxPool { size: usize },
    /// Parallel 1x1 / 3x3 / 5x5 convolutions over the same input,
    /// concatenated along the channel axis.
    InceptionLite { c1: usize, c3: usize, c5: usize },
    GlobalAvgPool,
    /// Fully connected layer; flattens whatever shape it receives.
    Dense { out_features: usize },
    Softmax,
}

impl LayerSpec {
    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::InceptionLite { .. } => "inception_lite",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Ordered layer list plus the input shape ([bands, height, width]) the
/// network is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Inception-flavoured default: one conv stem, one InceptionLite block,
    /// global average pooling into a small softmax head.
    pub fn mini_googlenet(input: Vec<usize>, classes: usize) -> Self {
        NetworkSpec {
            input,
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 16,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::InceptionLite { c1: 8, c3: 8, c5: 8 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    out_features: classes,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    /// Plain stacked-convolution alternative in the VGG style:
    /// conv-conv-pool twice, then a flattening dense head.
    pub fn mini_vgg(input: Vec<usize>, classes: usize) -> Self {
        let conv = |out| LayerSpec::Conv {
            kernel: 3,
            out_channels: out,
            stride: 1,
        };
        NetworkSpec {
            input,
            layers: vec![
                conv(8),
                LayerSpec::Relu,
                conv(8),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                conv(16),
                LayerSpec::Relu,
                conv(16),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense {
                    out_features: classes,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    /// SHA-256 of the canonical JSON encoding; stored in weight files so
    /// that weights cannot be loaded into a different architecture.
    pub fn hash(&self) -> [u8; 32] {
        use sha2::Digest;
        let mut hasher = sha2::Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("spec serializes"));
        hasher.finalize().into()
    }

    /// Chain shapes through the layers, verifying compatibility. Returns the
    /// input shape of every layer plus the final output shape.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>, ConvNetError> {
        if self.input.len() != 3 || self.input.iter().any(|&d| d == 0) {
            return Err(ConvNetError::InvalidSpec {
                layer: 0,
                message: format!(
                    "input shape {:?} must be [channels, height, width] with no zero dimension",
                    self.input
                ),
            });
        }
        let mut chain = vec![self.input.clone()];
        for (ix, layer) in self.layers.iter().enumerate() {
            let shape = chain.last().unwrap().clone();
            let err = |message: String| ConvNetError::InvalidSpec { layer: ix, message };
            let need_3d = |shape: &[usize]| -> Result<(usize, usize, usize), ConvNetError> {
                if shape.len() != 3 {
                    Err(ConvNetError::InvalidSpec {
                        layer: ix,
                        message: format!(
                            "{} needs a [channels, height, width] input, got shape {:?}",
                            layer.name(),
                            shape
                        ),
                    })
                } else {
                    Ok((shape[0], shape[1], shape[2]))
                }
            };
            let out = match *layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                    stride,
                } => {
                    let (_c, h, w) = need_3d(&shape)?;
                    if kernel % 2 == 0 || kernel == 0 {
                        return Err(err(format!("conv kernel must be odd, got {kernel}")));
                    }
                    if stride == 0 {
                        return Err(err("conv stride must be at least 1".into()));
                    }
                    if out_channels == 0 {
                        return Err(err("conv must emit at least one channel".into()));
                    }
                    vec![out_channels, h.div_ceil(stride), w.div_ceil(stride)]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { size } => {
                    let (c, h, w) = need_3d(&shape)?;
                    if size == 0 {
                        return Err(err("pool size must be at least 1".into()));
                    }
                    if h / size == 0 || w / size == 0 {
                        return Err(err(format!(
                            "pool of size {size} collapses a {h}x{w} input to zero extent"
                        )));
                    }
                    vec![c, h / size, w / size]
                }
                LayerSpec::InceptionLite { c1, c3, c5 } => {
                    let (_c, h, w) = need_3d(&shape)?;
                    if c1 == 0 || c3 == 0 || c5 == 0 {
                        return Err(err("every inception branch needs at least one channel".into()));
                    }
                    vec![c1 + c3 + c5, h, w]
                }
                LayerSpec::GlobalAvgPool => {
                    let (c, _h, _w) = need_3d(&shape)?;
                    vec![c]
                }
                LayerSpec::Dense { out_features } => {
                    if out_features == 0 {
                        return Err(err("dense must emit at least one feature".into()));
                    }
                    vec![out_features]
                }
                LayerSpec::Softmax => {
                    if shape.len() != 1 {
                        return Err(err(format!(
                            "softmax needs a flat vector, got shape {shape:?}"
                        )));
                    }
                    if ix + 1 != self.layers.len() {
                        return Err(err("softmax may only be the final layer".into()));
                    }
                    shape
                }
            };
            chain.push(out);
        }
        Ok(chain)
    }

    pub fn output_len(&self) -> Result<usize, ConvNetError> {
        let chain = self.shape_chain()?;
        let last = chain.last().unwrap();
        if last.len() != 1 {
            return Err(ConvNetError::InvalidSpec {
                layer: self.layers.len().saturating_sub(1),
                message: format!("network output must be a flat vector, got shape {last:?}"),
            });
        }
        Ok(last[0])
    }
}

/// Shapes of the parameter tensors a layer owns, given its input shape.
fn param_shapes(layer: &LayerSpec, input: &[usize]) -> Vec<Vec<usize>> {
    match *layer {
        LayerSpec::Conv {
            kernel,
            out_channels,
            ..
        } => vec![
            vec![out_channels, input[0], kernel, kernel],
            vec![out_channels],
        ],
        LayerSpec::InceptionLite { c1, c3, c5 } => {
            let cin = input[0];
            vec![
                vec![c1, cin, 1, 1],
                vec![c1],
                vec![c3, cin, 3, 3],
                vec![c3],
                vec![c5, cin, 5, 5],
                vec![c5],
            ]
        }
        LayerSpec::Dense { out_features } => {
            let in_features: usize = input.iter().product();
            vec![vec![out_features, in_features], vec![out_features]]
        }
        _ => Vec::new(),
    }
}

/// The network: spec, per-layer parameter tensors, and a per-layer frozen
/// mask (frozen layers receive zero gradients and zero updates).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub weights: Vec<Vec<Tensor>>,
    pub frozen_mask: Vec<bool>,
    /// Input shape of each layer (derived from the spec, cached).
    layer_inputs: Vec<Vec<usize>>,
}

impl Network {
    /// Validate the spec and initialize parameters: He-style fan-in scaled
    /// normal weights, zero biases. Deterministic in the seed.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, ConvNetError> {
        let chain = spec.shape_chain()?;
        let mut weights = Vec::with_capacity(spec.layers.len());
        for (ix, layer) in spec.layers.iter().enumerate() {
            let shapes = param_shapes(layer, &chain[ix]);
            let mut tensors = Vec::with_capacity(shapes.len());
            for (t_ix, shape) in shapes.into_iter().enumerate() {
                let mut tensor = Tensor::zeros(shape);
                // Even tensor index = weights, odd = bias. Biases stay zero.
                if t_ix % 2 == 0 {
                    let fan_in: usize = tensor.shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut rng = Stream::new(seed, "net-init", &[ix as u64, t_ix as u64]);
                    for v in tensor.values.iter_mut() {
                        *v = std * rng.normal();
                    }
                }
                tensors.push(tensor);
            }
            weights.push(tensors);
        }
        let frozen_mask = vec![false; spec.layers.len()];
        Ok(Network {
            layer_inputs: chain,
            spec,
            weights,
            frozen_mask,
        })
    }

    pub fn output_len(&self) -> usize {
        self.layer_inputs.last().unwrap()[0]
    }

    /// Zero tensors shaped like the parameters — the gradient container.
    pub fn zero_gradients(&self) -> Gradients {
        self.weights
            .iter()
            .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape.clone())).collect())
            .collect()
    }

    fn check_input(&self, tile: &TileImage) -> Result<(), ConvNetError> {
        let actual = vec![tile.bands, tile.height, tile.width];
        if actual != self.spec.input {
            return Err(ConvNetError::ShapeMismatch {
                site: "input".into(),
                expected: self.spec.input.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Forward pass on one tile; returns the final layer's output vector.
    pub fn forward(&self, tile: &TileImage) -> Result<Vec<f64>, ConvNetError> {
        self.check_input(tile)?;
        let mut current = tile.pixels.clone();
        for (ix, layer) in self.spec.layers.iter().enumerate() {
            current = self.layer_forward(ix, layer, &current).output;
        }
        Ok(current)
    }

    /// Forward pass on a batch. Samples are independent, so they run in
    /// parallel; outputs keep the batch order.
    pub fn forward_batch(&self, tiles: &[&TileImage]) -> Result<Vec<Vec<f64>>, ConvNetError> {
        tiles
            .par_iter()
            .map(|t| self.forward(t))
            .collect::<Result<Vec<_>, _>>()
    }

    /// Forward a batch through a 3-way softmax head into bucket
    /// distributions.
    pub fn predict_distributions(
        &self,
        tiles: &[&TileImage],
    ) -> Result<Vec<BucketDistribution>, ConvNetError> {
        if self.output_len() != 3 {
            return Err(ConvNetError::ShapeMismatch {
                site: "output".into(),
                expected: vec![3],
                actual: vec![self.output_len()],
            });
        }
        let outputs = self.forward_batch(tiles)?;
        Ok(outputs
            .into_iter()
            .map(|p| {
                BucketDistribution::new(p[0], p[1], p[2])
                    .expect("softmax output is a simplex point")
            })
            .collect())
    }

    /// Mean soft-target cross-entropy of the network over a batch.
    pub fn batch_loss(
        &self,
        samples: &[(&TileImage, &[f64])],
    ) -> Result<f64, ConvNetError> {
        if samples.is_empty() {
            return Err(ConvNetError::EmptyBatch);
        }
        let losses = samples
            .par_iter()
            .map(|(tile, target)| {
                let p = self.forward(tile)?;
                if p.len() != target.len() {
                    return Err(ConvNetError::BadTargetLength {
                        expected: p.len(),
                        actual: target.len(),
                    });
                }
                Ok(soft_cross_entropy(&p, target))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Backward pass over a batch: mean loss and exact gradients of the mean
    /// loss with respect to every parameter. The Softmax head and the
    /// cross-entropy loss are differentiated jointly, so the gradient
    /// arriving at the logits is exactly (prediction − target) / batch_size.
    /// Frozen layers report zero gradients.
    pub fn backward_batch(
        &self,
        samples: &[(&TileImage, &[f64])],
    ) -> Result<(f64, Gradients), ConvNetError> {
        if samples.is_empty() {
            return Err(ConvNetError::EmptyBatch);
        }
        match self.spec.layers.last() {
            Some(LayerSpec::Softmax) => {}
            other => {
                return Err(ConvNetError::NeedsSoftmaxHead(
                    other.map(|l| l.name().to_string()).unwrap_or_default(),
                ))
            }
        }
        let batch = samples.len() as f64;
        let per_sample = samples
            .par_iter()
            .map(|(tile, target)| self.sample_gradient(tile, target, batch))
            .collect::<Result<Vec<_>, _>>()?;
        // Fixed-order reduction keeps the result bit-stable regardless of
        // the parallel schedule.
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        for (sample_loss, sample_grads) in per_sample {
            loss += sample_loss / batch;
            for (acc_layer, g_layer) in grads.iter_mut().zip(sample_grads) {
                for (acc, g) in acc_layer.iter_mut().zip(g_layer) {
                    for (a, v) in acc.values.iter_mut().zip(g.values) {
                        *a += v;
                    }
                }
            }
        }
        Ok((loss, grads))
    }

    /// One sample's loss and its contribution to the batch-mean gradient.
    fn sample_gradient(
        &self,
        tile: &TileImage,
        target: &[f64],
        batch: f64,
    ) -> Result<(f64, Gradients), ConvNetError> {
        self.check_input(tile)?;
        let n_layers = self.spec.layers.len();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut auxes: Vec<Aux> = Vec::with_capacity(n_layers);
        let mut current = tile.pixels.clone();
        for (ix, layer) in self.spec.layers.iter().enumerate() {
            let Step { output, aux } = self.layer_forward(ix, layer, &current);
            inputs.push(std::mem::replace(&mut current, output));
            auxes.push(aux);
        }
        let probs = current;
        if probs.len() != target.len() {
            return Err(ConvNetError::BadTargetLength {
                expected: probs.len(),
                actual: target.len(),
            });
        }
        let loss = soft_cross_entropy(&probs, target);

        let mut grads = self.zero_gradients();
        // Joint softmax + cross-entropy: start from the logit gradient and
        // skip the softmax layer itself.
        let mut g: Vec<f64> = probs
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) / batch)
            .collect();
        for ix in (0..n_layers - 1).rev() {
            let frozen = self.frozen_mask[ix];
            g = self.layer_backward(ix, &self.spec.layers[ix], &inputs[ix], &auxes[ix], &g, frozen, &mut grads[ix]);
        }
        Ok((loss, grads))
    }

    fn layer_forward(&self, ix: usize, layer: &LayerSpec, input: &[f64]) -> Step {
        let ishape = &self.layer_inputs[ix];
        match *layer {
            LayerSpec::Conv { kernel, stride, .. } => {
                let w = &self.weights[ix][0];
                let b = &self.weights[ix][1];
                Step::plain(conv_forward(
                    input,
                    (ishape[0], ishape[1], ishape[2]),
                    &w.values,
                    &b.values,
                    kernel,
                    stride,
                ))
            }
            LayerSpec::Relu => Step::plain(input.iter().map(|&v| v.max(0.0)).collect()),
            LayerSpec::MaxPool { size } => {
                let (out, argmax) =
                    maxpool_forward(input, (ishape[0], ishape[1], ishape[2]), size);
                Step {
                    output: out,
                    aux: Aux::PoolArgmax(argmax),
                }
            }
            LayerSpec::InceptionLite { c1, c3, c5 } => {
                let dims = (ishape[0], ishape[1], ishape[2]);
                let kernels = [(0usize, 1usize, c1), (2, 3, c3), (4, 5, c5)];
                let mut out = Vec::with_capacity((c1 + c3 + c5) * ishape[1] * ishape[2]);
                for (t_ix, k, _) in kernels {
                    let w = &self.weights[ix][t_ix];
                    let b = &self.weights[ix][t_ix + 1];
                    out.extend(conv_forward(input, dims, &w.values, &b.values, k, 1));
                }
                Step::plain(out)
            }
            LayerSpec::GlobalAvgPool => {
                let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                let plane = h * w;
                Step::plain(
                    (0..c)
                        .map(|ch| {
                            input[ch * plane..(ch + 1) * plane].iter().sum::<f64>()
                                / plane as f64
                        })
                        .collect(),
                )
            }
            LayerSpec::Dense { out_features } => {
                let w = &self.weights[ix][0];
                let b = &self.weights[ix][1];
                let in_features = input.len();
                let mut out = Vec::with_capacity(out_features);
                for o in 0..out_features {
                    let row = &w.values[o * in_features..(o + 1) * in_features];
                    let dot: f64 = row.iter().zip(input).map(|(wv, xv)| wv * xv).sum();
                    out.push(b.values[o] + dot);
                }
                Step::plain(out)
            }
            LayerSpec::Softmax => Step::plain(softmax(input)),
        }
    }

    /// Backward through one layer: fills `grads` (unless frozen) and returns
    /// the gradient with respect to the layer input.
    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        ix: usize,
        layer: &LayerSpec,
        input: &[f64],
        aux: &Aux,
        g_out: &[f64],
        frozen: bool,
        grads: &mut [Tensor],
    ) -> Vec<f64> {
        let ishape = &self.layer_inputs[ix];
        match *layer {
            LayerSpec::Conv { kernel, stride, .. } => {
                let w = &self.weights[ix][0];
                let (dw, db, g_in) = conv_backward(
                    input,
                    (ishape[0], ishape[1], ishape[2]),
                    &w.values,
                    kernel,
                    stride,
                    w.shape[0],
                    g_out,
                    !frozen,
                );
                if !frozen {
                    add_into(&mut grads[0].values, &dw);
                    add_into(&mut grads[1].values, &db);
                }
                g_in
            }
            LayerSpec::Relu => input
                .iter()
                .zip(g_out)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            LayerSpec::MaxPool { .. } => {
                let Aux::PoolArgmax(argmax) = aux else {
                    unreachable!("pool layers always cache argmax indices")
                };
                let mut g_in = vec![0.0; input.len()];
                for (out_ix, &in_ix) in argmax.iter().enumerate() {
                    g_in[in_ix] += g_out[out_ix];
                }
                g_in
            }
            LayerSpec::InceptionLite { c1, c3, c5 } => {
                let dims = (ishape[0], ishape[1], ishape[2]);
                let plane = ishape[1] * ishape[2];
                let mut g_in = vec![0.0; input.len()];
                let mut offset = 0usize;
                for (t_ix, k, branch_c) in [(0usize, 1usize, c1), (2, 3, c3), (4, 5, c5)] {
                    let w = &self.weights[ix][t_ix];
                    let g_branch = &g_out[offset * plane..(offset + branch_c) * plane];
                    let (dw, db, g_part) = conv_backward(
                        input, dims, &w.values, k, 1, branch_c, g_branch, !frozen,
                    );
                    if !frozen {
                        add_into(&mut grads[t_ix].values, &dw);
                        add_into(&mut grads[t_ix + 1].values, &db);
                    }
                    add_into(&mut g_in, &g_part);
                    offset += branch_c;
                }
                g_in
            }
            LayerSpec::GlobalAvgPool => {
                let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                let plane = h * w;
                let mut g_in = Vec::with_capacity(c * plane);
                for ch in 0..c {
                    let per_pixel = g_out[ch] / plane as f64;
                    g_in.extend(std::iter::repeat(per_pixel).take(plane));
                }
                g_in
            }
            LayerSpec::Dense { out_features } => {
                let w = &self.weights[ix][0];
                let in_features = input.len();
                if !frozen {
                    for o in 0..out_features {
                        let g = g_out[o];
                        grads[1].values[o] += g;
                        let row = &mut grads[0].values[o * in_features..(o + 1) * in_features];
                        for (dw, &x) in row.iter_mut().zip(input) {
                            *dw += g * x;
                        }
                    }
                }
                let mut g_in = vec![0.0; in_features];
                for o in 0..out_features {
                    let g = g_out[o];
                    let row = &w.values[o * in_features..(o + 1) * in_features];
                    for (gi, &wv) in g_in.iter_mut().zip(row) {
                        *gi += g * wv;
                    }
                }
                g_in
            }
            LayerSpec::Softmax => {
                unreachable!("softmax is differentiated jointly with the loss")
            }
        }
    }
}

pub type Gradients = Vec<Vec<Tensor>>;

struct Step {
    output: Vec<f64>,
    aux: Aux,
}

impl Step {
    fn plain(output: Vec<f64>) -> Self {
        Step {
            output,
            aux: Aux::None,
        }
    }
}

enum Aux {
    None,
    PoolArgmax(Vec<usize>),
}

fn add_into(acc: &mut [f64], inc: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(inc) {
        *a += v;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one prediction against a soft target, with the
/// prediction clamped below at 1e-12 before the log. NaN predictions pass
/// through (f64::max would silently swallow them), so diverged networks
/// produce a NaN loss instead of a finite clamped one.
pub fn soft_cross_entropy(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            if t == 0.0 {
                0.0
            } else {
                let clamped = if p.is_nan() { p } else { p.max(1e-12) };
                -t * clamped.ln()
            }
        })
        .sum()
}

/// Mean cross-entropy over parallel prediction/target lists.
pub fn batch_cross_entropy(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let n = predictions.len().max(1) as f64;
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| soft_cross_entropy(p, t))
        .sum::<f64>()
        / n
}

/// Same-padded convolution of a [C,H,W] block. Weights are laid out
/// [out, in, ky, kx] row-major; output is [out, ceil(H/stride),
/// ceil(W/stride)].
fn conv_forward(
    input: &[f64],
    (cin, h, w): (usize, usize, usize),
    weights: &[f64],
    bias: &[f64],
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    let cout = bias.len();
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let pad = (kernel - 1) / 2;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        out_plane.fill(bias[o]);
        for i in 0..cin {
            let in_plane = &input[i * h * w..(i + 1) * h * w];
            let w_block = &weights[((o * cin) + i) * kernel * kernel..][..kernel * kernel];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = w_block[ky * kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx).wrapping_sub(pad);
                            if ix < w {
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a same-padded convolution: (d_weights, d_bias, d_input).
/// Parameter gradients are skipped when `want_params` is false (frozen
/// layers), but the input gradient is always produced.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    (cin, h, w): (usize, usize, usize),
    weights: &[f64],
    kernel: usize,
    stride: usize,
    cout: usize,
    g_out: &[f64],
    want_params: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let pad = (kernel - 1) / 2;
    let mut dw = vec![0.0; cout * cin * kernel * kernel];
    let mut db = vec![0.0; cout];
    let mut g_in = vec![0.0; cin * h * w];
    for o in 0..cout {
        let g_plane = &g_out[o * oh * ow..(o + 1) * oh * ow];
        if want_params {
            db[o] += g_plane.iter().sum::<f64>();
        }
        for i in 0..cin {
            let in_plane = &input[i * h * w..(i + 1) * h * w];
            let g_in_plane = &mut g_in[i * h * w..(i + 1) * h * w];
            let w_block = &weights[((o * cin) + i) * kernel * kernel..][..kernel * kernel];
            let dw_block = &mut dw[((o * cin) + i) * kernel * kernel..][..kernel * kernel];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = w_block[ky * kernel + kx];
                    let mut dwv = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let g_in_row = &mut g_in_plane[iy * w..(iy + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx).wrapping_sub(pad);
                            if ix < w {
                                let g = g_row[ox];
                                if want_params {
                                    dwv += g * in_row[ix];
                                }
                                g_in_row[ix] += g * wv;
                            }
                        }
                    }
                    if want_params {
                        dw_block[ky * kernel + kx] += dwv;
                    }
                }
            }
        }
    }
    (dw, db, g_in)
}

/// Non-overlapping max pool; returns the pooled block and the flat input
/// index of each window's maximum (first occurrence wins ties).
fn maxpool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h / size;
    let ow = w / size;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_ix = 0usize;
                for dy in 0..size {
                    for dx in 0..size {
                        let iy = oy * size + dy;
                        let ix = ox * size + dx;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_ix = ch * h * w + iy * w + ix;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_ix);
            }
        }
    }
    (out, argmax)
}
