//! Model assembly, softmax head, loss, SGD, and checkpoint IO.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use super::layer::{Activation, Layer, LayerCache, LayerGrads};
use super::tensor::Tensor;
use super::NnError;

/// An ordered stack of layers ending in a softmax head. The head is implicit:
/// `forward` returns class probabilities, and the loss pairs them with
/// cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
}

/// Values captured by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_caches: Vec<LayerCache>,
    probs: Tensor,
    training: bool,
}

/// Per-layer parameter gradients, congruent with the model that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Trainable parameters plus batch-norm running statistics; this is the
    /// full state exchanged during federated aggregation.
    pub fn state_len(&self) -> usize {
        self.param_count()
            + self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::BatchNorm { running_mean, .. } => 2 * running_mean.len(),
                    _ => 0,
                })
                .sum::<usize>()
    }

    /// Forward pass producing class probabilities. In training mode
    /// batch-norm layers consume batch statistics and fold them into their
    /// running values (in place, scaled by momentum).
    pub fn forward(
        &mut self,
        input: &Tensor,
        training: bool,
    ) -> Result<(Tensor, ForwardCache), NnError> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (out, cache) = layer.forward(&x, training)?;
            if training {
                if let (
                    Layer::BatchNorm {
                        running_mean,
                        running_var,
                        momentum,
                        ..
                    },
                    LayerCache::BatchNorm {
                        batch_mean,
                        batch_var,
                        ..
                    },
                ) = (&mut *layer, &cache)
                {
                    for ch in 0..running_mean.len() {
                        running_mean[ch] =
                            (1.0 - *momentum) * running_mean[ch] + *momentum * batch_mean[ch];
                        running_var[ch] =
                            (1.0 - *momentum) * running_var[ch] + *momentum * batch_var[ch];
                    }
                }
            }
            caches.push(cache);
            x = out;
        }
        let probs = softmax_rows(&x)?;
        probs.ensure_finite("softmax output")?;
        Ok((
            probs.clone(),
            ForwardCache {
                layer_caches: caches,
                probs,
                training,
            },
        ))
    }

    /// Inference-only forward pass: running batch-norm statistics, no cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut x = input.clone();
        for layer in &self.layers {
            let (out, _) = layer.forward(&x, false)?;
            x = out;
        }
        softmax_rows(&x)
    }

    /// Exact gradients of the mean cross-entropy loss with respect to every
    /// trainable parameter. Requires a cache from a training-mode forward.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients, NnError> {
        if !cache.training {
            return Err(NnError::StaleCache(
                "backward needs a training-mode forward cache".into(),
            ));
        }
        if cache.layer_caches.len() != self.layers.len() {
            return Err(NnError::StaleCache(
                "cache layer count differs from the model".into(),
            ));
        }
        let (n, classes) = match cache.probs.shape() {
            [n, c] => (*n, *c),
            _ => return Err(NnError::StaleCache("cached probabilities not rank-2".into())),
        };
        if labels.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        // Combined softmax + cross-entropy gradient: (p - onehot) / n.
        let mut d = cache.probs.clone();
        {
            let dd = d.data_mut();
            for (row, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(NnError::InvalidLabel {
                        index: row,
                        label,
                        classes,
                    });
                }
                dd[row * classes + label] -= 1.0;
            }
            for v in dd.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        for (idx, (layer, lcache)) in self
            .layers
            .iter()
            .zip(&cache.layer_caches)
            .enumerate()
            .rev()
        {
            let (dx, g) = layer.backward(lcache, &d)?;
            grads[idx] = g;
            d = dx;
        }
        Ok(Gradients { layers: grads })
    }

    /// One SGD step: w <- w - lr * g for every trainable parameter.
    /// Gradients must come from `backward` on this model.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        assert_eq!(
            grads.layers.len(),
            self.layers.len(),
            "gradient/layer count mismatch"
        );
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            match (layer, grad) {
                (Layer::Dense { w, b, .. }, LayerGrads::Dense { dw, db }) => {
                    apply_step(w, dw, lr);
                    apply_step(b, db, lr);
                }
                (Layer::Conv2D { kernels, bias, .. }, LayerGrads::Conv2D { dk, db }) => {
                    apply_step(kernels, dk, lr);
                    apply_step(bias, db, lr);
                }
                (Layer::BatchNorm { gamma, beta, .. }, LayerGrads::BatchNorm { dgamma, dbeta }) => {
                    for (g, d) in gamma.iter_mut().zip(dgamma) {
                        *g -= lr * d;
                    }
                    for (b, d) in beta.iter_mut().zip(dbeta) {
                        *b -= lr * d;
                    }
                }
                (Layer::MaxPool { .. } | Layer::Flatten, LayerGrads::None) => {}
                _ => panic!("gradient variant mismatch"),
            }
        }
    }

    /// Flatten every trainable parameter into one vector: per layer, weights
    /// then biases (dense/conv) or gamma then beta (batch-norm).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b, .. } => {
                    out.extend_from_slice(w.data());
                    out.extend_from_slice(b.data());
                }
                Layer::Conv2D { kernels, bias, .. } => {
                    out.extend_from_slice(kernels.data());
                    out.extend_from_slice(bias.data());
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
                Layer::MaxPool { .. } | Layer::Flatten => {}
            }
        }
        out
    }

    /// Inverse of `flatten_params`; the vector length must match exactly.
    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "parameter vector holds {}, model wants {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0usize;
        let mut take = |len: usize| {
            let s = &flat[at..at + len];
            at += len;
            s
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b, .. } => {
                    let (wl, bl) = (w.len(), b.len());
                    w.data_mut().copy_from_slice(take(wl));
                    b.data_mut().copy_from_slice(take(bl));
                }
                Layer::Conv2D { kernels, bias, .. } => {
                    let (kl, bl) = (kernels.len(), bias.len());
                    kernels.data_mut().copy_from_slice(take(kl));
                    bias.data_mut().copy_from_slice(take(bl));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    let (gl, bl) = (gamma.len(), beta.len());
                    gamma.copy_from_slice(take(gl));
                    beta.copy_from_slice(take(bl));
                }
                Layer::MaxPool { .. } | Layer::Flatten => {}
            }
        }
        Ok(())
    }

    /// Full model state: the trainable flatten vector followed by every
    /// batch-norm running mean and variance, in layer order. This is the
    /// vector federated clients difference and exchange, so the aggregated
    /// model tracks normalization statistics too.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut out = self.flatten_params();
        for layer in &self.layers {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                out.extend_from_slice(running_mean);
                out.extend_from_slice(running_var);
            }
        }
        out
    }

    /// Inverse of `state_vector`.
    pub fn load_state_vector(&mut self, state: &[f64]) -> Result<(), NnError> {
        if state.len() != self.state_len() {
            return Err(NnError::ShapeMismatch(format!(
                "state vector holds {}, model wants {}",
                state.len(),
                self.state_len()
            )));
        }
        let params = self.param_count();
        self.unflatten_params(&state[..params])?;
        let mut at = params;
        for layer in &mut self.layers {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                let ml = running_mean.len();
                running_mean.copy_from_slice(&state[at..at + ml]);
                at += ml;
                let vl = running_var.len();
                running_var.copy_from_slice(&state[at..at + vl]);
                at += vl;
            }
        }
        Ok(())
    }
}

fn apply_step(param: &mut Tensor, grad: &Tensor, lr: f64) {
    assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

/// Numerically stable per-row softmax.
fn softmax_rows(logits: &Tensor) -> Result<Tensor, NnError> {
    let (n, classes) = match logits.shape() {
        [n, c] if *c > 0 => (*n, *c),
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "softmax expects rank-2 scores, got {other:?}"
            )))
        }
    };
    let mut out = logits.clone();
    let data = out.data_mut();
    for row in 0..n {
        let r = &mut data[row * classes..(row + 1) * classes];
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean cross-entropy over a batch of probability rows. Probabilities are
/// clamped at 1e-12 before the log.
pub fn cross_entropy(scores: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    let (n, classes) = match scores.shape() {
        [n, c] => (*n, *c),
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "loss expects rank-2 scores, got {other:?}"
            )))
        }
    };
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {n} score rows",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    let data = scores.data();
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NnError::InvalidLabel {
                index: row,
                label,
                classes,
            });
        }
        let p = data[row * classes + label].clamp(1e-12, 1.0);
        total -= p.ln();
    }
    Ok(total / n as f64)
}

/// Accuracy (argmax match rate) and mean loss over a dataset, evaluated in
/// inference mode in batches of `batch_size`.
pub fn evaluate(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64), NnError> {
    let n = *images
        .shape()
        .first()
        .ok_or_else(|| NnError::ShapeMismatch("images need a batch dimension".into()))?;
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {n} images",
            labels.len()
        )));
    }
    let step = batch_size.max(1);
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0usize;
    while start < n {
        let end = (start + step).min(n);
        let batch = images.slice_rows(start, end)?;
        let probs = model.infer(&batch)?;
        let classes = probs.shape()[1];
        let data = probs.data();
        for row in 0..(end - start) {
            let r = &data[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            let label = labels[start + row];
            if label >= classes {
                return Err(NnError::InvalidLabel {
                    index: start + row,
                    label,
                    classes,
                });
            }
            if best == label {
                correct += 1;
            }
            loss_sum -= r[label].clamp(1e-12, 1.0).ln();
        }
        start = end;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

/// He-uniform initialization: uniform on [-sqrt(6/fan_in), sqrt(6/fan_in)].
fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    t
}

/// Convolutional network shape: conv blocks (3x3 kernels, stride 1, padding
/// preserving, ReLU, each followed by a 2x2 max-pool), one batch-norm after
/// the final block, flatten, a ReLU hidden dense layer, and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    /// Input volume (channels, height, width).
    pub input: (usize, usize, usize),
    /// Output channels per conv block.
    pub conv_channels: Vec<usize>,
    /// Square kernel edge; padding is kernel/2 so odd kernels preserve size.
    pub kernel: usize,
    /// Pool window per block.
    pub pool: usize,
    /// Hidden dense width.
    pub hidden: usize,
    /// Output classes.
    pub classes: usize,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            input: (1, 28, 28),
            conv_channels: vec![8, 8, 16, 16],
            kernel: 3,
            pool: 2,
            hidden: 64,
            classes: 10,
        }
    }
}

/// Fully connected network shape: flatten, sigmoid hidden layers, softmax
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for AnnSpec {
    fn default() -> Self {
        Self {
            input: 784,
            hidden: vec![128, 64],
            classes: 10,
        }
    }
}

/// Build the convolutional model described by `spec` with He-uniform
/// weights, zero biases, and identity batch-norm affine parameters.
pub fn build_cnn<R: Rng + ?Sized>(spec: &CnnSpec, rng: &mut R) -> Result<Model, NnError> {
    let (mut c, mut h, mut w) = spec.input;
    if c == 0 || h == 0 || w == 0 {
        return Err(NnError::InvalidSpec("input volume has a zero dim".into()));
    }
    if spec.conv_channels.is_empty() {
        return Err(NnError::InvalidSpec("at least one conv block".into()));
    }
    if spec.kernel == 0 || spec.pool == 0 || spec.hidden == 0 || spec.classes == 0 {
        return Err(NnError::InvalidSpec("zero-sized layer dimension".into()));
    }
    let k = spec.kernel;
    let pad = k / 2;
    let mut layers = Vec::new();
    for (block, &cout) in spec.conv_channels.iter().enumerate() {
        if cout == 0 {
            return Err(NnError::InvalidSpec(format!("block {block} has 0 channels")));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(NnError::InvalidSpec(format!(
                "block {block}: kernel {k} exceeds {h}x{w} input"
            )));
        }
        let fan_in = c * k * k;
        layers.push(Layer::Conv2D {
            kernels: he_uniform(&[cout, c, k, k], fan_in, rng),
            bias: Tensor::zeros(&[cout]),
            stride: 1,
            padding: pad,
            activation: Activation::Relu,
        });
        h = h + 2 * pad - k + 1;
        w = w + 2 * pad - k + 1;
        layers.push(Layer::MaxPool { window: spec.pool });
        h /= spec.pool;
        w /= spec.pool;
        if h == 0 || w == 0 {
            return Err(NnError::InvalidSpec(format!(
                "block {block}: pooling collapsed the spatial dims"
            )));
        }
        c = cout;
    }
    layers.push(Layer::BatchNorm {
        gamma: vec![1.0; c],
        beta: vec![0.0; c],
        epsilon: 1e-5,
        running_mean: vec![0.0; c],
        running_var: vec![1.0; c],
        momentum: 0.1,
    });
    layers.push(Layer::Flatten);
    let flat = c * h * w;
    layers.push(Layer::Dense {
        w: he_uniform(&[spec.hidden, flat], flat, rng),
        b: Tensor::zeros(&[spec.hidden]),
        activation: Activation::Relu,
    });
    layers.push(Layer::Dense {
        w: he_uniform(&[spec.classes, spec.hidden], spec.hidden, rng),
        b: Tensor::zeros(&[spec.classes]),
        activation: Activation::Identity,
    });
    Ok(Model::new(layers))
}

/// Build the fully connected model described by `spec`. An empty hidden
/// list degenerates to logistic regression.
pub fn build_ann<R: Rng + ?Sized>(spec: &AnnSpec, rng: &mut R) -> Result<Model, NnError> {
    if spec.input == 0 || spec.classes == 0 {
        return Err(NnError::InvalidSpec("zero-sized layer dimension".into()));
    }
    let mut layers = vec![Layer::Flatten];
    let mut width = spec.input;
    for (i, &hidden) in spec.hidden.iter().enumerate() {
        if hidden == 0 {
            return Err(NnError::InvalidSpec(format!("hidden layer {i} has width 0")));
        }
        layers.push(Layer::Dense {
            w: he_uniform(&[hidden, width], width, rng),
            b: Tensor::zeros(&[hidden]),
            activation: Activation::Sigmoid,
        });
        width = hidden;
    }
    layers.push(Layer::Dense {
        w: he_uniform(&[spec.classes, width], width, rng),
        b: Tensor::zeros(&[spec.classes]),
        activation: Activation::Identity,
    });
    Ok(Model::new(layers))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FBH1";

const TAG_DENSE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_BATCHNORM: u8 = 3;
const TAG_FLATTEN: u8 = 4;

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 2,
    }
}

fn act_from(code: u8) -> Result<Activation, NnError> {
    match code {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Sigmoid),
        other => Err(NnError::Checkpoint(format!("unknown activation {other}"))),
    }
}

/// Write a model checkpoint: magic `FBH1`, a layer-spec table, then the
/// little-endian f64 state payload (trainable parameters in flatten order
/// followed by batch-norm running statistics).
pub fn save_checkpoint<W: Write>(model: &Model, out: &mut W) -> Result<(), NnError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    let u32s = |out: &mut W, vals: &[usize]| -> Result<(), NnError> {
        for &v in vals {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        Ok(())
    };
    for layer in model.layers() {
        match layer {
            Layer::Dense { w, activation, .. } => {
                out.write_all(&[TAG_DENSE])?;
                u32s(out, w.shape())?;
                out.write_all(&[act_code(*activation)])?;
            }
            Layer::Conv2D {
                kernels,
                stride,
                padding,
                activation,
                ..
            } => {
                out.write_all(&[TAG_CONV])?;
                u32s(out, kernels.shape())?;
                u32s(out, &[*stride, *padding])?;
                out.write_all(&[act_code(*activation)])?;
            }
            Layer::MaxPool { window } => {
                out.write_all(&[TAG_POOL])?;
                u32s(out, &[*window])?;
            }
            Layer::BatchNorm {
                gamma,
                epsilon,
                momentum,
                ..
            } => {
                out.write_all(&[TAG_BATCHNORM])?;
                u32s(out, &[gamma.len()])?;
                out.write_all(&epsilon.to_le_bytes())?;
                out.write_all(&momentum.to_le_bytes())?;
            }
            Layer::Flatten => out.write_all(&[TAG_FLATTEN])?,
        }
    }
    let state = model.state_vector();
    out.write_all(&(model.param_count() as u64).to_le_bytes())?;
    out.write_all(&(state.len() as u64).to_le_bytes())?;
    for v in state {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read back a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint<R: Read>(input: &mut R) -> Result<Model, NnError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint(format!(
            "bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut byte = [0u8; 1];
    let mut read_u32 = |input: &mut R| -> Result<usize, NnError> {
        input.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf) as usize)
    };
    let layer_count = read_u32(input)?;
    // A checkpoint table larger than any model this crate builds signals
    // corruption, not a huge model.
    if layer_count > 10_000 {
        return Err(NnError::Checkpoint(format!(
            "implausible layer count {layer_count}"
        )));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        input.read_exact(&mut byte)?;
        match byte[0] {
            TAG_DENSE => {
                let out_dim = read_u32(input)?;
                let in_dim = read_u32(input)?;
                input.read_exact(&mut byte)?;
                layers.push(Layer::Dense {
                    w: Tensor::zeros(&[out_dim, in_dim]),
                    b: Tensor::zeros(&[out_dim]),
                    activation: act_from(byte[0])?,
                });
            }
            TAG_CONV => {
                let cout = read_u32(input)?;
                let cin = read_u32(input)?;
                let kh = read_u32(input)?;
                let kw = read_u32(input)?;
                let stride = read_u32(input)?;
                let padding = read_u32(input)?;
                input.read_exact(&mut byte)?;
                if stride == 0 {
                    return Err(NnError::Checkpoint("conv stride 0".into()));
                }
                layers.push(Layer::Conv2D {
                    kernels: Tensor::zeros(&[cout, cin, kh, kw]),
                    bias: Tensor::zeros(&[cout]),
                    stride,
                    padding,
                    activation: act_from(byte[0])?,
                });
            }
            TAG_POOL => {
                let window = read_u32(input)?;
                if window == 0 {
                    return Err(NnError::Checkpoint("pool window 0".into()));
                }
                layers.push(Layer::MaxPool { window });
            }
            TAG_BATCHNORM => {
                let channels = read_u32(input)?;
                input.read_exact(&mut u64buf)?;
                let epsilon = f64::from_le_bytes(u64buf);
                input.read_exact(&mut u64buf)?;
                let momentum = f64::from_le_bytes(u64buf);
                if epsilon.is_nan() || epsilon <= 0.0 {
                    return Err(NnError::Checkpoint("batch-norm epsilon <= 0".into()));
                }
                layers.push(Layer::BatchNorm {
                    gamma: vec![0.0; channels],
                    beta: vec![0.0; channels],
                    epsilon,
                    running_mean: vec![0.0; channels],
                    running_var: vec![0.0; channels],
                    momentum,
                });
            }
            TAG_FLATTEN => layers.push(Layer::Flatten),
            other => return Err(NnError::Checkpoint(format!("unknown layer tag {other}"))),
        }
    }
    let mut model = Model::new(layers);
    input.read_exact(&mut u64buf)?;
    let param_count = u64::from_le_bytes(u64buf) as usize;
    input.read_exact(&mut u64buf)?;
    let state_count = u64::from_le_bytes(u64buf) as usize;
    if param_count != model.param_count() || state_count != model.state_len() {
        return Err(NnError::Checkpoint(format!(
            "payload counts {param_count}/{state_count} disagree with the layer table"
        )));
    }
    let mut state = vec![0.0f64; state_count];
    for v in state.iter_mut() {
        input.read_exact(&mut u64buf)?;
        *v = f64::from_le_bytes(u64buf);
    }
    if input.read(&mut byte)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after payload".into()));
    }
    model.load_state_vector(&state)?;
    Ok(model)
}

/// Checkpoint convenience wrappers over buffered file IO.
pub fn save_checkpoint_file<P: AsRef<Path>>(model: &Model, path: P) -> Result<(), NnError> {
    let mut out = BufWriter::new(File::create(path)?);
    save_checkpoint(model, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint_file<P: AsRef<Path>>(path: P) -> Result<Model, NnError> {
    load_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn tiny_dense_model(rng: &mut impl Rng) -> Model {
        let spec = AnnSpec {
            input: 6,
            hidden: vec![5],
            classes: 3,
        };
        build_ann(&spec, rng).unwrap()
    }

    fn random_input(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let probs = softmax_rows(&logits).unwrap();
        for row in 0..2 {
            let r = &probs.data()[row * 3..(row + 1) * 3];
            let sum: f64 = r.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn loss_of_a_perfect_onehot_is_zero() {
        let scores = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let loss = cross_entropy(&scores, &[1]).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn loss_of_uniform_ten_way_scores_is_ln_ten() {
        let scores = Tensor::from_vec(&[2, 10], vec![0.1; 20]).unwrap();
        let loss = cross_entropy(&scores, &[3, 7]).unwrap();
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_a_direct_summation_oracle() {
        let mut rng = seeded_rng(61);
        let (n, c) = (7, 4);
        let mut scores = Tensor::zeros(&[n, c]);
        for row in 0..n {
            let mut vals: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = vals.iter().sum();
            for v in &mut vals {
                *v /= sum;
            }
            scores.data_mut()[row * c..(row + 1) * c].copy_from_slice(&vals);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let expected: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -scores.data()[i * c + l].ln())
            .sum::<f64>()
            / n as f64;
        let got = cross_entropy(&scores, &labels).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_label_out_of_range() {
        let scores = Tensor::from_vec(&[1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            cross_entropy(&scores, &[3]),
            Err(NnError::InvalidLabel { label: 3, .. })
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_naive_per_neuron_oracle() {
        // Independent oracle: evaluate the same 3-layer sigmoid net one
        // neuron at a time.
        let mut rng = seeded_rng(67);
        let spec = AnnSpec {
            input: 4,
            hidden: vec![6, 5],
            classes: 3,
        };
        let mut model = build_ann(&spec, &mut rng).unwrap();
        let input = random_input(&mut rng, &[2, 4]);
        let (probs, _) = model.forward(&input, false).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for row in 0..2 {
            let mut acts: Vec<f64> = input.data()[row * 4..(row + 1) * 4].to_vec();
            for layer in model.layers() {
                if let Layer::Dense { w, b, activation } = layer {
                    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
                    let mut next = vec![0.0; out_dim];
                    for o in 0..out_dim {
                        let mut acc = b.data()[o];
                        for i in 0..in_dim {
                            acc += w.data()[o * in_dim + i] * acts[i];
                        }
                        next[o] = match activation {
                            Activation::Sigmoid => sig(acc),
                            Activation::Identity => acc,
                            Activation::Relu => acc.max(0.0),
                        };
                    }
                    acts = next;
                }
            }
            let max = acts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = acts.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (i, e) in exps.iter().enumerate() {
                let expected = e / z;
                let got = probs.data()[row * 3 + i];
                assert!(
                    (expected - got).abs() < 1e-12,
                    "row {row} class {i}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn zero_learning_signal_means_zero_gradients() {
        // A huge logit margin drives the softmax to a numerically exact
        // one-hot, so p - y vanishes.
        let mut model = Model::new(vec![Layer::Dense {
            w: Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap(),
            b: Tensor::from_vec(&[2], vec![1000.0, -1000.0]).unwrap(),
            activation: Activation::Identity,
        }]);
        let input = Tensor::from_vec(&[1, 2], vec![0.3, -0.4]).unwrap();
        let (_, cache) = model.forward(&input, true).unwrap();
        let grads = model.backward(&cache, &[0]).unwrap();
        match &grads.layers[0] {
            LayerGrads::Dense { dw, db } => {
                assert!(dw.data().iter().all(|g| g.abs() < 1e-9));
                assert!(db.data().iter().all(|g| g.abs() < 1e-9));
            }
            _ => panic!("wrong gradient variant"),
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn dense_gradient_equals_the_outer_product_formula() {
        // Single sample, identity head: dW = (p - y) x^T, db = p - y.
        let mut rng = seeded_rng(71);
        let mut model = Model::new(vec![Layer::Dense {
            w: he_uniform(&[3, 4], 4, &mut rng),
            b: Tensor::zeros(&[3]),
            activation: Activation::Identity,
        }]);
        let input = random_input(&mut rng, &[1, 4]);
        let (probs, cache) = model.forward(&input, true).unwrap();
        let label = 2usize;
        let grads = model.backward(&cache, &[label]).unwrap();
        let mut delta = probs.data().to_vec();
        delta[label] -= 1.0;
        match &grads.layers[0] {
            LayerGrads::Dense { dw, db } => {
                for o in 0..3 {
                    assert!((db.data()[o] - delta[o]).abs() < 1e-12);
                    for i in 0..4 {
                        let expected = delta[o] * input.data()[i];
                        assert!((dw.data()[o * 4 + i] - expected).abs() < 1e-12);
                    }
                }
            }
            _ => panic!("wrong gradient variant"),
        }
    }

    /// Central finite differences on the loss, perturbing through the
    /// flatten/unflatten view.
    fn finite_diff_check(model: &mut Model, input: &Tensor, labels: &[usize], tol: f64) {
        let (_, cache) = model.forward(input, true).unwrap();
        let analytic = model.backward(&cache, labels).unwrap();
        let flat_grads = flatten_grads(model, &analytic);
        let base = model.flatten_params();
        let h = 1e-5;
        // Probe every parameter on small models.
        for idx in 0..base.len() {
            let mut probe = base.clone();
            probe[idx] = base[idx] + h;
            model.unflatten_params(&probe).unwrap();
            let plus = loss_of(model, input, labels);
            probe[idx] = base[idx] - h;
            model.unflatten_params(&probe).unwrap();
            let minus = loss_of(model, input, labels);
            model.unflatten_params(&base).unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            let denom = numeric.abs().max(flat_grads[idx].abs()).max(1e-6);
            let rel = (numeric - flat_grads[idx]).abs() / denom;
            assert!(
                rel < tol,
                "param {idx}: analytic {} vs numeric {numeric}, rel {rel}",
                flat_grads[idx]
            );
        }
    }

    fn loss_of(model: &mut Model, input: &Tensor, labels: &[usize]) -> f64 {
        // Training-mode forward so batch-norm uses batch statistics, with
        // running stats restored afterwards to keep the loss a pure function.
        let saved: Vec<Layer> = model.layers().to_vec();
        let (probs, _) = model.forward(input, true).unwrap();
        *model = Model::new(saved);
        cross_entropy(&probs, labels).unwrap()
    }

    fn flatten_grads(model: &Model, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.param_count());
        for g in &grads.layers {
            match g {
                LayerGrads::Dense { dw, db } => {
                    out.extend_from_slice(dw.data());
                    out.extend_from_slice(db.data());
                }
                LayerGrads::Conv2D { dk, db } => {
                    out.extend_from_slice(dk.data());
                    out.extend_from_slice(db.data());
                }
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    out.extend_from_slice(dgamma);
                    out.extend_from_slice(dbeta);
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    #[test]
    fn dense_stack_passes_finite_difference_checks() {
        let mut rng = seeded_rng(73);
        for trial in 0..3 {
            let mut model = tiny_dense_model(&mut rng);
            let input = random_input(&mut rng, &[4, 6]);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            finite_diff_check(&mut model, &input, &labels, 1e-4);
            let _ = trial;
        }
    }

    #[test]
    fn conv_pool_stack_passes_finite_difference_checks() {
        let mut rng = seeded_rng(79);
        let spec = CnnSpec {
            input: (1, 6, 6),
            conv_channels: vec![2],
            kernel: 3,
            pool: 2,
            hidden: 4,
            classes: 3,
        };
        let mut model = build_cnn(&spec, &mut rng).unwrap();
        let input = random_input(&mut rng, &[3, 1, 6, 6]);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
        finite_diff_check(&mut model, &input, &labels, 1e-4);
    }

    #[test]
    fn batchnorm_passes_finite_difference_checks() {
        let mut rng = seeded_rng(83);
        let mut model = Model::new(vec![
            Layer::BatchNorm {
                gamma: vec![1.0; 3],
                beta: vec![0.0; 3],
                epsilon: 1e-5,
                running_mean: vec![0.0; 3],
                running_var: vec![1.0; 3],
                momentum: 0.1,
            },
            Layer::Flatten,
            Layer::Dense {
                w: he_uniform(&[2, 12], 12, &mut rng),
                b: Tensor::zeros(&[2]),
                activation: Activation::Identity,
            },
        ]);
        let input = random_input(&mut rng, &[5, 3, 2, 2]);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..2)).collect();
        finite_diff_check(&mut model, &input, &labels, 1e-4);
    }

    #[test]
    fn backward_rejects_inference_cache_and_mismatched_labels() {
        let mut rng = seeded_rng(89);
        let mut model = tiny_dense_model(&mut rng);
        let input = random_input(&mut rng, &[2, 6]);
        let (_, inference) = model.forward(&input, false).unwrap();
        assert!(matches!(
            model.backward(&inference, &[0, 1]),
            Err(NnError::StaleCache(_))
        ));
        let (_, cache) = model.forward(&input, true).unwrap();
        assert!(model.backward(&cache, &[0]).is_err());
        assert!(matches!(
            model.backward(&cache, &[0, 9]),
            Err(NnError::InvalidLabel { .. })
        ));
    }

    #[test]
    fn sgd_step_applies_the_update_rule() {
        let mut model = Model::new(vec![Layer::Dense {
            w: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            b: Tensor::from_vec(&[1], vec![2.0]).unwrap(),
            activation: Activation::Identity,
        }]);
        let grads = Gradients {
            layers: vec![LayerGrads::Dense {
                dw: Tensor::from_vec(&[1, 1], vec![0.5]).unwrap(),
                db: Tensor::from_vec(&[1], vec![1.0]).unwrap(),
            }],
        };
        model.sgd_step(&grads, 0.1);
        match &model.layers()[0] {
            Layer::Dense { w, b, .. } => {
                assert!((w.data()[0] - 0.95).abs() < 1e-15);
                assert!((b.data()[0] - 1.9).abs() < 1e-15);
            }
            _ => unreachable!(),
        }
        let before = model.flatten_params();
        model.sgd_step(&grads, 0.0);
        assert_eq!(model.flatten_params(), before);
    }

    #[test]
    fn sgd_converges_on_a_convex_quadratic() {
        // Minimize f(w) = 0.5 * (w - 3)^2 by feeding the analytic gradient
        // through sgd_step; the minimizer is w = 3.
        let mut model = Model::new(vec![Layer::Dense {
            w: Tensor::from_vec(&[1, 1], vec![0.0]).unwrap(),
            b: Tensor::zeros(&[1]),
            activation: Activation::Identity,
        }]);
        for _ in 0..200 {
            let w = match &model.layers()[0] {
                Layer::Dense { w, .. } => w.data()[0],
                _ => unreachable!(),
            };
            let grads = Gradients {
                layers: vec![LayerGrads::Dense {
                    dw: Tensor::from_vec(&[1, 1], vec![w - 3.0]).unwrap(),
                    db: Tensor::zeros(&[1]),
                }],
            };
            model.sgd_step(&grads, 0.5);
        }
        let w = match &model.layers()[0] {
            Layer::Dense { w, .. } => w.data()[0],
            _ => unreachable!(),
        };
        assert!((w - 3.0).abs() < 1e-6);
    }

    #[test]
    fn default_cnn_shape_and_param_count() {
        let mut rng = seeded_rng(97);
        let mut model = build_cnn(&CnnSpec::default(), &mut rng).unwrap();
        // Hand-computed: conv 80 + 584 + 1168 + 2320, batch-norm 32,
        // dense 1088 + 650.
        assert_eq!(model.param_count(), 5922);
        assert_eq!(model.state_len(), 5922 + 32);
        let input = Tensor::zeros(&[2, 1, 28, 28]);
        let (probs, _) = model.forward(&input, false).unwrap();
        assert_eq!(probs.shape(), &[2, 10]);
    }

    #[test]
    fn cnn_with_too_many_pools_is_rejected() {
        let mut rng = seeded_rng(101);
        let spec = CnnSpec {
            conv_channels: vec![8, 8, 16, 16, 16, 16],
            ..CnnSpec::default()
        };
        assert!(matches!(
            build_cnn(&spec, &mut rng),
            Err(NnError::InvalidSpec(_))
        ));
    }

    #[test]
    fn default_ann_shape_and_param_count() {
        let mut rng = seeded_rng(103);
        let mut model = build_ann(&AnnSpec::default(), &mut rng).unwrap();
        // 784*128+128 + 128*64+64 + 64*10+10.
        assert_eq!(model.param_count(), 109_386);
        let input = Tensor::zeros(&[3, 1, 28, 28]);
        let (probs, _) = model.forward(&input, false).unwrap();
        assert_eq!(probs.shape(), &[3, 10]);
    }

    #[test]
    fn empty_hidden_list_is_logistic_regression() {
        let mut rng = seeded_rng(107);
        let spec = AnnSpec {
            input: 12,
            hidden: vec![],
            classes: 4,
        };
        let model = build_ann(&spec, &mut rng).unwrap();
        assert_eq!(model.layers().len(), 2);
        assert_eq!(model.param_count(), 12 * 4 + 4);
    }

    #[test]
    fn flatten_unflatten_round_trips_bit_exactly() {
        let mut rng = seeded_rng(109);
        let mut model = build_cnn(
            &CnnSpec {
                input: (1, 8, 8),
                conv_channels: vec![3, 4],
                kernel: 3,
                pool: 2,
                hidden: 6,
                classes: 4,
            },
            &mut rng,
        )
        .unwrap();
        let flat = model.flatten_params();
        assert_eq!(flat.len(), model.param_count());
        let mut reloaded = model.clone();
        reloaded.unflatten_params(&flat).unwrap();
        assert_eq!(reloaded, model);
        // Distinct values survive the round trip bit-for-bit.
        let perturbed: Vec<f64> = flat.iter().map(|v| v * 1.5 + 1e-17).collect();
        model.unflatten_params(&perturbed).unwrap();
        assert_eq!(model.flatten_params(), perturbed);
        assert!(model.unflatten_params(&flat[1..]).is_err());
    }

    #[test]
    fn state_vector_covers_batchnorm_buffers() {
        let mut rng = seeded_rng(113);
        let spec = CnnSpec {
            input: (1, 8, 8),
            conv_channels: vec![2],
            kernel: 3,
            pool: 2,
            hidden: 4,
            classes: 3,
        };
        let mut model = build_cnn(&spec, &mut rng).unwrap();
        // Drift the running stats away from init.
        let input = random_input(&mut rng, &[6, 1, 8, 8]);
        model.forward(&input, true).unwrap();
        let state = model.state_vector();
        assert_eq!(state.len(), model.state_len());
        let mut fresh = build_cnn(&spec, &mut seeded_rng(999)).unwrap();
        fresh.load_state_vector(&state).unwrap();
        assert_eq!(fresh, model);
    }

    #[test]
    fn evaluate_reports_accuracy_and_loss() {
        // Identity-on-logits model: class = argmax of the input row.
        let mut model = Model::new(vec![Layer::Dense {
            w: Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
                .unwrap(),
            b: Tensor::zeros(&[3]),
            activation: Activation::Identity,
        }]);
        let images = Tensor::from_vec(
            &[4, 3],
            vec![
                5.0, 0.0, 0.0, //
                0.0, 5.0, 0.0, //
                0.0, 0.0, 5.0, //
                5.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let (acc, _) = evaluate(&model, &images, &[0, 1, 2, 0], 2).unwrap();
        assert_eq!(acc, 1.0);
        let (acc, _) = evaluate(&model, &images, &[1, 1, 2, 0], 3).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);

        // Zero weights give uniform scores, so the loss is ln 10.
        let zero = Model::new(vec![Layer::Dense {
            w: Tensor::zeros(&[10, 3]),
            b: Tensor::zeros(&[10]),
            activation: Activation::Identity,
        }]);
        let (_, loss) = evaluate(&zero, &images, &[0, 1, 2, 3], 4).unwrap();
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-12);

        let _ = model.forward(&images, false).unwrap();
        assert!(matches!(
            evaluate(&model, &Tensor::zeros(&[0, 3]), &[], 4),
            Err(NnError::EmptyDataset)
        ));
    }

    #[test]
    fn evaluate_matches_per_sample_oracle() {
        let mut rng = seeded_rng(127);
        let model = tiny_dense_model(&mut rng);
        let images = random_input(&mut rng, &[9, 6]);
        let labels: Vec<usize> = (0..9).map(|_| rng.gen_range(0..3)).collect();
        let (acc, loss) = evaluate(&model, &images, &labels, 4).unwrap();
        // Oracle: one sample at a time.
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for i in 0..9 {
            let row = images.slice_rows(i, i + 1).unwrap();
            let probs = model.infer(&row).unwrap();
            let r = probs.data();
            let mut best = 0;
            for j in 0..3 {
                if r[j] > r[best] {
                    best = j;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
            loss_sum -= r[labels[i]].clamp(1e-12, 1.0).ln();
        }
        assert!((acc - correct as f64 / 9.0).abs() < 1e-15);
        assert!((loss - loss_sum / 9.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_bit_deterministic_for_a_fixed_seed() {
        let run = |seed: u64| {
            let mut rng = seeded_rng(seed);
            let spec = CnnSpec {
                input: (1, 8, 8),
                conv_channels: vec![2, 3],
                kernel: 3,
                pool: 2,
                hidden: 5,
                classes: 3,
            };
            let mut model = build_cnn(&spec, &mut rng).unwrap();
            for _ in 0..4 {
                let input = random_input(&mut rng, &[5, 1, 8, 8]);
                let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
                let (_, cache) = model.forward(&input, true).unwrap();
                let grads = model.backward(&cache, &labels).unwrap();
                model.sgd_step(&grads, 0.05);
            }
            model.state_vector()
        };
        let a = run(31);
        let b = run(31);
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_ne!(a, run(32));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = seeded_rng(131);
        let spec = CnnSpec {
            input: (1, 8, 8),
            conv_channels: vec![2, 3],
            kernel: 3,
            pool: 2,
            hidden: 5,
            classes: 3,
        };
        let mut model = build_cnn(&spec, &mut rng).unwrap();
        // Touch running stats so the buffers are nontrivial.
        let input = random_input(&mut rng, &[4, 1, 8, 8]);
        model.forward(&input, true).unwrap();

        let mut bytes = Vec::new();
        save_checkpoint(&model, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FBH1");
        let reloaded = load_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(reloaded, model);
        for (a, b) in model
            .state_vector()
            .iter()
            .zip(reloaded.state_vector().iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut rng = seeded_rng(137);
        let model = tiny_dense_model(&mut rng);
        let mut bytes = Vec::new();
        save_checkpoint(&model, &mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            load_checkpoint(&mut bad_magic.as_slice()),
            Err(NnError::Checkpoint(_))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(load_checkpoint(&mut &truncated[..]).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            load_checkpoint(&mut trailing.as_slice()),
            Err(NnError::Checkpoint(_))
        ));
    }
}
