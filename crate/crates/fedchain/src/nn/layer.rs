//! Layer kinds with exact forward and backward passes.

use super::tensor::Tensor;
use super::NnError;

/// Elementwise nonlinearity applied inside dense and convolution layers.
/// The softmax head lives in the model, not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-pre).exp());
                s * (1.0 - s)
            }
        }
    }
}

/// One network layer. Convolution weights are [c_out, c_in, kh, kw]; dense
/// weights are [out, in]. Batch-norm keeps its affine parameters and running
/// statistics per channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        w: Tensor,
        b: Tensor,
        activation: Activation,
    },
    Conv2D {
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    MaxPool {
        window: usize,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        epsilon: f64,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
    },
    Flatten,
}

/// Per-layer values captured during forward that backward consumes.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense {
        input: Tensor,
        pre: Tensor,
    },
    Conv2D {
        input: Tensor,
        pre: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    BatchNorm {
        normalized: Tensor,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

/// Gradients for one layer's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    Dense { dw: Tensor, db: Tensor },
    Conv2D { dk: Tensor, db: Tensor },
    BatchNorm { dgamma: Vec<f64>, dbeta: Vec<f64> },
    None,
}

fn shape2(t: &Tensor) -> Result<(usize, usize), NnError> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(NnError::ShapeMismatch(format!(
            "expected rank-2 input, got {other:?}"
        ))),
    }
}

fn shape4(t: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(NnError::ShapeMismatch(format!(
            "expected rank-4 input, got {other:?}"
        ))),
    }
}

/// Channel layout for batch-norm: (channels, leading count, per-channel
/// inner extent). Rank-2 inputs normalize per feature, rank-4 per channel.
fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize), NnError> {
    match shape {
        [n, c] => Ok((*c, *n, 1)),
        [n, c, h, w] => Ok((*c, *n, h * w)),
        other => Err(NnError::ShapeMismatch(format!(
            "batch-norm expects rank-2 or rank-4 input, got {other:?}"
        ))),
    }
}

impl Layer {
    /// Forward pass. Batch-norm consults batch statistics when `training`
    /// and running statistics otherwise; the cache carries the batch
    /// statistics so the model can fold them into the running values.
    pub fn forward(&self, input: &Tensor, training: bool) -> Result<(Tensor, LayerCache), NnError> {
        match self {
            Layer::Dense { w, b, activation } => {
                let (n, in_dim) = shape2(input)?;
                let (out_dim, w_in) = shape2(w)?;
                if w_in != in_dim {
                    return Err(NnError::ShapeMismatch(format!(
                        "dense expects {w_in} features, got {in_dim}"
                    )));
                }
                let x = input.data();
                let wd = w.data();
                let bd = b.data();
                let mut pre = Tensor::zeros(&[n, out_dim]);
                let pd = pre.data_mut();
                for row in 0..n {
                    let xr = &x[row * in_dim..(row + 1) * in_dim];
                    for o in 0..out_dim {
                        let wr = &wd[o * in_dim..(o + 1) * in_dim];
                        let mut acc = bd[o];
                        for i in 0..in_dim {
                            acc += xr[i] * wr[i];
                        }
                        pd[row * out_dim + o] = acc;
                    }
                }
                let mut out = pre.clone();
                for v in out.data_mut() {
                    *v = activation.apply(*v);
                }
                Ok((
                    out,
                    LayerCache::Dense {
                        input: input.clone(),
                        pre,
                    },
                ))
            }
            Layer::Conv2D {
                kernels,
                bias,
                stride,
                padding,
                activation,
            } => {
                let (n, cin, h, w) = shape4(input)?;
                let ks = kernels.shape();
                let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                if kcin != cin {
                    return Err(NnError::ShapeMismatch(format!(
                        "conv expects {kcin} input channels, got {cin}"
                    )));
                }
                let (s, p) = (*stride, *padding);
                if h + 2 * p < kh || w + 2 * p < kw {
                    return Err(NnError::ShapeMismatch(format!(
                        "kernel {kh}x{kw} larger than padded input {h}x{w}"
                    )));
                }
                let oh = (h + 2 * p - kh) / s + 1;
                let ow = (w + 2 * p - kw) / s + 1;
                let x = input.data();
                let kd = kernels.data();
                let bd = bias.data();
                let mut pre = Tensor::zeros(&[n, cout, oh, ow]);
                let pd = pre.data_mut();
                for b in 0..n {
                    for co in 0..cout {
                        let kco = co * cin * kh * kw;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bd[co];
                                for ci in 0..cin {
                                    let xc = (b * cin + ci) * h * w;
                                    let kc = kco + ci * kh * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * s + ky).wrapping_sub(p);
                                        if iy >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * s + kx).wrapping_sub(p);
                                            if ix >= w {
                                                continue;
                                            }
                                            acc += x[xc + iy * w + ix] * kd[kc + ky * kw + kx];
                                        }
                                    }
                                }
                                pd[((b * cout + co) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                let mut out = pre.clone();
                for v in out.data_mut() {
                    *v = activation.apply(*v);
                }
                Ok((
                    out,
                    LayerCache::Conv2D {
                        input: input.clone(),
                        pre,
                    },
                ))
            }
            Layer::MaxPool { window } => {
                let (n, c, h, w) = shape4(input)?;
                let win = *window;
                if win == 0 {
                    return Err(NnError::InvalidSpec("pool window must be >= 1".into()));
                }
                // Floor division: trailing rows/columns that do not fill a
                // window are dropped.
                let (oh, ow) = (h / win, w / win);
                if oh == 0 || ow == 0 {
                    return Err(NnError::ShapeMismatch(format!(
                        "pool window {win} exceeds input {h}x{w}"
                    )));
                }
                let x = input.data();
                let mut out = Tensor::zeros(&[n, c, oh, ow]);
                let od = out.data_mut();
                let mut argmax = vec![0usize; n * c * oh * ow];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_at = 0usize;
                                for dy in 0..win {
                                    for dx in 0..win {
                                        let at = base + (oy * win + dy) * w + (ox * win + dx);
                                        // Strict comparison keeps the first
                                        // maximum on ties, deterministically.
                                        if x[at] > best {
                                            best = x[at];
                                            best_at = at;
                                        }
                                    }
                                }
                                let oi = ((b * c + ch) * oh + oy) * ow + ox;
                                od[oi] = best;
                                argmax[oi] = best_at;
                            }
                        }
                    }
                }
                Ok((
                    out,
                    LayerCache::MaxPool {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::BatchNorm {
                gamma,
                beta,
                epsilon,
                running_mean,
                running_var,
                ..
            } => {
                let (channels, n, inner) = bn_layout(input.shape())?;
                if channels != gamma.len() {
                    return Err(NnError::ShapeMismatch(format!(
                        "batch-norm has {} channels, input has {channels}",
                        gamma.len()
                    )));
                }
                let count = n * inner;
                let x = input.data();
                let (mean, var) = if training {
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    for ch in 0..channels {
                        let mut sum = 0.0;
                        for b in 0..n {
                            let base = (b * channels + ch) * inner;
                            for j in 0..inner {
                                sum += x[base + j];
                            }
                        }
                        let m = sum / count as f64;
                        let mut sq = 0.0;
                        for b in 0..n {
                            let base = (b * channels + ch) * inner;
                            for j in 0..inner {
                                let d = x[base + j] - m;
                                sq += d * d;
                            }
                        }
                        mean[ch] = m;
                        var[ch] = sq / count as f64;
                    }
                    (mean, var)
                } else {
                    (running_mean.clone(), running_var.clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                let mut normalized = Tensor::zeros(input.shape());
                let mut out = Tensor::zeros(input.shape());
                {
                    let nd = normalized.data_mut();
                    let od = out.data_mut();
                    for b in 0..n {
                        for ch in 0..channels {
                            let base = (b * channels + ch) * inner;
                            for j in 0..inner {
                                let xhat = (x[base + j] - mean[ch]) * inv_std[ch];
                                nd[base + j] = xhat;
                                od[base + j] = gamma[ch] * xhat + beta[ch];
                            }
                        }
                    }
                }
                Ok((
                    out,
                    LayerCache::BatchNorm {
                        normalized,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                    },
                ))
            }
            Layer::Flatten => {
                let shape = input.shape();
                if shape.len() < 2 {
                    return Err(NnError::ShapeMismatch(format!(
                        "flatten expects a batch dimension, got {shape:?}"
                    )));
                }
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                let out = input.clone().reshape(&[n, rest])?;
                Ok((
                    out,
                    LayerCache::Flatten {
                        input_shape: shape.to_vec(),
                    },
                ))
            }
        }
    }

    /// Backward pass: given the loss gradient at this layer's output,
    /// return the gradient at its input plus parameter gradients.
    // Index loops mirror the stride arithmetic of the forward pass.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(
        &self,
        cache: &LayerCache,
        d_out: &Tensor,
    ) -> Result<(Tensor, LayerGrads), NnError> {
        match (self, cache) {
            (Layer::Dense { w, activation, .. }, LayerCache::Dense { input, pre }) => {
                let (n, in_dim) = shape2(input)?;
                let (out_dim, _) = shape2(w)?;
                if d_out.shape() != pre.shape() {
                    return Err(NnError::StaleCache("dense gradient shape".into()));
                }
                let x = input.data();
                let wd = w.data();
                let pd = pre.data();
                let gd = d_out.data();
                let mut dw = Tensor::zeros(&[out_dim, in_dim]);
                let mut db = Tensor::zeros(&[out_dim]);
                let mut dx = Tensor::zeros(&[n, in_dim]);
                {
                    let dwd = dw.data_mut();
                    for row in 0..n {
                        for o in 0..out_dim {
                            let dpre = gd[row * out_dim + o] * activation.grad(pd[row * out_dim + o]);
                            if dpre == 0.0 {
                                continue;
                            }
                            db.data_mut()[o] += dpre;
                            let xr = &x[row * in_dim..(row + 1) * in_dim];
                            let wr = &wd[o * in_dim..(o + 1) * in_dim];
                            let dwr = &mut dwd[o * in_dim..(o + 1) * in_dim];
                            let dxr = &mut dx.data_mut()[row * in_dim..(row + 1) * in_dim];
                            for i in 0..in_dim {
                                dwr[i] += dpre * xr[i];
                                dxr[i] += dpre * wr[i];
                            }
                        }
                    }
                }
                Ok((dx, LayerGrads::Dense { dw, db }))
            }
            (
                Layer::Conv2D {
                    kernels,
                    stride,
                    padding,
                    activation,
                    ..
                },
                LayerCache::Conv2D { input, pre },
            ) => {
                let (n, cin, h, w) = shape4(input)?;
                let ks = kernels.shape();
                let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                if d_out.shape() != pre.shape() {
                    return Err(NnError::StaleCache("conv gradient shape".into()));
                }
                let (oh, ow) = (pre.shape()[2], pre.shape()[3]);
                let (s, p) = (*stride, *padding);
                let x = input.data();
                let kd = kernels.data();
                let pd = pre.data();
                let gd = d_out.data();
                let mut dk = Tensor::zeros(kernels.shape());
                let mut db = Tensor::zeros(&[cout]);
                let mut dx = Tensor::zeros(input.shape());
                {
                    let dkd = dk.data_mut();
                    let dbd = db.data_mut();
                    let dxd = dx.data_mut();
                    for b in 0..n {
                        for co in 0..cout {
                            let kco = co * cin * kh * kw;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let oi = ((b * cout + co) * oh + oy) * ow + ox;
                                    let dpre = gd[oi] * activation.grad(pd[oi]);
                                    if dpre == 0.0 {
                                        continue;
                                    }
                                    dbd[co] += dpre;
                                    for ci in 0..cin {
                                        let xc = (b * cin + ci) * h * w;
                                        let kc = kco + ci * kh * kw;
                                        for ky in 0..kh {
                                            let iy = (oy * s + ky).wrapping_sub(p);
                                            if iy >= h {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox * s + kx).wrapping_sub(p);
                                                if ix >= w {
                                                    continue;
                                                }
                                                let xi = xc + iy * w + ix;
                                                let ki = kc + ky * kw + kx;
                                                dkd[ki] += dpre * x[xi];
                                                dxd[xi] += dpre * kd[ki];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((dx, LayerGrads::Conv2D { dk, db }))
            }
            (Layer::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                if d_out.len() != argmax.len() {
                    return Err(NnError::StaleCache("pool gradient shape".into()));
                }
                let mut dx = Tensor::zeros(input_shape);
                let dxd = dx.data_mut();
                for (grad, &at) in d_out.data().iter().zip(argmax) {
                    dxd[at] += grad;
                }
                Ok((dx, LayerGrads::None))
            }
            (
                Layer::BatchNorm { gamma, .. },
                LayerCache::BatchNorm {
                    normalized,
                    inv_std,
                    ..
                },
            ) => {
                let (channels, n, inner) = bn_layout(normalized.shape())?;
                if d_out.shape() != normalized.shape() {
                    return Err(NnError::StaleCache("batch-norm gradient shape".into()));
                }
                let count = (n * inner) as f64;
                let xhat = normalized.data();
                let gd = d_out.data();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for b in 0..n {
                    for ch in 0..channels {
                        let base = (b * channels + ch) * inner;
                        for j in 0..inner {
                            dgamma[ch] += gd[base + j] * xhat[base + j];
                            dbeta[ch] += gd[base + j];
                        }
                    }
                }
                // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                let mut dx = Tensor::zeros(normalized.shape());
                {
                    let dxd = dx.data_mut();
                    for b in 0..n {
                        for ch in 0..channels {
                            let base = (b * channels + ch) * inner;
                            let scale = gamma[ch] * inv_std[ch] / count;
                            for j in 0..inner {
                                dxd[base + j] = scale
                                    * (count * gd[base + j]
                                        - dbeta[ch]
                                        - xhat[base + j] * dgamma[ch]);
                            }
                        }
                    }
                }
                Ok((dx, LayerGrads::BatchNorm { dgamma, dbeta }))
            }
            (Layer::Flatten, LayerCache::Flatten { input_shape }) => {
                let dx = d_out.clone().reshape(input_shape)?;
                Ok((dx, LayerGrads::None))
            }
            _ => Err(NnError::StaleCache(
                "cache variant does not match the layer".into(),
            )),
        }
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { w, b, .. } => w.len() + b.len(),
            Layer::Conv2D { kernels, bias, .. } => kernels.len() + bias.len(),
            Layer::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
            Layer::MaxPool { .. } | Layer::Flatten => 0,
        }
    }
}
