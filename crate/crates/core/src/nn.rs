//! Layers, the softmax cross-entropy loss, and the sequential network.
//!
//! Convolution and fully connected layers are quantizable: each carries its
//! full-precision weights plus an optional hybrid weight tensor that, when
//! set, replaces the weights in both forward and backward passes. Weight
//! gradients are therefore taken with respect to the hybrid weights and the
//! optimizer applies them to the full-precision copy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{Granularity, PartitionResult};
use crate::quant::QuantizedMatrix;
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv2d_param_grads, gemm_strided, maxpool2d_backward, maxpool2d_forward,
    relu_backward, relu_forward, reshape_as_matrix, ConvGeometry, LayerKind, Tensor,
    WeightMatrixView,
};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
        }
    }
}

/// Full-precision weights of a quantizable layer together with the hybrid
/// weights used for the current iteration.
#[derive(Debug, Clone)]
pub struct QuantWeights {
    pub weight: Param,
    pub bias: Param,
    pub kind: LayerKind,
    hybrid: Option<Tensor>,
    partition: Option<PartitionResult>,
}

impl QuantWeights {
    fn new(weight: Tensor, bias: Tensor, kind: LayerKind) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            kind,
            hybrid: None,
            partition: None,
        }
    }

    pub fn matrix(&self) -> WeightMatrixView<'_> {
        reshape_as_matrix(&self.weight.value, self.kind).expect("layer weights keep their rank")
    }

    /// The weights the forward pass sees: hybrid if set, else full precision.
    pub fn effective(&self) -> &Tensor {
        self.hybrid.as_ref().unwrap_or(&self.weight.value)
    }

    pub fn hybrid(&self) -> Option<&Tensor> {
        self.hybrid.as_ref()
    }

    pub fn partition(&self) -> Option<&PartitionResult> {
        self.partition.as_ref()
    }

    pub fn set_hybrid(&mut self, hybrid: Tensor, partition: Option<PartitionResult>) -> Result<()> {
        if hybrid.shape() != self.weight.value.shape() {
            return Err(Error::shape(format!(
                "hybrid weights {:?} for layer weights {:?}",
                hybrid.shape(),
                self.weight.value.shape()
            )));
        }
        self.hybrid = Some(hybrid);
        self.partition = partition;
        Ok(())
    }

    pub fn clear_hybrid(&mut self) {
        self.hybrid = None;
        self.partition = None;
    }
}

/// Forms the hybrid weights: units in the quantized group take their
/// reconstruction, every other unit keeps its full-precision value.
///
/// `partition` indexes rows under channel-wise granularity and individual
/// weights under element-wise granularity.
pub fn build_hybrid(
    weights: &WeightMatrixView<'_>,
    quantized: &QuantizedMatrix,
    partition: &PartitionResult,
    granularity: Granularity,
) -> Result<Vec<f64>> {
    let (m, d) = (weights.rows(), weights.cols());
    if quantized.rows.len() != m || quantized.cols != d {
        return Err(Error::shape("quantized matrix does not match weights"));
    }
    let unit_len = match granularity {
        Granularity::ChannelWise => d,
        Granularity::ElementWise => 1,
    };
    let units = m * d / unit_len;
    if partition.units() != units {
        return Err(Error::argument(format!(
            "partition covers {} units, layer has {units}",
            partition.units()
        )));
    }
    let mut out = weights.data().to_vec();
    for &u in partition.quantized_indices() {
        let start = u * unit_len;
        let (row, col) = (start / d, start % d);
        out[start..start + unit_len]
            .copy_from_slice(&quantized.rows[row].reconstruction[col..col + unit_len]);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub q: QuantWeights,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<f64>, ConvGeometry)>,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 || bias.len() != weight.shape()[0] {
            return Err(Error::shape(format!(
                "conv weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            q: QuantWeights::new(weight, bias, LayerKind::Conv),
            stride,
            padding,
            cache: None,
        })
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let fwd = conv2d_forward(x, self.q.effective(), Some(&self.q.bias.value), self.stride, self.padding)?;
        self.cache = Some((fwd.cols, fwd.geometry));
        Ok(fwd.output)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (cols, geometry) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("conv backward before forward".into()))?;
        let g = conv2d_backward(grad, cols, geometry, self.q.effective())?;
        self.q.weight.grad = g.weight;
        self.q.bias.grad = g.bias;
        Ok(g.input)
    }

    fn param_backward(&mut self, grad: &Tensor) -> Result<()> {
        let (cols, geometry) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("conv backward before forward".into()))?;
        let (w, b) = conv2d_param_grads(grad, cols, geometry, self.q.effective())?;
        self.q.weight.grad = w;
        self.q.bias.grad = b;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub q: QuantWeights,
    cache: Option<Tensor>,
}

impl Linear {
    /// `weight` is `out x in`.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.len() != weight.shape()[0] {
            return Err(Error::shape(format!(
                "linear weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            q: QuantWeights::new(weight, bias, LayerKind::Linear),
            cache: None,
        })
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let w = self.q.effective();
        let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
        if x.rank() != 2 || x.shape()[1] != in_f {
            return Err(Error::shape(format!(
                "linear layer expects (N, {in_f}) input, got {:?}",
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut out = vec![0.0; n * out_f];
        for row in out.chunks_exact_mut(out_f) {
            row.copy_from_slice(self.q.bias.value.data());
        }
        // y = x W^T + b
        gemm_strided(
            n,
            in_f,
            out_f,
            x.data(),
            (in_f as isize, 1),
            w.data(),
            (1, in_f as isize),
            &mut out,
            1.0,
        );
        self.cache = Some(x.clone());
        Tensor::new(vec![n, out_f], out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("linear backward before forward".into()))?;
        let w = self.q.effective();
        let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
        let n = x.shape()[0];
        if grad.shape() != [n, out_f] {
            return Err(Error::shape(format!(
                "linear backward: gradient {:?}, expected [{n}, {out_f}]",
                grad.shape()
            )));
        }
        let mut gw = vec![0.0; out_f * in_f];
        // dW = g^T x
        gemm_strided(
            out_f,
            n,
            in_f,
            grad.data(),
            (1, out_f as isize),
            x.data(),
            (in_f as isize, 1),
            &mut gw,
            0.0,
        );
        let mut gb = vec![0.0; out_f];
        for row in grad.data().chunks_exact(out_f) {
            gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        let mut gx = vec![0.0; n * in_f];
        // dx = g W
        gemm_strided(
            n,
            out_f,
            in_f,
            grad.data(),
            (out_f as isize, 1),
            w.data(),
            (in_f as isize, 1),
            &mut gx,
            0.0,
        );
        self.q.weight.grad = Tensor::new(vec![out_f, in_f], gw)?;
        self.q.bias.grad = Tensor::new(vec![out_f], gb)?;
        Tensor::new(vec![n, in_f], gx)
    }
}

/// Per-channel batch normalization over `(N, C)` or `(N, C, H, W)` input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    training: bool,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape(format!("batch norm over shape {shape:?}"))),
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (n, c, spatial) = channel_layout(x.shape())?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm for {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let count = (n * spatial) as f64;
        let data = x.data();
        let at = |s: usize, ch: usize, p: usize| (s * c + ch) * spatial + p;

        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    sum += data[at(s, ch, 0)..at(s, ch, 0) + spatial].iter().sum::<f64>();
                }
                let mu = sum / count;
                let mut sq = 0.0;
                for s in 0..n {
                    sq += data[at(s, ch, 0)..at(s, ch, 0) + spatial]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / count;
            }
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var[ch];
            }
            (mean, var)
        } else {
            (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            )
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for s in 0..n {
            for ch in 0..c {
                for p in 0..spatial {
                    let i = at(s, ch, p);
                    let h = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
            training,
        });
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batch norm backward before forward".into()))?;
        if grad.shape() != cache.shape.as_slice() {
            return Err(Error::shape("batch norm backward: gradient shape mismatch"));
        }
        let (n, c, spatial) = channel_layout(&cache.shape)?;
        let count = (n * spatial) as f64;
        let g = grad.data();
        let at = |s: usize, ch: usize, p: usize| (s * c + ch) * spatial + p;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..spatial {
                    let i = at(s, ch, p);
                    dgamma[ch] += g[i] * cache.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let gamma = self.gamma.value.data();
        let mut dx = vec![0.0; g.len()];
        for s in 0..n {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch];
                for p in 0..spatial {
                    let i = at(s, ch, p);
                    dx[i] = if cache.training {
                        k * (g[i] - dbeta[ch] / count - cache.xhat[i] * dgamma[ch] / count)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
        self.gamma.grad = Tensor::new(vec![c], dgamma)?;
        self.beta.grad = Tensor::new(vec![c], dbeta)?;
        Tensor::new(cache.shape.clone(), dx)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu(Option<Tensor>),
    MaxPool2d {
        window: usize,
        cache: Option<(Vec<usize>, Vec<usize>)>,
    },
    Flatten(Option<Vec<usize>>),
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu(None)
    }

    pub fn maxpool(window: usize) -> Self {
        Layer::MaxPool2d {
            window,
            cache: None,
        }
    }

    pub fn flatten() -> Self {
        Layer::Flatten(None)
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, training),
            Layer::Relu(cache) => {
                let y = relu_forward(x);
                *cache = Some(x.clone());
                Ok(y)
            }
            Layer::MaxPool2d { window, cache } => {
                let fwd = maxpool2d_forward(x, *window)?;
                *cache = Some((fwd.argmax, x.shape().to_vec()));
                Ok(fwd.output)
            }
            Layer::Flatten(cache) => {
                if x.rank() < 2 {
                    return Err(Error::shape(format!("flatten needs a batch axis, got {:?}", x.shape())));
                }
                let n = x.shape()[0];
                let rest = x.len() / n;
                *cache = Some(x.shape().to_vec());
                x.clone().reshape(vec![n, rest])
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let missing = || Error::State("backward before forward".into());
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Relu(cache) => relu_backward(cache.as_ref().ok_or_else(missing)?, grad),
            Layer::MaxPool2d { cache, .. } => {
                let (argmax, shape) = cache.as_ref().ok_or_else(missing)?;
                maxpool2d_backward(shape, argmax, grad)
            }
            Layer::Flatten(cache) => {
                let shape = cache.as_ref().ok_or_else(missing)?;
                grad.clone().reshape(shape.clone())
            }
        }
    }

    pub fn quant_weights(&self) -> Option<&QuantWeights> {
        match self {
            Layer::Conv2d(l) => Some(&l.q),
            Layer::Linear(l) => Some(&l.q),
            _ => None,
        }
    }

    pub fn quant_weights_mut(&mut self) -> Option<&mut QuantWeights> {
        match self {
            Layer::Conv2d(l) => Some(&mut l.q),
            Layer::Linear(l) => Some(&mut l.q),
            _ => None,
        }
    }
}

/// Mean softmax cross-entropy over a batch of logits.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCrossEntropy {
    cache: Option<(Vec<f64>, Vec<usize>, usize)>,
}

impl SoftmaxCrossEntropy {
    pub fn forward(&mut self, logits: &Tensor, labels: &[usize]) -> Result<f64> {
        let probs = softmax_rows(logits)?;
        let (n, classes) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::argument(format!("label {bad} outside {classes} classes")));
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -log_softmax_at(&logits.data()[i * classes..(i + 1) * classes], l))
            .sum::<f64>()
            / n as f64;
        self.cache = Some((probs, labels.to_vec(), classes));
        Ok(loss)
    }

    pub fn backward(&self) -> Result<Tensor> {
        let (probs, labels, classes) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("loss backward before forward".into()))?;
        let n = labels.len();
        let mut g = probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            g[i * classes + l] -= 1.0;
        }
        g.iter_mut().for_each(|v| *v /= n as f64);
        Tensor::new(vec![n, *classes], g)
    }
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

pub fn softmax_rows(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("logits must be (N, C), got {:?}", logits.shape())));
    }
    let classes = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Ok(out)
}

/// Network architectures the trainer can build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// conv3-pool-bn-relu twice, then fc-bn-relu, fc.
    Cnn,
    /// fc-bn-relu, fc.
    Mlp,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn => "cnn",
            Arch::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Arch::Cnn),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::argument(format!("unknown model `{other}`"))),
        }
    }
}

const CNN_CHANNELS: (usize, usize) = (8, 16);
const KERNEL: usize = 3;
const HIDDEN: usize = 64;
const MLP_HIDDEN: usize = 128;

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<(String, Layer)>,
    loss: SoftmaxCrossEntropy,
    input_shape: Vec<usize>,
}

fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-bound..bound));
    t
}

impl Network {
    pub fn new(layers: Vec<(String, Layer)>, input_shape: Vec<usize>) -> Self {
        Self {
            layers,
            loss: SoftmaxCrossEntropy::default(),
            input_shape,
        }
    }

    /// Builds `arch` for `(C, H, W)` inputs with randomly initialized weights.
    pub fn build<R: Rng + ?Sized>(
        arch: Arch,
        input_shape: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [c, h, w] = input_shape else {
            return Err(Error::shape(format!("input shape must be (C, H, W), got {input_shape:?}")));
        };
        let (c, h, w) = (*c, *h, *w);
        let mut layers = Vec::new();
        let mut push = |name: &str, layer: Layer| layers.push((name.to_string(), layer));
        let conv = |cin: usize, cout: usize, rng: &mut R| -> Result<Layer> {
            Ok(Layer::Conv2d(Conv2d::new(
                kaiming_uniform(&[cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL, rng),
                Tensor::zeros(&[cout]),
                1,
                0,
            )?))
        };
        let linear = |fan_in: usize, fan_out: usize, rng: &mut R| -> Result<Layer> {
            Ok(Layer::Linear(Linear::new(
                kaiming_uniform(&[fan_out, fan_in], fan_in, rng),
                Tensor::zeros(&[fan_out]),
            )?))
        };
        match arch {
            Arch::Cnn => {
                let (c1, c2) = CNN_CHANNELS;
                let shrink = |x: usize| x.saturating_sub(KERNEL - 1) / 2;
                let (h2, w2) = (shrink(shrink(h)), shrink(shrink(w)));
                if h2 == 0 || w2 == 0 {
                    return Err(Error::shape(format!("input {h}x{w} too small for cnn")));
                }
                // Pooling ahead of batch norm keeps the per-pixel work on
                // the smaller map.
                push("conv1", conv(c, c1, rng)?);
                push("pool1", Layer::maxpool(2));
                push("bn1", Layer::BatchNorm(BatchNorm::new(c1)));
                push("relu1", Layer::relu());
                push("conv2", conv(c1, c2, rng)?);
                push("pool2", Layer::maxpool(2));
                push("bn2", Layer::BatchNorm(BatchNorm::new(c2)));
                push("relu2", Layer::relu());
                push("flatten", Layer::flatten());
                push("fc1", linear(c2 * h2 * w2, HIDDEN, rng)?);
                push("bn3", Layer::BatchNorm(BatchNorm::new(HIDDEN)));
                push("relu3", Layer::relu());
                push("fc2", linear(HIDDEN, classes, rng)?);
            }
            Arch::Mlp => {
                push("flatten", Layer::flatten());
                push("fc1", linear(c * h * w, MLP_HIDDEN, rng)?);
                push("bn1", Layer::BatchNorm(BatchNorm::new(MLP_HIDDEN)));
                push("relu1", Layer::relu());
                push("fc2", linear(MLP_HIDDEN, classes, rng)?);
            }
        }
        Ok(Self::new(layers, input_shape.to_vec()))
    }

    /// Output width of the last linear layer.
    pub fn classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|(_, l)| match l {
                Layer::Linear(lin) => Some(lin.q.weight.value.shape()[0]),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[(String, Layer)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(String, Layer)] {
        &mut self.layers
    }

    /// Quantizable layers in network order.
    pub fn quant_layers(&self) -> impl Iterator<Item = (&str, &QuantWeights)> {
        self.layers
            .iter()
            .filter_map(|(n, l)| l.quant_weights().map(|q| (n.as_str(), q)))
    }

    pub fn quant_layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut QuantWeights)> {
        self.layers
            .iter_mut()
            .filter_map(|(n, l)| l.quant_weights_mut().map(|q| (n.as_str(), q)))
    }

    pub fn clear_hybrids(&mut self) {
        self.quant_layers_mut().for_each(|(_, q)| q.clear_hybrid());
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "network expects (N, {:?}) input, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (_, layer) in &mut self.layers {
            h = layer.forward(&h, training)?;
        }
        Ok(h)
    }

    /// Forward and loss; `backward` may follow.
    pub fn loss(&mut self, x: &Tensor, labels: &[usize], training: bool) -> Result<f64> {
        let logits = self.forward(x, training)?;
        self.loss.forward(&logits, labels)
    }

    /// Back-propagates the last loss, filling every parameter gradient.
    /// Returns the gradient with respect to the input.
    pub fn backward(&mut self) -> Result<Tensor> {
        let mut g = self.loss.backward()?;
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Like [`Network::backward`], but skips the input gradient of a leading
    /// convolution, which training never reads.
    pub fn backward_params(&mut self) -> Result<()> {
        let mut g = self.loss.backward()?;
        let Some(((_, first), rest)) = self.layers.split_first_mut() else {
            return Ok(());
        };
        for (_, layer) in rest.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        match first {
            Layer::Conv2d(conv) => conv.param_backward(&g),
            other => other.backward(&g).map(drop),
        }
    }

    /// Visits every trainable parameter. The flag marks full-precision
    /// weights of quantizable layers (the ones weight decay applies to).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Param, bool)) {
        for (name, layer) in &mut self.layers {
            match layer {
                Layer::Conv2d(Conv2d { q, .. }) | Layer::Linear(Linear { q, .. }) => {
                    f(&format!("{name}.weight"), &mut q.weight, true);
                    f(&format!("{name}.bias"), &mut q.bias, false);
                }
                Layer::BatchNorm(bn) => {
                    f(&format!("{name}.gamma"), &mut bn.gamma, false);
                    f(&format!("{name}.beta"), &mut bn.beta, false);
                }
                _ => {}
            }
        }
    }

    /// Named state tensors in a fixed order: each parameter with its
    /// momentum buffer, and batch-norm running statistics without one.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor, Option<&Tensor>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            match layer {
                Layer::Conv2d(Conv2d { q, .. }) | Layer::Linear(Linear { q, .. }) => {
                    out.push((format!("{name}.weight"), &q.weight.value, Some(&q.weight.velocity)));
                    out.push((format!("{name}.bias"), &q.bias.value, Some(&q.bias.velocity)));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{name}.gamma"), &bn.gamma.value, Some(&bn.gamma.velocity)));
                    out.push((format!("{name}.beta"), &bn.beta.value, Some(&bn.beta.velocity)));
                    out.push((format!("{name}.running_mean"), &bn.running_mean, None));
                    out.push((format!("{name}.running_var"), &bn.running_var, None));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable counterpart of [`Network::state_tensors`], same order.
    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Tensor, Option<&mut Tensor>)> {
        let mut out = Vec::new();
        for (name, layer) in &mut self.layers {
            match layer {
                Layer::Conv2d(Conv2d { q, .. }) | Layer::Linear(Linear { q, .. }) => {
                    out.push((format!("{name}.weight"), &mut q.weight.value, Some(&mut q.weight.velocity)));
                    out.push((format!("{name}.bias"), &mut q.bias.value, Some(&mut q.bias.velocity)));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{name}.gamma"), &mut bn.gamma.value, Some(&mut bn.gamma.velocity)));
                    out.push((format!("{name}.beta"), &mut bn.beta.value, Some(&mut bn.beta.velocity)));
                    out.push((format!("{name}.running_mean"), &mut bn.running_mean, None));
                    out.push((format!("{name}.running_var"), &mut bn.running_var, None));
                }
                _ => {}
            }
        }
        out
    }
}
