//! One training iteration of stochastic quantization, the momentum SGD
//! update, and evaluation with fully quantized weights.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{build_hybrid, Network};
use crate::partition::{
    deterministic_partition, quantization_probabilities, roulette_partition, unit_errors,
    FixedPartition, Granularity, PartitionResult, ProbabilityFn,
};
use crate::quant::{quantize_bwn, quantize_twn, QuantKind, QuantScheme, QuantizedMatrix, QuantizedRow};
use crate::tensor::{sign, Tensor, WeightMatrixView};

/// Weight representation a run trains towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Full-precision weights, no quantization.
    Fwn,
    Quantized(QuantKind),
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fwn => "fwn",
            Scheme::Quantized(k) => k.name(),
        }
    }

    pub fn quant_kind(self) -> Option<QuantKind> {
        match self {
            Scheme::Fwn => None,
            Scheme::Quantized(k) => Some(k),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwn" | "none" => Ok(Scheme::Fwn),
            other => Ok(Scheme::Quantized(other.parse()?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionMode {
    /// Roulette draw every iteration.
    Stochastic,
    /// Lowest-error units every iteration.
    Deterministic,
    /// Roulette draw at the first iteration of each stage, then reused.
    Fixed,
}

impl PartitionMode {
    pub const ALL: [PartitionMode; 3] = [
        PartitionMode::Stochastic,
        PartitionMode::Deterministic,
        PartitionMode::Fixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::Stochastic => "stochastic",
            PartitionMode::Deterministic => "deterministic",
            PartitionMode::Fixed => "fixed",
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::argument(format!("unknown partition mode `{s}`")))
    }
}

/// Everything a training step needs besides the network and the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub partition_mode: PartitionMode,
    pub prob_fn: ProbabilityFn,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::argument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::argument(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// Independent random streams per purpose.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Partition = 1,
    StochasticCodes = 2,
}

/// Random stream for one `(seed, layer, iteration, purpose)`; streams never
/// overlap, so draws in one layer cannot shift another.
fn stream_rng(seed: u64, layer: usize, iteration: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | layer as u64);
    rng.set_word_pos(u128::from(iteration) << 40);
    rng
}

/// `v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v`.
///
/// With zero momentum and decay this is `w <- w - lr * grad`.
pub fn update_weights(
    weights: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if weights.len() != grad.len() || weights.len() != velocity.len() {
        return Err(Error::shape(format!(
            "update: {} weights, {} gradients, {} velocities",
            weights.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
    Ok(())
}

/// Quantization used at inference: the training quantizer, except that
/// stochastic binarization is replaced by its deterministic `sign` code.
pub fn inference_quantize(kind: QuantKind, weights: &WeightMatrixView<'_>) -> QuantizedMatrix {
    let rows = weights
        .iter_rows()
        .map(|row| match kind {
            QuantKind::StochasticBinary => {
                let codes: Vec<i8> = row.iter().map(|&w| sign(w) as i8).collect();
                QuantizedRow {
                    reconstruction: codes.iter().map(|&c| f64::from(c)).collect(),
                    codes,
                    alpha: 1.0,
                }
            }
            QuantKind::Bwn => quantize_bwn(row),
            QuantKind::Twn => quantize_twn(row),
        })
        .collect();
    QuantizedMatrix {
        rows,
        cols: weights.cols(),
    }
}

/// Training state: the network, iteration counter, and stage-fixed
/// partitions.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    config: StepConfig,
    iteration: u64,
    fixed: Vec<FixedPartition>,
    fixed_stage: Option<usize>,
}

impl Trainer {
    pub fn new(net: Network, config: StepConfig) -> Result<Self> {
        config.validate()?;
        let layers = net.quant_layers().count();
        Ok(Self {
            net,
            config,
            iteration: 0,
            fixed: vec![FixedPartition::new(); layers],
            fixed_stage: None,
        })
    }

    pub fn config(&self) -> &StepConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn fixed_partitions(&self) -> (&[FixedPartition], Option<usize>) {
        (&self.fixed, self.fixed_stage)
    }

    pub fn restore_fixed_partitions(&mut self, fixed: Vec<FixedPartition>, stage: Option<usize>) -> Result<()> {
        if fixed.len() != self.fixed.len() {
            return Err(Error::Format(format!(
                "{} stored partitions for {} quantizable layers",
                fixed.len(),
                self.fixed.len()
            )));
        }
        self.fixed = fixed;
        self.fixed_stage = stage;
        Ok(())
    }

    /// Quantizes every quantizable layer and installs this iteration's
    /// hybrid weights for ratio `ratio` within stage `stage`.
    pub fn prepare_weights(&mut self, ratio: f64, stage: usize) -> Result<()> {
        let Some(kind) = self.config.scheme.quant_kind() else {
            self.net.clear_hybrids();
            return Ok(());
        };
        let scheme = QuantScheme::new(kind);
        let cfg = self.config;
        let iteration = self.iteration;
        if cfg.partition_mode == PartitionMode::Fixed && self.fixed_stage != Some(stage) {
            self.fixed.iter_mut().for_each(FixedPartition::clear);
            self.fixed_stage = Some(stage);
        }
        for (layer, (_, q)) in self.net.quant_layers_mut().enumerate() {
            let matrix = q.matrix();
            let mut code_rng = stream_rng(cfg.seed, layer, iteration, Stream::StochasticCodes);
            let quantized = scheme.quantize_matrix(&matrix, &mut code_rng);
            let (hybrid, partition) = if ratio < 1.0 {
                let partition = match cfg.partition_mode {
                    PartitionMode::Fixed if self.fixed[layer].is_set() => {
                        self.fixed[layer].get()?.clone()
                    }
                    mode => {
                        let errors = unit_errors(&matrix, &quantized, cfg.granularity)?;
                        let part = if mode == PartitionMode::Deterministic {
                            deterministic_partition(&errors, ratio)?
                        } else {
                            let probs = quantization_probabilities(&errors, &cfg.prob_fn)?;
                            let mut rng = stream_rng(cfg.seed, layer, iteration, Stream::Partition);
                            roulette_partition(&probs, ratio, &mut rng)?
                        };
                        if mode == PartitionMode::Fixed {
                            self.fixed[layer].store(part.clone());
                        }
                        part
                    }
                };
                let hybrid = build_hybrid(&matrix, &quantized, &partition, cfg.granularity)?;
                (hybrid, Some(partition))
            } else {
                (quantized.reconstruction(), None)
            };
            let shape = q.weight.value.shape().to_vec();
            q.set_hybrid(Tensor::new(shape, hybrid)?, partition)?;
        }
        Ok(())
    }

    /// One iteration: hybrid weights, forward, backward, and the update of
    /// the full-precision weights with the gradient taken at the hybrid
    /// weights. On a non-finite loss nothing is updated.
    pub fn step(&mut self, images: &Tensor, labels: &[usize], ratio: f64, lr: f64, stage: usize) -> Result<f64> {
        self.prepare_weights(ratio, stage)?;
        let loss = self.net.loss(images, labels, true)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                loss,
            });
        }
        self.net.backward_params()?;
        self.apply_gradients(lr)?;
        self.iteration += 1;
        Ok(loss)
    }

    fn apply_gradients(&mut self, lr: f64) -> Result<()> {
        let (momentum, decay) = (self.config.momentum, self.config.weight_decay);
        let mut result = Ok(());
        self.net.for_each_param_mut(|_, p, is_weight| {
            if result.is_ok() {
                let wd = if is_weight { decay } else { 0.0 };
                result = update_weights(
                    p.value.data_mut(),
                    p.velocity.data_mut(),
                    p.grad.data(),
                    lr,
                    momentum,
                    wd,
                );
            }
        });
        result
    }
}

/// Weights used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalWeights {
    /// Quantize every row of every quantizable layer.
    Quantize(Scheme),
    /// Use stored weights unchanged (already-quantized exports).
    AsStored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1_error: f64,
    pub mean_loss: f64,
}

const EVAL_CHUNK: usize = 250;

/// Installs fully quantized weights for inference (no-op for FWN).
pub fn install_inference_weights(net: &mut Network, weights: EvalWeights) -> Result<()> {
    match weights {
        EvalWeights::Quantize(Scheme::Quantized(kind)) => {
            for (_, q) in net.quant_layers_mut() {
                let recon = inference_quantize(kind, &q.matrix()).reconstruction();
                let shape = q.weight.value.shape().to_vec();
                q.set_hybrid(Tensor::new(shape, recon)?, None)?;
            }
        }
        EvalWeights::Quantize(Scheme::Fwn) | EvalWeights::AsStored => net.clear_hybrids(),
    }
    Ok(())
}

/// Top-1 error and mean loss over `dataset`, batch-norm in inference mode.
pub fn evaluate(net: &mut Network, dataset: &Dataset, weights: EvalWeights) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::argument("cannot evaluate on an empty split"));
    }
    install_inference_weights(net, weights)?;
    let mut wrong = 0usize;
    let mut loss_sum = 0.0;
    for batch in dataset.chunks(EVAL_CHUNK) {
        let logits = net.forward(&batch.images, false)?;
        let classes = logits.shape()[1];
        let mut ce = crate::nn::SoftmaxCrossEntropy::default();
        loss_sum += ce.forward(&logits, &batch.labels)? * batch.labels.len() as f64;
        for (row, &label) in logits.data().chunks_exact(classes).zip(&batch.labels) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best != label {
                wrong += 1;
            }
        }
    }
    net.clear_hybrids();
    Ok(EvalResult {
        top1_error: wrong as f64 / dataset.len() as f64,
        mean_loss: loss_sum / dataset.len() as f64,
    })
}

/// Partition currently applied to each quantizable layer (None at r = 100%
/// or for full precision).
pub fn current_partitions(net: &Network) -> Vec<Option<PartitionResult>> {
    net.quant_layers().map(|(_, q)| q.partition().cloned()).collect()
}
