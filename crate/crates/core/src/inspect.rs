//! Per-layer quantization statistics of a trained model.

use serde::Serialize;

use crate::error::Result;
use crate::nn::Network;
use crate::partition::{quantization_probabilities, ProbabilityFn, ProbabilityKind};
use crate::quant::{quantization_error, twn_delta, QuantKind, TWN_THRESHOLD};
use crate::trainer::inference_quantize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Some(Self {
            min,
            max,
            mean: sum / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probabilities {
    pub constant: Vec<f64>,
    pub linear: Vec<f64>,
    pub softmax: Vec<f64>,
    pub sigmoid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Normalized L1 quantization error of each row.
    pub errors: Vec<f64>,
    pub probabilities: Probabilities,
    pub alpha: Option<Stats>,
    /// Ternary thresholds; absent for binary quantizers.
    pub delta: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub quantizer: String,
    pub layers: Vec<LayerReport>,
}

/// Quantizes every layer of `net` the way inference does and reports the
/// row errors with the probabilities each selection function assigns.
pub fn inspect_network(net: &Network, kind: QuantKind) -> Result<InspectReport> {
    let mut layers = Vec::new();
    for (name, q) in net.quant_layers() {
        let matrix = q.matrix();
        let quantized = inference_quantize(kind, &matrix);
        let errors = matrix
            .iter_rows()
            .zip(&quantized.rows)
            .map(|(row, qr)| quantization_error(row, &qr.reconstruction))
            .collect::<Result<Vec<_>>>()?;
        let probs = |k| quantization_probabilities(&errors, &ProbabilityFn::new(k));
        let alphas: Vec<f64> = quantized.rows.iter().map(|r| r.alpha).collect();
        let delta = (kind == QuantKind::Twn).then(|| {
            let deltas: Vec<f64> = matrix.iter_rows().map(|r| twn_delta(r, TWN_THRESHOLD)).collect();
            Stats::of(&deltas)
        });
        layers.push(LayerReport {
            name: name.to_string(),
            rows: matrix.rows(),
            cols: matrix.cols(),
            probabilities: Probabilities {
                constant: probs(ProbabilityKind::Constant)?,
                linear: probs(ProbabilityKind::Linear)?,
                softmax: probs(ProbabilityKind::Softmax)?,
                sigmoid: probs(ProbabilityKind::Sigmoid)?,
            },
            errors,
            alpha: Stats::of(&alphas),
            delta: delta.flatten(),
        });
    }
    Ok(InspectReport {
        quantizer: kind.name().to_string(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Linear};
    use crate::tensor::Tensor;

    fn one_layer(w: Vec<f64>, rows: usize, cols: usize) -> Network {
        let lin = Linear::new(Tensor::new(vec![rows, cols], w).unwrap(), Tensor::zeros(&[rows])).unwrap();
        Network::new(
            vec![("flatten".into(), Layer::flatten()), ("fc".into(), Layer::Linear(lin))],
            vec![1, 1, cols],
        )
    }

    #[test]
    fn constant_rows_have_zero_error_under_bwn() {
        let net = one_layer(vec![0.3, 0.3, 0.3, -2.0, -2.0, -2.0], 2, 3);
        let r = inspect_network(&net, QuantKind::Bwn).unwrap();
        assert_eq!(r.layers[0].errors, vec![0.0, 0.0]);
        assert!(r.layers[0].delta.is_none());
    }

    #[test]
    fn known_row_and_normalized_linear() {
        let net = one_layer(vec![0.5, -1.5, 1.0, 0.1, 0.2, -0.9], 2, 3);
        let r = inspect_network(&net, QuantKind::Bwn).unwrap();
        let l = &r.layers[0];
        assert!((l.errors[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((l.probabilities.linear.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((l.probabilities.softmax.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(l.probabilities.constant, vec![0.5, 0.5]);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"sigmoid\""));
        let twn = inspect_network(&net, QuantKind::Twn).unwrap();
        assert!(twn.layers[0].delta.is_some());
    }
}
