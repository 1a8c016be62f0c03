//! Per-filter low-bit quantizers and the normalized L1 quantization error.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l1_norm, sign, WeightMatrixView};

/// Threshold coefficient of the ternary quantizer: `delta = 0.7 * mean|w|`.
pub const TWN_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantKind {
    /// BinaryConnect: `+1` with probability `hard_sigmoid(w)`, `alpha = 1`.
    StochasticBinary,
    /// `sign(w)` scaled by the mean magnitude of the row.
    Bwn,
    /// Thresholded ternary codes scaled by the mean surviving magnitude.
    Twn,
}

impl QuantKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantKind::StochasticBinary => "sbin",
            QuantKind::Bwn => "bwn",
            QuantKind::Twn => "twn",
        }
    }
}

impl fmt::Display for QuantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbin" | "binaryconnect" => Ok(QuantKind::StochasticBinary),
            "bwn" => Ok(QuantKind::Bwn),
            "twn" => Ok(QuantKind::Twn),
            other => Err(Error::argument(format!("unknown quantizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScheme {
    kind: QuantKind,
    twn_threshold: f64,
}

impl QuantScheme {
    pub fn new(kind: QuantKind) -> Self {
        Self {
            kind,
            twn_threshold: TWN_THRESHOLD,
        }
    }

    pub fn with_threshold(kind: QuantKind, twn_threshold: f64) -> Result<Self> {
        if !(twn_threshold > 0.0 && twn_threshold.is_finite()) {
            return Err(Error::argument(format!(
                "threshold coefficient must be positive, got {twn_threshold}"
            )));
        }
        Ok(Self {
            kind,
            twn_threshold,
        })
    }

    pub fn kind(&self) -> QuantKind {
        self.kind
    }

    pub fn twn_threshold(&self) -> f64 {
        self.twn_threshold
    }

    /// Quantizes one filter row. `rng` is only drawn from by the stochastic
    /// binary quantizer.
    pub fn quantize_row<R: Rng + ?Sized>(&self, row: &[f64], rng: &mut R) -> QuantizedRow {
        match self.kind {
            QuantKind::StochasticBinary => quantize_stochastic_binary(row, rng),
            QuantKind::Bwn => quantize_bwn(row),
            QuantKind::Twn => quantize_twn_with(row, self.twn_threshold),
        }
    }

    /// Quantizes every row of `weights`.
    pub fn quantize_matrix<R: Rng + ?Sized>(
        &self,
        weights: &WeightMatrixView<'_>,
        rng: &mut R,
    ) -> QuantizedMatrix {
        QuantizedMatrix {
            rows: weights.iter_rows().map(|r| self.quantize_row(r, rng)).collect(),
            cols: weights.cols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRow {
    pub codes: Vec<i8>,
    pub alpha: f64,
    /// `alpha * codes`, the value that stands in for the row.
    pub reconstruction: Vec<f64>,
}

impl QuantizedRow {
    fn from_codes(codes: Vec<i8>, alpha: f64) -> Self {
        let reconstruction = codes.iter().map(|&c| alpha * f64::from(c)).collect();
        Self {
            codes,
            alpha,
            reconstruction,
        }
    }
}

/// All rows of one weight matrix, quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: Vec<QuantizedRow>,
    pub cols: usize,
}

impl QuantizedMatrix {
    /// Row-major `m x d` reconstruction.
    pub fn reconstruction(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows.len() * self.cols);
        for row in &self.rows {
            out.extend_from_slice(&row.reconstruction);
        }
        out
    }
}

pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub fn quantize_stochastic_binary<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> QuantizedRow {
    let codes = row
        .iter()
        .map(|&w| {
            let p = hard_sigmoid(w);
            // gen::<f64>() is in [0, 1): p = 1 always gives +1, p = 0 never does.
            if rng.gen::<f64>() < p {
                1
            } else {
                -1
            }
        })
        .collect();
    QuantizedRow::from_codes(codes, 1.0)
}

pub fn quantize_bwn(row: &[f64]) -> QuantizedRow {
    let alpha = l1_norm(row) / row.len() as f64;
    let codes = row.iter().map(|&w| sign(w) as i8).collect();
    QuantizedRow::from_codes(codes, alpha)
}

pub fn quantize_twn(row: &[f64]) -> QuantizedRow {
    quantize_twn_with(row, TWN_THRESHOLD)
}

/// Ternary threshold for a row: `coefficient * mean|w|`.
pub fn twn_delta(row: &[f64], coefficient: f64) -> f64 {
    coefficient * l1_norm(row) / row.len() as f64
}

fn quantize_twn_with(row: &[f64], coefficient: f64) -> QuantizedRow {
    let delta = twn_delta(row, coefficient);
    let mut kept = 0usize;
    let mut kept_sum = 0.0;
    let codes = row
        .iter()
        .map(|&w| {
            if w.abs() > delta {
                kept += 1;
                kept_sum += w.abs();
                if w > 0.0 {
                    1
                } else {
                    -1
                }
            } else {
                0
            }
        })
        .collect();
    let alpha = if kept == 0 { 0.0 } else { kept_sum / kept as f64 };
    QuantizedRow::from_codes(codes, alpha)
}

/// `||w - q||_1 / ||w||_1`, taken as 0 for an all-zero row.
pub fn quantization_error(row: &[f64], reconstruction: &[f64]) -> Result<f64> {
    if row.len() != reconstruction.len() {
        return Err(Error::shape(format!(
            "row has {} values, reconstruction {}",
            row.len(),
            reconstruction.len()
        )));
    }
    let norm = l1_norm(row);
    if norm == 0.0 {
        return Ok(0.0);
    }
    let dist: f64 = row
        .iter()
        .zip(reconstruction)
        .map(|(w, q)| (w - q).abs())
        .sum();
    Ok(dist / norm)
}
