//! Splitting a weight matrix into a quantized group and a full-precision
//! group.
//!
//! Each partition unit (a filter row, or a single weight under element-wise
//! granularity) gets a quantization error; errors become selection
//! probabilities through one of four functions of `f = 1 / (e + eps)`, and
//! `round(r * m)` units are drawn into the quantized group.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantization_error, QuantizedMatrix};
use crate::tensor::WeightMatrixView;

pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbabilityKind {
    Constant,
    Linear,
    Softmax,
    Sigmoid,
}

impl ProbabilityKind {
    pub const ALL: [ProbabilityKind; 4] = [
        ProbabilityKind::Constant,
        ProbabilityKind::Linear,
        ProbabilityKind::Softmax,
        ProbabilityKind::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbabilityKind::Constant => "constant",
            ProbabilityKind::Linear => "linear",
            ProbabilityKind::Softmax => "softmax",
            ProbabilityKind::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for ProbabilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbabilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::argument(format!("unknown probability function `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityFn {
    kind: ProbabilityKind,
    epsilon: f64,
}

impl ProbabilityFn {
    pub fn new(kind: ProbabilityKind) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(kind: ProbabilityKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::argument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn kind(&self) -> ProbabilityKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Maps per-unit quantization errors to selection probabilities.
///
/// Constant, linear and softmax outputs sum to one; sigmoid outputs do not
/// and are only meaningful relative to each other.
pub fn quantization_probabilities(errors: &[f64], f: &ProbabilityFn) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::argument("empty error vector"));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::argument(format!(
            "quantization errors must be finite and non-negative, got {e}"
        )));
    }
    let m = errors.len();
    let inv: Vec<f64> = errors.iter().map(|e| 1.0 / (e + f.epsilon)).collect();
    let p = match f.kind {
        ProbabilityKind::Constant => vec![1.0 / m as f64; m],
        ProbabilityKind::Linear => {
            let total: f64 = inv.iter().sum();
            inv.iter().map(|x| x / total).collect()
        }
        ProbabilityKind::Softmax => {
            // Shift by the max: f reaches 1/eps = 1e7 for exact rows.
            let max = inv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = inv.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|x| x / total).collect()
        }
        ProbabilityKind::Sigmoid => inv.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
    };
    Ok(p)
}

/// Number of units quantized at ratio `r` out of `m`: `round(r * m)`,
/// clamped to `[0, m]`.
pub fn quantized_count(ratio: f64, m: usize) -> usize {
    ((ratio * m as f64).round().max(0.0) as usize).min(m)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::argument(format!("ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    /// Units taking their quantized value, ascending.
    quantized: Vec<usize>,
    /// Units kept at full precision, ascending.
    real: Vec<usize>,
    ratio: f64,
}

impl PartitionResult {
    /// Builds a partition of `0..m` from the quantized set.
    pub fn from_quantized(mut quantized: Vec<usize>, m: usize, ratio: f64) -> Result<Self> {
        quantized.sort_unstable();
        quantized.dedup();
        if quantized.last().is_some_and(|&i| i >= m) {
            return Err(Error::argument(format!(
                "quantized index out of range for {m} units"
            )));
        }
        let mut is_q = vec![false; m];
        quantized.iter().for_each(|&i| is_q[i] = true);
        let real = (0..m).filter(|&i| !is_q[i]).collect();
        Ok(Self {
            quantized,
            real,
            ratio,
        })
    }

    pub fn quantized_indices(&self) -> &[usize] {
        &self.quantized
    }

    pub fn real_indices(&self) -> &[usize] {
        &self.real
    }

    pub fn ratio_used(&self) -> f64 {
        self.ratio
    }

    pub fn units(&self) -> usize {
        self.quantized.len() + self.real.len()
    }

    /// `mask[i]` is true when unit `i` is quantized.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.units()];
        self.quantized.iter().for_each(|&i| mask[i] = true);
        mask
    }
}

/// Binary tree of partial sums over the leaf masses. Internal nodes are
/// recomputed from their children on every update, so removing mass never
/// accumulates rounding drift.
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(values: &[f64]) -> Self {
        let leaves = values.len().next_power_of_two();
        let mut nodes = vec![0.0; 2 * leaves];
        nodes[leaves..leaves + values.len()].copy_from_slice(values);
        for i in (1..leaves).rev() {
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1];
        }
        Self { leaves, nodes }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn clear(&mut self, index: usize) {
        let mut i = index + self.leaves;
        self.nodes[i] = 0.0;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// First leaf whose inclusive prefix sum reaches `target`. Never lands
    /// on a zero-mass leaf while the total is positive.
    fn find(&self, mut target: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let (left, right) = (self.nodes[2 * i], self.nodes[2 * i + 1]);
            i = if right <= 0.0 || (left > 0.0 && target <= left) {
                2 * i
            } else {
                target -= left;
                2 * i + 1
            };
        }
        i - self.leaves
    }
}

/// Sampling-without-replacement roulette over `probabilities`.
///
/// Each draw renormalizes the surviving mass, takes a uniform `v` in
/// `(0, 1]`, selects the first unit whose cumulative normalized mass reaches
/// `v`, and zeroes that unit. The cumulative walk runs over a sum tree, so a
/// draw costs `O(log m)`. If the positive mass runs out before `round(r * m)`
/// units are drawn, the remaining slots are filled with unselected units in
/// ascending order.
pub fn roulette_partition<R: Rng + ?Sized>(
    probabilities: &[f64],
    ratio: f64,
    rng: &mut R,
) -> Result<PartitionResult> {
    check_ratio(ratio)?;
    let m = probabilities.len();
    if m == 0 {
        return Err(Error::argument("empty probability vector"));
    }
    if probabilities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::argument("probabilities must be finite and non-negative"));
    }
    let target = quantized_count(ratio, m);
    let mut tree = SumTree::new(probabilities);
    let mut taken = vec![false; m];
    let mut chosen = Vec::with_capacity(target);

    while chosen.len() < target {
        let total = tree.total();
        if !(total > 0.0) {
            break;
        }
        let v = 1.0 - rng.gen::<f64>();
        let j = tree.find(v * total);
        taken[j] = true;
        tree.clear(j);
        chosen.push(j);
    }
    for j in 0..m {
        if chosen.len() == target {
            break;
        }
        if !taken[j] {
            taken[j] = true;
            chosen.push(j);
        }
    }
    PartitionResult::from_quantized(chosen, m, ratio)
}

/// Quantizes the `round(r * m)` units with the smallest error; ties go to
/// the lower index.
pub fn deterministic_partition(errors: &[f64], ratio: f64) -> Result<PartitionResult> {
    check_ratio(ratio)?;
    if errors.is_empty() {
        return Err(Error::argument("empty error vector"));
    }
    let m = errors.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    order.truncate(quantized_count(ratio, m));
    PartitionResult::from_quantized(order, m, ratio)
}

/// Holds the partition drawn at the start of a stage so every later
/// iteration of the stage reuses it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedPartition {
    stored: Option<PartitionResult>,
}

impl FixedPartition {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, partition: PartitionResult) {
        self.stored = Some(partition);
    }

    pub fn get(&self) -> Result<&PartitionResult> {
        self.stored
            .as_ref()
            .ok_or_else(|| Error::State("no partition stored for this stage".into()))
    }

    pub fn clear(&mut self) {
        self.stored = None;
    }

    pub fn is_set(&self) -> bool {
        self.stored.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    /// One unit per output-channel filter row.
    ChannelWise,
    /// One unit per scalar weight.
    ElementWise,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::ChannelWise => "channel",
            Granularity::ElementWise => "element",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" | "channel-wise" => Ok(Granularity::ChannelWise),
            "element" | "element-wise" => Ok(Granularity::ElementWise),
            other => Err(Error::argument(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Reinterprets an `m x d` matrix as `m * d` single-weight units.
pub fn elementwise_expand<'a>(weights: &WeightMatrixView<'a>) -> WeightMatrixView<'a> {
    WeightMatrixView::from_slice(weights.data(), weights.rows() * weights.cols(), 1)
        .expect("a valid view always re-views as column")
}

/// Quantization error of every partition unit.
///
/// Rows are always quantized as whole filters; under element-wise
/// granularity each weight is scored against its entry of the row-level
/// reconstruction.
pub fn unit_errors(
    weights: &WeightMatrixView<'_>,
    quantized: &QuantizedMatrix,
    granularity: Granularity,
) -> Result<Vec<f64>> {
    if quantized.rows.len() != weights.rows() || quantized.cols != weights.cols() {
        return Err(Error::shape("quantized matrix does not match weights"));
    }
    match granularity {
        Granularity::ChannelWise => weights
            .iter_rows()
            .zip(&quantized.rows)
            .map(|(w, q)| quantization_error(w, &q.reconstruction))
            .collect(),
        Granularity::ElementWise => {
            let units = elementwise_expand(weights);
            let recon = quantized.reconstruction();
            units
                .iter_rows()
                .zip(recon.chunks_exact(1))
                .map(|(w, q)| quantization_error(w, q))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_bwn, quantize_twn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_is_uniform() {
        let p = quantization_probabilities(&[0.1, 0.9, 0.3, 0.0], &ProbabilityFn::new(ProbabilityKind::Constant))
            .unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn linear_inverse_weights() {
        let p = quantization_probabilities(&[1.0 / 3.0, 1.0], &ProbabilityFn::new(ProbabilityKind::Linear))
            .unwrap();
        assert!((p[0] - 0.75).abs() < 1e-6 && (p[1] - 0.25).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn softmax_symmetric_and_overflow_safe() {
        let f = ProbabilityFn::new(ProbabilityKind::Softmax);
        assert_eq!(quantization_probabilities(&[0.4, 0.4], &f).unwrap(), vec![0.5, 0.5]);
        let p = quantization_probabilities(&[0.0, 0.0, 0.5], &f).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 0.5).abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn sigmoid_is_unnormalized() {
        let p = quantization_probabilities(&[0.5, 0.5, 0.5], &ProbabilityFn::new(ProbabilityKind::Sigmoid))
            .unwrap();
        let expected = 1.0 / (1.0 + (-1.0 / (0.5 + 1e-7_f64)).exp());
        assert!(p.iter().all(|x| (x - expected).abs() < 1e-15));
    }

    #[test]
    fn probability_argument_errors() {
        let f = ProbabilityFn::new(ProbabilityKind::Linear);
        assert!(matches!(quantization_probabilities(&[], &f), Err(Error::Argument(_))));
        assert!(quantization_probabilities(&[-0.1], &f).is_err());
        assert!(ProbabilityFn::with_epsilon(ProbabilityKind::Linear, 0.0).is_err());
    }

    #[test]
    fn roulette_extreme_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = [0.1, 0.6, 0.3];
        let all = roulette_partition(&p, 1.0, &mut rng).unwrap();
        assert_eq!(all.quantized_indices(), &[0, 1, 2]);
        assert!(all.real_indices().is_empty());
        let none = roulette_partition(&p, 0.0, &mut rng).unwrap();
        assert!(none.quantized_indices().is_empty());
        assert_eq!(none.real_indices(), &[0, 1, 2]);
        assert!(roulette_partition(&p, 1.5, &mut rng).is_err());
    }

    #[test]
    fn roulette_tops_up_when_mass_runs_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let part = roulette_partition(&[0.0, 1.0, 0.0, 0.0], 0.75, &mut rng).unwrap();
        assert_eq!(part.quantized_indices(), &[0, 1, 2]);
        assert_eq!(part.real_indices(), &[3]);
    }

    #[test]
    fn roulette_never_picks_zero_mass_when_avoidable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let part = roulette_partition(&[0.0, 0.3, 0.0, 0.7], 0.5, &mut rng).unwrap();
            assert_eq!(part.quantized_indices(), &[1, 3]);
        }
    }

    #[test]
    fn deterministic_examples() {
        let part = deterministic_partition(&[0.9, 0.1, 0.5], 1.0 / 3.0).unwrap();
        assert_eq!(part.quantized_indices(), &[1]);
        let part = deterministic_partition(&[0.2, 0.2], 0.5).unwrap();
        assert_eq!(part.quantized_indices(), &[0]);
        let part = deterministic_partition(&[0.3, 0.1, 0.2], 1.0).unwrap();
        assert_eq!(part.quantized_indices(), &[0, 1, 2]);
    }

    #[test]
    fn fixed_partition_store() {
        let mut fixed = FixedPartition::new();
        assert!(matches!(fixed.get(), Err(Error::State(_))));
        let first = PartitionResult::from_quantized(vec![2, 0], 4, 0.5).unwrap();
        fixed.store(first.clone());
        for _ in 0..500 {
            assert_eq!(fixed.get().unwrap(), &first);
        }
        assert_eq!(fixed.get().unwrap().quantized_indices(), &[0, 2]);
        let next = PartitionResult::from_quantized(vec![1, 2, 3], 4, 0.75).unwrap();
        fixed.store(next.clone());
        assert_eq!(fixed.get().unwrap(), &next);
    }

    #[test]
    fn elementwise_units() {
        let data = [0.8, -0.2, 0.1, 0.5, 0.5, -0.9];
        let w = WeightMatrixView::from_slice(&data, 2, 3).unwrap();
        let units = elementwise_expand(&w);
        assert_eq!((units.rows(), units.cols()), (6, 1));

        let q = quantize_bwn(units.row(0));
        assert_eq!((q.codes[0], q.alpha), (1, 0.8));
        assert_eq!(quantization_error(units.row(0), &q.reconstruction).unwrap(), 0.0);

        let row = [0.1];
        assert!((crate::quant::twn_delta(&row, 0.7) - 0.07).abs() < 1e-15);
        let q = quantize_twn(&row);
        assert_eq!((q.codes[0], q.alpha), (1, 0.1));
    }

    #[test]
    fn element_errors_use_row_reconstruction() {
        let data = [0.5, -1.5, 1.0];
        let w = WeightMatrixView::from_slice(&data, 1, 3).unwrap();
        let q = QuantizedMatrix {
            rows: vec![quantize_bwn(&data)],
            cols: 3,
        };
        let e = unit_errors(&w, &q, Granularity::ElementWise).unwrap();
        assert_eq!(e, vec![1.0, 1.0 / 3.0, 0.0]);
        let e = unit_errors(&w, &q, Granularity::ChannelWise).unwrap();
        assert!((e[0] - 1.0 / 3.0).abs() < 1e-15);
    }
}
