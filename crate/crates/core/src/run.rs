//! Staged training runs and their output directory.
//!
//! A run directory holds `manifest.json`, `metrics.csv`, one `stageN.sqck`
//! per stage, `final.sqck`, and `summary.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{TrainConfig, KEYS};
use crate::data::{batch_at, Dataset};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::partition::{Granularity, ProbabilityKind};
use crate::schedule::ScheduleMode;
use crate::trainer::{evaluate, EvalResult, EvalWeights, PartitionMode, Scheme, Trainer};

pub const METRICS_HEADER: &str = "iteration,stage,ratio,loss,lr";

/// Stream id of the weight-initialization generator.
const INIT_STREAM: u64 = 0x1_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub file: String,
    /// 1-based stage number.
    pub stage: usize,
    pub ratio: f64,
    pub iteration: u64,
    pub test_error: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scheme: String,
    pub schedule: String,
    pub seed: u64,
    pub iterations: u64,
    pub test_samples: usize,
    pub checkpoints: Vec<CheckpointSummary>,
    pub final_test_error: f64,
    pub final_test_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub kind: String,
    pub data_dir: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub sample_shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Vec<(String, String)>,
    pub config_digest: String,
    pub dataset: DatasetInfo,
    pub out_dir: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub stage: usize,
    pub ratio: f64,
    pub loss: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.stage, self.ratio, self.loss, self.lr
        )
    }
}

/// Per-run progress reported to the caller.
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Iteration(&'a MetricRow),
    StageDone(&'a CheckpointSummary),
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Loads the configured dataset with the train/test limits applied.
pub fn load_data(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = config.dataset.load(&config.data_dir)?;
    Ok((train.truncate(config.train_limit), test.truncate(config.test_limit)))
}

/// Initial network: fresh weights, or the pretrained weights for fine-tuning.
pub fn initial_network(config: &TrainConfig, train: &Dataset) -> Result<Network> {
    if config.schedule == ScheduleMode::FineTune {
        let path = config
            .pretrained
            .as_ref()
            .ok_or_else(|| Error::Config("key `pretrained`: required by schedule `finetune`".into()))?;
        let mut net = load_checkpoint(path)?.trainer.net;
        if net.input_shape() != train.sample_shape() || net.classes() != train.classes {
            return Err(Error::shape(format!(
                "pretrained model takes {:?} with {} classes, data is {:?} with {}",
                net.input_shape(),
                net.classes(),
                train.sample_shape(),
                train.classes
            )));
        }
        net.for_each_param_mut(|_, p, _| p.velocity.data_mut().fill(0.0));
        return Ok(net);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    Network::build(config.model, train.sample_shape(), train.classes, &mut rng)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs every stage of the configured schedule on already-loaded data and
/// writes the run directory. On divergence the metrics written so far are
/// kept and the divergence error is returned.
pub fn run_training_on(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<RunSummary> {
    config.validate()?;
    if train.len() < config.batch_size {
        return Err(Error::argument(format!(
            "batch size {} exceeds {} training samples",
            config.batch_size,
            train.len()
        )));
    }
    let schedule = config.sq_schedule()?;
    let lr_schedule = config.lr_schedule()?;
    let out = &config.out_dir;
    fs::create_dir_all(out)?;

    let mut manifest = RunManifest {
        config: KEYS
            .iter()
            .zip(config.canonical_text().lines())
            .map(|(k, line)| {
                let value = line.split_once(" = ").map_or("", |(_, v)| v);
                (k.to_string(), value.to_string())
            })
            .collect(),
        config_digest: hex::encode(config.digest()),
        dataset: DatasetInfo {
            kind: config.dataset.to_string(),
            data_dir: config.data_dir.display().to_string(),
            train_samples: train.len(),
            test_samples: test.len(),
            sample_shape: train.sample_shape().to_vec(),
        },
        out_dir: out.display().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: now_unix(),
        finished_unix: None,
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let net = initial_network(config, train)?;
    let mut trainer = Trainer::new(net, config.step_config())?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut order_cache = None;
    let mut checkpoints = Vec::new();
    let mut outcome = Ok(());

    'stages: for (stage, st) in schedule.stages().iter().enumerate() {
        let start = schedule.stage_start(stage);
        for t in start..start + st.iterations {
            let batch = batch_at(train, config.batch_size, config.seed, t, &mut order_cache);
            let lr = lr_schedule.lr_at(t);
            match trainer.step(&batch.images, &batch.labels, st.ratio, lr, stage) {
                Ok(loss) => {
                    let row = MetricRow {
                        iteration: t,
                        stage: stage + 1,
                        ratio: st.ratio,
                        loss,
                        lr,
                    };
                    metrics.push_str(&row.csv_line());
                    metrics.push('\n');
                    progress(Progress::Iteration(&row));
                }
                Err(e) => {
                    outcome = Err(e);
                    break 'stages;
                }
            }
        }
        let file = format!("stage{}.sqck", stage + 1);
        save_checkpoint(&out.join(&file), config, &trainer)?;
        let mut net = trainer.net.clone();
        let EvalResult {
            top1_error,
            mean_loss,
        } = evaluate(&mut net, test, EvalWeights::Quantize(config.scheme))?;
        let summary = CheckpointSummary {
            file,
            stage: stage + 1,
            ratio: st.ratio,
            iteration: trainer.iteration(),
            test_error: top1_error,
            test_loss: mean_loss,
        };
        progress(Progress::StageDone(&summary));
        checkpoints.push(summary);
    }
    fs::write(out.join("metrics.csv"), &metrics)?;
    outcome?;

    save_checkpoint(&out.join("final.sqck"), config, &trainer)?;
    let last = checkpoints.last().expect("schedules have at least one stage");
    let summary = RunSummary {
        scheme: config.scheme.to_string(),
        schedule: config.schedule.to_string(),
        seed: config.seed,
        iterations: schedule.total_iterations(),
        test_samples: test.len(),
        final_test_error: last.test_error,
        final_test_loss: last.test_loss,
        checkpoints,
    };
    write_json(&out.join("summary.json"), &summary)?;
    manifest.finished_unix = Some(now_unix());
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(summary)
}

pub fn run_training(config: &TrainConfig, progress: impl FnMut(Progress<'_>)) -> Result<RunSummary> {
    let (train, test) = load_data(config)?;
    run_training_on(config, &train, &test, progress)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?)
}

/// Axes of an ablation grid; every combination is one run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub granularities: Vec<Granularity>,
    pub partition_modes: Vec<PartitionMode>,
    pub prob_fns: Vec<ProbabilityKind>,
    pub schedules: Vec<ScheduleMode>,
}

impl AblationGrid {
    pub fn full() -> Self {
        Self {
            granularities: vec![Granularity::ChannelWise, Granularity::ElementWise],
            partition_modes: PartitionMode::ALL.to_vec(),
            prob_fns: ProbabilityKind::ALL.to_vec(),
            schedules: ScheduleMode::SQ_MODES.to_vec(),
        }
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &granularity in &self.granularities {
            for &partition_mode in &self.partition_modes {
                for &prob_fn in &self.prob_fns {
                    for &schedule in &self.schedules {
                        out.push(AblationCell {
                            granularity,
                            partition_mode,
                            prob_fn,
                            schedule,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub granularity: Granularity,
    pub partition_mode: PartitionMode,
    pub prob_fn: ProbabilityKind,
    pub schedule: ScheduleMode,
}

impl AblationCell {
    pub fn is_default(&self) -> bool {
        *self
            == AblationCell {
                granularity: Granularity::ChannelWise,
                partition_mode: PartitionMode::Stochastic,
                prob_fn: ProbabilityKind::Linear,
                schedule: ScheduleMode::Exponential,
            }
    }

    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}-{}",
            self.granularity, self.partition_mode, self.prob_fn, self.schedule
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub cell: AblationCell,
    /// `None` when the run diverged.
    pub test_error: Option<f64>,
}

/// Trains the full-precision model that fine-tune cells start from.
fn pretrain(base: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<PathBuf> {
    let mut cfg = base.clone();
    cfg.scheme = Scheme::Fwn;
    cfg.schedule = ScheduleMode::Full;
    cfg.pretrained = None;
    cfg.out_dir = base.out_dir.join("pretrained-fwn");
    run_training_on(&cfg, train, test, |_| {})?;
    Ok(cfg.out_dir.join("final.sqck"))
}

/// Runs every cell of `grid` on top of `base` (whose scheme must be a
/// quantizer) and writes `ablation.csv` and `ablation.md` to the base
/// output directory.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    train: &Dataset,
    test: &Dataset,
    mut on_cell: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    if base.scheme == Scheme::Fwn {
        return Err(Error::Config("key `scheme`: ablation needs a quantizer".into()));
    }
    fs::create_dir_all(&base.out_dir)?;
    let cells = grid.cells();
    let pretrained = match base.pretrained.clone() {
        Some(p) => Some(p),
        None if cells.iter().any(|c| c.schedule == ScheduleMode::FineTune) => {
            Some(pretrain(base, train, test)?)
        }
        None => None,
    };
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut cfg = base.clone();
        cfg.granularity = cell.granularity;
        cfg.partition_mode = cell.partition_mode;
        cfg.prob_fn = cell.prob_fn;
        cfg.schedule = cell.schedule;
        cfg.pretrained = pretrained.clone();
        cfg.out_dir = base.out_dir.join(cell.name());
        let test_error = match run_training_on(&cfg, train, test, |_| {}) {
            Ok(s) => Some(s.final_test_error),
            Err(Error::Diverged { .. }) => None,
            Err(e) => return Err(e),
        };
        let result = AblationResult { cell, test_error };
        on_cell(&result);
        results.push(result);
    }
    fs::write(base.out_dir.join("ablation.csv"), ablation_csv(&results))?;
    fs::write(base.out_dir.join("ablation.md"), ablation_table(&results))?;
    Ok(results)
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("granularity,partition_mode,prob_fn,schedule,test_error\n");
    for r in results {
        let c = r.cell;
        let err = r.test_error.map_or_else(|| "diverged".to_string(), |e| e.to_string());
        let _ = writeln!(out, "{},{},{},{},{err}", c.granularity, c.partition_mode, c.prob_fn, c.schedule);
    }
    out
}

/// Markdown comparison table sorted by test error, diverged cells last.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut sorted: Vec<&AblationResult> = results.iter().collect();
    sorted.sort_by(|a, b| {
        let key = |r: &AblationResult| r.test_error.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
    let mut out = String::from(
        "| rank | granularity | partition | prob_fn | schedule | test error (%) |\n|---:|---|---|---|---|---:|\n",
    );
    for (i, r) in sorted.iter().enumerate() {
        let c = r.cell;
        let err = r.test_error.map_or_else(|| "diverged".into(), |e| format!("{:.2}", 100.0 * e));
        let mark = if c.is_default() { " *" } else { "" };
        let _ = writeln!(
            out,
            "| {}{mark} | {} | {} | {} | {} | {err} |",
            i + 1,
            c.granularity,
            c.partition_mode,
            c.prob_fn,
            c.schedule
        );
    }
    out
}

/// Rank of the default cell among `results` by test error (1 = best; ties
/// share the better rank).
pub fn default_cell_rank(results: &[AblationResult]) -> Option<usize> {
    let default = results.iter().find(|r| r.cell.is_default())?.test_error?;
    Some(1 + results.iter().filter(|r| r.test_error.is_some_and(|e| e < default)).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::Arch;
    use crate::tensor::Tensor;

    /// Two linearly separable blobs on a 2x2 image.
    fn toy_data(n: usize, split: Split) -> Dataset {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let s = if label == 0 { -1.0 } else { 1.0 };
            let jitter = ((i * 7919) % 13) as f64 / 26.0;
            x.extend_from_slice(&[s + jitter, s - jitter, -s + jitter, -s]);
            y.push(label);
        }
        Dataset::new(Tensor::new(vec![n, 1, 2, 2], x).unwrap(), y, 2, split).unwrap()
    }

    fn toy_config(dir: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = Arch::Mlp;
        cfg.iters_per_stage = 5;
        cfg.lr_decay_steps = vec![3];
        cfg.batch_size = 10;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn run_directory_contents() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let (train, test) = (toy_data(40, Split::Train), toy_data(20, Split::Test));
        let summary = run_training_on(&cfg, &train, &test, |_| {}).unwrap();
        for f in ["manifest.json", "metrics.csv", "summary.json", "final.sqck", "stage4.sqck"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len() - 1, 20);
        assert!(lines[1].starts_with("0,1,0.5,"));
        assert!(lines[20].starts_with("19,4,1,"));
        assert_eq!(summary.checkpoints.len(), 4);
        assert_eq!(read_summary(dir.path()).unwrap(), summary);

        let again = tempfile::tempdir().unwrap();
        let cfg2 = toy_config(again.path());
        run_training_on(&cfg2, &train, &test, |_| {}).unwrap();
        assert_eq!(metrics, fs::read_to_string(again.path().join("metrics.csv")).unwrap());
    }

    #[test]
    fn learning_rate_ignores_stage_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.lr_decay_steps = vec![7];
        let mut lrs = Vec::new();
        run_training_on(&cfg, &toy_data(40, Split::Train), &toy_data(10, Split::Test), |p| {
            if let Progress::Iteration(r) = p {
                lrs.push(r.lr);
            }
        })
        .unwrap();
        assert!(lrs[..7].iter().all(|&l| l == 0.1));
        assert!(lrs[7..].iter().all(|&l| (l - 0.01).abs() < 1e-15));
    }

    #[test]
    fn default_rank_counts_strictly_better_cells() {
        let cells = AblationGrid::full().cells();
        assert_eq!(cells.len(), 72);
        assert_eq!(cells.iter().filter(|c| c.is_default()).count(), 1);
        let results: Vec<AblationResult> = cells
            .iter()
            .enumerate()
            .map(|(i, &cell)| AblationResult {
                cell,
                test_error: Some(if cell.is_default() { 0.1 } else { 0.05 + i as f64 * 0.001 }),
            })
            .collect();
        let better = results.iter().filter(|r| r.test_error.unwrap() < 0.1).count();
        assert_eq!(default_cell_rank(&results), Some(better + 1));
        assert!(ablation_table(&results).contains(" * |"));
    }
}
