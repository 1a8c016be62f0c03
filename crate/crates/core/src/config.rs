//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::nn::Arch;
use crate::partition::{Granularity, ProbabilityFn, ProbabilityKind};
use crate::quant::QuantKind;
use crate::schedule::{LrSchedule, ScheduleMode, SqSchedule};
use crate::trainer::{PartitionMode, Scheme, StepConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub partition_mode: PartitionMode,
    pub prob_fn: ProbabilityKind,
    pub schedule: ScheduleMode,
    pub iters_per_stage: u64,
    pub lr: f64,
    /// Iterations at which the rate is divided by 10.
    pub lr_decay_steps: Vec<u64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: Arch,
    /// Full-precision checkpoint that fine-tune runs start from.
    pub pretrained: Option<PathBuf>,
    /// Use only the first `n` training samples (0 = all).
    pub train_limit: usize,
    /// Evaluate on only the first `n` test samples (0 = all).
    pub test_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Quantized(QuantKind::Twn),
            granularity: Granularity::ChannelWise,
            partition_mode: PartitionMode::Stochastic,
            prob_fn: ProbabilityKind::Linear,
            schedule: ScheduleMode::Exponential,
            iters_per_stage: 2000,
            lr: 0.1,
            lr_decay_steps: vec![4000, 6000],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 100,
            seed: 0,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/default"),
            model: Arch::Cnn,
            pretrained: None,
            train_limit: 0,
            test_limit: 0,
        }
    }
}

pub const KEYS: [&str; 19] = [
    "scheme",
    "granularity",
    "partition_mode",
    "prob_fn",
    "schedule",
    "iters_per_stage",
    "lr",
    "lr_decay_steps",
    "momentum",
    "weight_decay",
    "batch_size",
    "seed",
    "dataset",
    "data_dir",
    "out_dir",
    "model",
    "pretrained",
    "train_limit",
    "test_limit",
];

fn invalid(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("invalid value `{value}` for key `{key}`: {why}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| invalid(key, value, e))
}

impl TrainConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Sets one key; used by the parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let named = |e: Error| invalid(key, value, e);
        match key {
            "scheme" => self.scheme = value.parse().map_err(named)?,
            "granularity" => self.granularity = value.parse().map_err(named)?,
            "partition_mode" => self.partition_mode = value.parse().map_err(named)?,
            "prob_fn" => self.prob_fn = value.parse().map_err(named)?,
            "schedule" => self.schedule = value.parse().map_err(named)?,
            "iters_per_stage" => self.iters_per_stage = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_decay_steps" => {
                self.lr_decay_steps = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?;
            }
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "dataset" => self.dataset = value.parse().map_err(named)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "model" => self.model = value.parse().map_err(named)?,
            "pretrained" => {
                self.pretrained = (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "test_limit" => self.test_limit = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("key `{key}`: {msg}")))
            }
        };
        check(self.iters_per_stage > 0, "iters_per_stage", "must be at least 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must be in [0, 1)")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "must be non-negative",
        )?;
        check(self.batch_size > 0, "batch_size", "must be at least 1")?;
        if self.scheme == Scheme::Fwn && self.schedule != ScheduleMode::Full {
            return Err(Error::Config(format!(
                "key `schedule`: scheme fwn only supports `full`, got `{}`",
                self.schedule
            )));
        }
        if self.schedule == ScheduleMode::FineTune && self.pretrained.is_none() {
            return Err(Error::Config("key `pretrained`: required by schedule `finetune`".into()));
        }
        Ok(())
    }

    /// Every key in fixed order; the digest is taken over this text.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "scheme" => self.scheme.to_string(),
            "granularity" => self.granularity.to_string(),
            "partition_mode" => self.partition_mode.to_string(),
            "prob_fn" => self.prob_fn.to_string(),
            "schedule" => self.schedule.to_string(),
            "iters_per_stage" => self.iters_per_stage.to_string(),
            "lr" => format!("{:?}", self.lr),
            "lr_decay_steps" => self
                .lr_decay_steps
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "momentum" => format!("{:?}", self.momentum),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "model" => self.model.name().to_string(),
            "pretrained" => self
                .pretrained
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    pub fn sq_schedule(&self) -> Result<SqSchedule> {
        SqSchedule::new(self.schedule, self.iters_per_stage)
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.lr_decay_steps.clone())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            scheme: self.scheme,
            granularity: self.granularity,
            partition_mode: self.partition_mode,
            prob_fn: ProbabilityFn::new(self.prob_fn),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments_and_defaults() {
        let cfg = TrainConfig::parse(
            "# sq-twn on mnist\nscheme = bwn\nprob_fn=softmax  # trailing\n\nlr_decay_steps = 10, 20\n",
        )
        .unwrap();
        assert_eq!(cfg.scheme, Scheme::Quantized(QuantKind::Bwn));
        assert_eq!(cfg.prob_fn, ProbabilityKind::Softmax);
        assert_eq!(cfg.lr_decay_steps, vec![10, 20]);
        assert_eq!(cfg.batch_size, 100);
    }

    #[test]
    fn errors_name_the_key_or_value() {
        let msg = TrainConfig::parse("prob_fn = quadratic").unwrap_err().to_string();
        assert!(msg.contains("quadratic") && msg.contains("prob_fn"), "{msg}");
        let msg = TrainConfig::parse("learning_rate = 0.1").unwrap_err().to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(matches!(TrainConfig::parse("lr"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("momentum = 1.5"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("scheme = fwn"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("schedule = finetune"), Err(Error::Config(_))));
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("seed", "7").unwrap();
        cfg.set("pretrained", "runs/fwn/final.sqck").unwrap();
        cfg.set("schedule", "finetune").unwrap();
        let again = TrainConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        cfg.set("seed", "8").unwrap();
        assert_ne!(again.digest(), cfg.digest());
    }
}
