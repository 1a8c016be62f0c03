//! Staged quantization-ratio plans and the step learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// 50%, 75%, 87.5%, 100%: the unquantized share halves every stage.
    Exponential,
    /// 20%, 40%, 60%, 80%, 100%.
    Average,
    /// Exponential ratios, starting from a pretrained full-precision model.
    FineTune,
    /// A single stage at 100%: plain BWN/TWN training, or FWN when the run
    /// has no quantizer.
    Full,
}

impl ScheduleMode {
    pub const SQ_MODES: [ScheduleMode; 3] = [
        ScheduleMode::Exponential,
        ScheduleMode::Average,
        ScheduleMode::FineTune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::Exponential => "exponential",
            ScheduleMode::Average => "average",
            ScheduleMode::FineTune => "finetune",
            ScheduleMode::Full => "full",
        }
    }

    fn ratios(self) -> &'static [f64] {
        match self {
            ScheduleMode::Exponential | ScheduleMode::FineTune => &[0.5, 0.75, 0.875, 1.0],
            ScheduleMode::Average => &[0.2, 0.4, 0.6, 0.8, 1.0],
            ScheduleMode::Full => &[1.0],
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(ScheduleMode::Exponential),
            "average" | "ave" => Ok(ScheduleMode::Average),
            "finetune" | "fine-tune" | "tune" => Ok(ScheduleMode::FineTune),
            "full" => Ok(ScheduleMode::Full),
            other => Err(Error::argument(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub ratio: f64,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqSchedule {
    stages: Vec<Stage>,
    mode: ScheduleMode,
    from_pretrained: bool,
}

impl SqSchedule {
    pub fn new(mode: ScheduleMode, iterations_per_stage: u64) -> Result<Self> {
        if iterations_per_stage == 0 {
            return Err(Error::argument("iterations per stage must be at least 1"));
        }
        let stages = mode
            .ratios()
            .iter()
            .map(|&ratio| Stage {
                ratio,
                iterations: iterations_per_stage,
            })
            .collect();
        Ok(Self {
            stages,
            mode,
            from_pretrained: mode == ScheduleMode::FineTune,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn from_pretrained(&self) -> bool {
        self.from_pretrained
    }

    pub fn total_iterations(&self) -> u64 {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    /// First iteration of stage `index`.
    pub fn stage_start(&self, index: usize) -> u64 {
        self.stages[..index].iter().map(|s| s.iterations).sum()
    }

    pub fn stage_at(&self, iteration: u64) -> Result<usize> {
        let mut end = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            end += stage.iterations;
            if iteration < end {
                return Ok(i);
            }
        }
        Err(Error::argument(format!(
            "iteration {iteration} outside schedule of {end} iterations"
        )))
    }

    pub fn ratio_at(&self, iteration: u64) -> Result<f64> {
        Ok(self.stages[self.stage_at(iteration)?].ratio)
    }
}

pub fn make_schedule(mode: &str, iterations_per_stage: u64) -> Result<SqSchedule> {
    SqSchedule::new(mode.parse()?, iterations_per_stage)
}

/// Step decay: the rate is divided by 10 at each listed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    base: f64,
    decay_steps: Vec<u64>,
}

impl LrSchedule {
    pub const DECAY_FACTOR: f64 = 0.1;

    pub fn new(base: f64, mut decay_steps: Vec<u64>) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::argument(format!("learning rate must be positive, got {base}")));
        }
        decay_steps.sort_unstable();
        Ok(Self { base, decay_steps })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn decay_steps(&self) -> &[u64] {
        &self.decay_steps
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let decays = self.decay_steps.iter().filter(|&&s| s <= iteration).count();
        self.base * Self::DECAY_FACTOR.powi(decays as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratios(s: &SqSchedule) -> Vec<f64> {
        s.stages().iter().map(|st| st.ratio).collect()
    }

    #[test]
    fn stage_ratios() {
        assert_eq!(ratios(&make_schedule("exponential", 10).unwrap()), [0.5, 0.75, 0.875, 1.0]);
        assert_eq!(ratios(&make_schedule("average", 10).unwrap()), [0.2, 0.4, 0.6, 0.8, 1.0]);
        let tune = make_schedule("finetune", 10).unwrap();
        assert_eq!(ratios(&tune), [0.5, 0.75, 0.875, 1.0]);
        assert!(tune.from_pretrained());
        assert!(!make_schedule("exponential", 10).unwrap().from_pretrained());
        assert!(matches!(make_schedule("cosine", 10), Err(Error::Argument(_))));
        assert!(make_schedule("exponential", 0).is_err());
    }

    #[test]
    fn exponential_halves_unquantized_share() {
        let unq: Vec<f64> = ratios(&make_schedule("exponential", 1).unwrap())
            .iter()
            .map(|r| 1.0 - r)
            .collect();
        assert_eq!(unq, [0.5, 0.25, 0.125, 0.0]);
    }

    #[test]
    fn ratio_lookup() {
        let s = make_schedule("exponential", 1000).unwrap();
        assert_eq!(s.ratio_at(0).unwrap(), 0.5);
        assert_eq!(s.ratio_at(3999).unwrap(), 1.0);
        assert!(s.ratio_at(4000).is_err());
        assert_eq!(s.total_iterations(), 4000);
        assert_eq!(s.stage_start(2), 2000);

        let a = make_schedule("average", 100).unwrap();
        assert_eq!(a.ratio_at(250).unwrap(), 0.6);
    }

    #[test]
    fn step_decay() {
        let lr = LrSchedule::new(0.1, vec![600, 300]).unwrap();
        assert_eq!(lr.lr_at(0), 0.1);
        assert_eq!(lr.lr_at(299), 0.1);
        assert!((lr.lr_at(300) - 0.01).abs() < 1e-15);
        assert!((lr.lr_at(10_000) - 0.001).abs() < 1e-15);
        assert!(LrSchedule::new(0.0, vec![]).is_err());
    }
}
