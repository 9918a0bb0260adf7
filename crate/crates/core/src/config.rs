//! Run configuration, loaded from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PipelineConfig;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::reward::{CheckerTables, RuleChecker};
use crate::rollout::RolloutConfig;
use crate::sim::{CalibrationConfig, CostModel, LengthDistribution};
use crate::tasks::{InitKind, PriorConfig, TaskConfig};
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub context_width: usize,
    pub init: InitKind,
    pub prior: PriorConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            context_width: 16,
            init: InitKind::Prior,
            prior: PriorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Write a parameter snapshot every this many steps; 0 disables.
    pub snapshot_every: u64,
    /// Fill the `wall_time` metrics column; off gives byte-reproducible logs.
    pub record_wall_time: bool,
    /// Samples per held-out question for the before/after accuracy check.
    pub eval_k: usize,
    /// Seeds for the multi-seed entropy-band report; empty skips it.
    pub band_seeds: Vec<u64>,
    /// Running-mean window for the entropy-band report.
    pub band_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            snapshot_every: 100,
            record_wall_time: true,
            eval_k: 32,
            band_seeds: Vec::new(),
            band_window: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub temperature: f64,
    /// JSONL dataset to evaluate; generated held-out tasks when absent.
    pub dataset: Option<PathBuf>,
    /// Parameter snapshot to evaluate; the initial policy when absent.
    pub params: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 32,
            temperature: 0.85,
            dataset: None,
            params: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub global_max_len: usize,
    pub segment_counts: Vec<usize>,
    /// Samples per workload.
    pub samples: usize,
    pub cost: CostModel,
    /// Fit a two-point mixture to the target before predicting.
    pub calibrate: bool,
    pub calibration: CalibrationConfig,
    /// Workload used when calibration is off.
    pub distribution: Option<LengthDistribution>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            global_max_len: 256,
            segment_counts: vec![1, 2, 4, 8],
            samples: 128 * 64,
            cost: CostModel::default(),
            calibrate: true,
            calibration: CalibrationConfig::default(),
            distribution: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanSection {
    pub input: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub exec: Exec,
    pub rollout: RolloutConfig,
    pub trainer: TrainerConfig,
    pub policy: PolicyConfig,
    pub tasks: TaskConfig,
    pub checker: CheckerTables,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub simulate: SimulateSection,
    pub clean: CleanSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 300,
            exec: Exec::Sequential,
            rollout: RolloutConfig::default(),
            trainer: TrainerConfig::default(),
            policy: PolicyConfig::default(),
            tasks: TaskConfig::default(),
            checker: CheckerTables::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            simulate: SimulateSection::default(),
            clean: CleanSection::default(),
        }
    }
}

/// Which subcommand is about to run; validation is scoped to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Simulate,
    Clean,
    Eval,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.clean.input, &mut cfg.eval.dataset, &mut cfg.eval.params].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Every problem relevant to `cmd`, collected before any work runs.
    pub fn problems(&self, cmd: Command) -> Vec<String> {
        let mut p = Vec::new();
        let needs_policy = matches!(cmd, Command::Train | Command::Eval);
        if needs_policy {
            p.extend(self.rollout.problems());
            p.extend(self.tasks.problems());
            if self.policy.context_width == 0 {
                p.push("policy.context_width must be positive".into());
            }
            p.extend(self.policy.prior.problems());
            if let Err(e) = RuleChecker::new(&self.checker) {
                p.push(format!("checker: {e}"));
            }
        }
        match cmd {
            Command::Train => {
                p.extend(self.trainer.problems());
                if self.trainer.ratio_mode == crate::ratios::RatioMode::Tois && self.rollout.segment_count != 1 {
                    p.push("trainer.ratio_mode TOIS requires rollout.segment_count = 1".into());
                }
                if self.train.eval_k == 0 {
                    p.push("train.eval_k must be positive".into());
                }
                if !self.train.band_seeds.is_empty() && self.train.band_window == 0 {
                    p.push("train.band_window must be positive".into());
                }
            }
            Command::Eval => {
                if self.eval.k == 0 {
                    p.push("eval.k must be positive".into());
                }
                if !(self.eval.temperature > 0.0 && self.eval.temperature.is_finite()) {
                    p.push("eval.temperature must be positive".into());
                }
                for f in [&self.eval.dataset, &self.eval.params].into_iter().flatten() {
                    if !f.is_file() {
                        p.push(format!("eval: file {} does not exist", f.display()));
                    }
                }
            }
            Command::Simulate => {
                let s = &self.simulate;
                p.extend(s.cost.problems());
                if s.samples == 0 {
                    p.push("simulate.samples must be positive".into());
                }
                if s.global_max_len == 0 {
                    p.push("simulate.global_max_len must be positive".into());
                }
                for &k in &s.segment_counts {
                    if k == 0 || (s.global_max_len > 0 && !s.global_max_len.is_multiple_of(k)) {
                        p.push(format!("simulate.segment_counts: {k} does not divide {}", s.global_max_len));
                    }
                }
                if s.calibrate {
                    p.extend(s.calibration.problems());
                } else {
                    match &s.distribution {
                        Some(d) => p.extend(d.problems(s.global_max_len)),
                        None => p.push("simulate.distribution is required when calibrate = false".into()),
                    }
                }
            }
            Command::Clean => {
                match &self.clean.input {
                    None => p.push("clean.input is required".into()),
                    Some(f) if !f.is_file() => p.push(format!("clean.input {} does not exist", f.display())),
                    Some(_) => {}
                }
                p.extend(self.clean.pipeline.problems());
                if let Err(e) = RuleChecker::new(&self.checker) {
                    p.push(format!("checker: {e}"));
                }
            }
        }
        p
    }

    pub fn validate(&self, cmd: Command) -> Result<()> {
        let p = self.problems(cmd);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_train_and_simulate() {
        let c = RunConfig::default();
        assert!(c.problems(Command::Train).is_empty(), "{:?}", c.problems(Command::Train));
        assert!(c.problems(Command::Simulate).is_empty());
        let clean = c.problems(Command::Clean);
        assert!(clean.contains(&"clean.input is required".to_string()), "{clean:?}");
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c = RunConfig::from_toml("seed = 5\n[rollout]\nsegment_count = 4\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.rollout.segment_count, 4);
        assert_eq!(c.rollout.group_size, 8);
        assert!(matches!(RunConfig::from_toml("[rollout]\nsegments = 4\n"), Err(Error::Toml(_))));
    }

    #[test]
    fn problems_are_exhaustive() {
        let c = RunConfig::from_toml(
            "[rollout]\nsegment_count = 3\ngroup_size = 1\n[trainer]\ntau = 1.5\nratio_mode = \"TOIS\"\n",
        )
        .unwrap();
        let p = c.problems(Command::Train);
        assert_eq!(p.len(), 4, "{p:?}");
    }
}
