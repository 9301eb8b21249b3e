//! TOML run configuration. Every section is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arm::ArmParams;
use crate::controller::ControllerConfig;
use crate::curriculum::{difficulty_profile, CurriculumState, Difficulty, Experiment, Profile};
use crate::error::{Error, Result};
use crate::policy::{ObsScale, OptimConfig};
use crate::residual::{ResidualBounds, ResidualMode};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: ResidualMode,
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub n_train_envs: usize,
    pub n_eval_envs: usize,
    /// Training episodes summed over all training environments.
    pub total_episodes: u64,
    /// Training episodes between evaluation rounds.
    pub eval_every: u64,
    pub curriculum_enabled: bool,
    /// Replace the controller by raw policy torques in the learned states.
    /// The policy keeps the residual torque bound.
    pub scratch: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: ResidualMode::JointPosFeedback,
            experiment: Experiment::OnlyPosition,
            seeds: vec![0, 1, 2, 3, 4],
            n_train_envs: 4,
            n_eval_envs: 4,
            total_episodes: 2000,
            eval_every: 10,
            curriculum_enabled: true,
            scratch: false,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Overrides of the curriculum profile chosen by `experiment`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumOverrides {
    pub window: Option<usize>,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub initial: Option<Difficulty>,
    pub increment: Option<Difficulty>,
    pub evaluation: Option<Difficulty>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub arm: ArmParams,
    pub world: WorldConfig,
    pub controller: ControllerConfig,
    pub residual: ResidualBounds,
    pub optimizer: OptimConfig,
    pub observation: ObsScale,
    pub curriculum: CurriculumOverrides,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if e.n_train_envs == 0 || e.n_eval_envs == 0 {
            return Err(Error::Config("need at least one training and one evaluation environment".into()));
        }
        if e.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if e.scratch && e.mode != ResidualMode::JointEffort {
            return Err(Error::Config("the scratch baseline acts through joint torques (mode joint-effort)".into()));
        }
        self.arm.validate()?;
        self.world.validate()?;
        self.controller.validate(&self.arm)?;
        self.residual.validate()?;
        self.optimizer.validate()?;
        self.observation.validate()?;
        self.profile().curriculum.validate()
    }

    /// Curriculum and evaluation difficulty after overrides.
    pub fn profile(&self) -> Profile {
        let mut p = difficulty_profile(self.experiment.experiment);
        let o = &self.curriculum;
        if let Some(eval) = o.evaluation {
            p.evaluation = eval;
            p.curriculum.pos_ceiling = Some(2.0 * eval.pos_std);
            p.curriculum.ori_ceiling = Some(2.0 * eval.ori_std);
        }
        if let Some(init) = o.initial {
            p.curriculum.pos_std = init.pos_std;
            p.curriculum.ori_std = init.ori_std;
        }
        if let Some(inc) = o.increment {
            p.curriculum.pos_increment = inc.pos_std;
            p.curriculum.ori_increment = inc.ori_std;
        }
        if let Some(w) = o.window {
            p.curriculum.window_len = w;
        }
        if let Some(l) = o.lower_bound {
            p.curriculum.lower_bound = l;
        }
        if let Some(u) = o.upper_bound {
            p.curriculum.upper_bound = u;
        }
        p
    }

    /// Training curriculum: adaptive, or pinned at the evaluation difficulty.
    pub fn training_curriculum(&self) -> CurriculumState {
        let p = self.profile();
        if self.experiment.curriculum_enabled {
            p.curriculum
        } else {
            CurriculumState::fixed(p.evaluation)
        }
    }

    /// Short label distinguishing baselines that share a residual mode.
    pub fn variant(&self) -> String {
        let e = &self.experiment;
        let mut v = if e.scratch { "scratch".to_string() } else { e.mode.as_str().to_string() };
        if !e.curriculum_enabled {
            v.push_str("/no-curriculum");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        c.validate().unwrap();
    }

    #[test]
    fn sections_override() {
        let c = Config::from_toml(
            r#"
            [experiment]
            mode = "hybrid"
            experiment = "both"
            seeds = [3]
            total_episodes = 40

            [controller]
            buffer_steps = 100
            strict_condition = true

            [controller.gains]
            kp = [80.0, 80.0, 80.0]
            kd = [9.0, 9.0, 9.0]

            [curriculum]
            window = 10
            "#,
        )
        .unwrap();
        assert_eq!(c.experiment.mode, ResidualMode::Hybrid);
        assert_eq!(c.experiment.experiment, Experiment::Both);
        assert_eq!(c.controller.buffer_steps, 100);
        assert_eq!(c.controller.gains.kp[0], 80.0);
        assert_eq!(c.controller.ik_max_iters, ControllerConfig::default().ik_max_iters);
        assert_eq!(c.profile().curriculum.window_len, 10);
        assert_eq!(c.profile().evaluation, Difficulty::new(0.015, 0.1));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("[experiment]\nmodee = \"hybrid\"").is_err());
        assert!(Config::from_toml("[bogus]\nx = 1").is_err());
        assert!(Config::from_toml("[world.contact]\nstiffnes = 1.0").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn no_curriculum_trains_at_evaluation_difficulty() {
        let mut c = Config::default();
        c.experiment.curriculum_enabled = false;
        assert_eq!(c.training_curriculum().difficulty(), Difficulty::new(0.016, 0.0));
        assert_eq!(c.variant(), "joint-pos-feedback/no-curriculum");
    }
}
