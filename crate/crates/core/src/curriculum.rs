//! Adaptive domain randomization of the hole pose.
//!
//! Each training environment owns one `CurriculumState`. After every episode
//! the outcome is pushed into a fixed-length window; once the window is full
//! the success rate widens (above the upper bound) or narrows (below the
//! lower bound) the Gaussian from which hole poses are drawn.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations of the hole pose perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Difficulty {
    /// Position std per axis (m).
    pub pos_std: f64,
    /// Orientation std (rad).
    pub ori_std: f64,
}

impl Difficulty {
    pub const ZERO: Difficulty = Difficulty {
        pos_std: 0.0,
        ori_std: 0.0,
    };

    pub fn new(pos_std: f64, ori_std: f64) -> Self {
        Self { pos_std, ori_std }
    }
}

/// The three uncertainty regimes of the curriculum experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    OnlyPosition,
    OnlyOrientation,
    Both,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::OnlyPosition, Experiment::OnlyOrientation, Experiment::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::OnlyPosition => "only-position",
            Experiment::OnlyOrientation => "only-orientation",
            Experiment::Both => "both",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "only-position" | "position" => Ok(Experiment::OnlyPosition),
            "only-orientation" | "orientation" => Ok(Experiment::OnlyOrientation),
            "both" => Ok(Experiment::Both),
            other => Err(Error::Config(format!("unknown experiment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub pos_std: f64,
    pub ori_std: f64,
    pub pos_increment: f64,
    pub ori_increment: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub window_len: usize,
    pub pos_floor: f64,
    pub ori_floor: f64,
    pub pos_ceiling: Option<f64>,
    pub ori_ceiling: Option<f64>,
    window: VecDeque<bool>,
}

/// Initial curriculum plus the fixed evaluation difficulty of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub curriculum: CurriculumState,
    pub evaluation: Difficulty,
}

pub const DEFAULT_WINDOW: usize = 15;
pub const LOWER_BOUND: f64 = 0.6;
pub const UPPER_BOUND: f64 = 0.7;

/// Table of initial, increment and evaluation values per experiment.
pub fn difficulty_profile(experiment: Experiment) -> Profile {
    let (init, incr, eval) = match experiment {
        Experiment::OnlyPosition => (Difficulty::new(0.007, 0.0), Difficulty::new(0.001, 0.0), Difficulty::new(0.016, 0.0)),
        Experiment::OnlyOrientation => (Difficulty::new(0.0, 0.05), Difficulty::new(0.0, 0.01), Difficulty::new(0.0, 0.15)),
        Experiment::Both => (Difficulty::new(0.007, 0.05), Difficulty::new(0.001, 0.01), Difficulty::new(0.015, 0.1)),
    };
    let curriculum = CurriculumState {
        pos_std: init.pos_std,
        ori_std: init.ori_std,
        pos_increment: incr.pos_std,
        ori_increment: incr.ori_std,
        lower_bound: LOWER_BOUND,
        upper_bound: UPPER_BOUND,
        window_len: DEFAULT_WINDOW,
        pos_floor: 0.0,
        ori_floor: 0.0,
        pos_ceiling: Some(2.0 * eval.pos_std),
        ori_ceiling: Some(2.0 * eval.ori_std),
        window: VecDeque::with_capacity(DEFAULT_WINDOW),
    };
    Profile {
        curriculum,
        evaluation: eval,
    }
}

impl CurriculumState {
    /// A curriculum pinned at `difficulty` that never adapts.
    pub fn fixed(difficulty: Difficulty) -> Self {
        Self {
            pos_std: difficulty.pos_std,
            ori_std: difficulty.ori_std,
            pos_increment: 0.0,
            ori_increment: 0.0,
            lower_bound: LOWER_BOUND,
            upper_bound: UPPER_BOUND,
            window_len: DEFAULT_WINDOW,
            pos_floor: 0.0,
            ori_floor: 0.0,
            pos_ceiling: None,
            ori_ceiling: None,
            window: VecDeque::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lower_bound && self.lower_bound < self.upper_bound && self.upper_bound <= 1.0) {
            return Err(Error::Config(format!(
                "success bounds must satisfy 0 <= lower < upper <= 1, got [{}, {}]",
                self.lower_bound, self.upper_bound
            )));
        }
        if self.window_len == 0 {
            return Err(Error::Config("curriculum window must hold at least one episode".into()));
        }
        if self.pos_floor < 0.0 || self.ori_floor < 0.0 {
            return Err(Error::Config("curriculum floors must be >= 0".into()));
        }
        if self.pos_std < self.pos_floor || self.ori_std < self.ori_floor {
            return Err(Error::Config("initial stds below floors".into()));
        }
        Ok(())
    }

    pub fn difficulty(&self) -> Difficulty {
        Difficulty::new(self.pos_std, self.ori_std)
    }

    pub fn window(&self) -> impl Iterator<Item = bool> + '_ {
        self.window.iter().copied()
    }

    /// Success rate over the current window, `None` while empty.
    pub fn success_rate(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        let hits = self.window.iter().filter(|s| **s).count();
        Some(hits as f64 / self.window.len() as f64)
    }

    pub fn record_episode(mut self, success: bool) -> Self {
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(success);
        self
    }

    pub fn adapt(mut self) -> Self {
        if self.window.len() < self.window_len {
            return self;
        }
        let rate = self.success_rate().unwrap_or(0.0);
        let (pos, ori) = if rate > self.upper_bound {
            (self.pos_std + self.pos_increment, self.ori_std + self.ori_increment)
        } else if rate < self.lower_bound {
            (self.pos_std - self.pos_increment, self.ori_std - self.ori_increment)
        } else {
            return self;
        };
        let pos = clamp_opt(pos, self.pos_floor, self.pos_ceiling);
        let ori = clamp_opt(ori, self.ori_floor, self.ori_ceiling);
        if pos != self.pos_std || ori != self.ori_std {
            self.pos_std = pos;
            self.ori_std = ori;
            self.window.clear();
        }
        self
    }

    /// `record_episode` followed by `adapt`.
    pub fn observe(self, success: bool) -> Self {
        self.record_episode(success).adapt()
    }
}

fn clamp_opt(x: f64, floor: f64, ceiling: Option<f64>) -> f64 {
    let x = x.max(floor);
    match ceiling {
        Some(c) => x.min(c.max(floor)),
        None => x,
    }
}
