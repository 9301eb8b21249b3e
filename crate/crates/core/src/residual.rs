//! Residual formulations: policy output superposed on the controller's
//! output (action side), on its feedback (observation side), or both.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::arm::{self, ArmParams, JointState, JointVector, PlanarWrench};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    None,
    JointEffort,
    EeWrench,
    JointPosFeedback,
    EePoseFeedback,
    Hybrid,
}

impl ResidualMode {
    pub const ALL: [ResidualMode; 6] = [
        ResidualMode::None,
        ResidualMode::JointEffort,
        ResidualMode::EeWrench,
        ResidualMode::JointPosFeedback,
        ResidualMode::EePoseFeedback,
        ResidualMode::Hybrid,
    ];

    /// The five learnable formulations.
    pub const LEARNED: [ResidualMode; 5] = [
        ResidualMode::JointEffort,
        ResidualMode::EeWrench,
        ResidualMode::JointPosFeedback,
        ResidualMode::EePoseFeedback,
        ResidualMode::Hybrid,
    ];

    /// Action dimensionality for an `n`-joint arm.
    pub fn action_dim(self, n: usize) -> usize {
        match self {
            ResidualMode::None => 0,
            ResidualMode::JointEffort | ResidualMode::JointPosFeedback => n,
            ResidualMode::EeWrench | ResidualMode::EePoseFeedback => 3,
            ResidualMode::Hybrid => 2 * n,
        }
    }

    pub fn is_feedback(self) -> bool {
        matches!(
            self,
            ResidualMode::JointPosFeedback | ResidualMode::EePoseFeedback | ResidualMode::Hybrid
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResidualMode::None => "none",
            ResidualMode::JointEffort => "joint-effort",
            ResidualMode::EeWrench => "ee-wrench",
            ResidualMode::JointPosFeedback => "joint-pos-feedback",
            ResidualMode::EePoseFeedback => "ee-pose-feedback",
            ResidualMode::Hybrid => "hybrid",
        }
    }

    /// Short label used in tables and plots.
    pub fn abbrev(self) -> &'static str {
        match self {
            ResidualMode::None => "none",
            ResidualMode::JointEffort => "JE",
            ResidualMode::EeWrench => "EEW",
            ResidualMode::JointPosFeedback => "JPF",
            ResidualMode::EePoseFeedback => "EEPF",
            ResidualMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        ResidualMode::ALL
            .into_iter()
            .find(|m| m.as_str() == key || m.abbrev().eq_ignore_ascii_case(&key))
            .ok_or_else(|| Error::Config(format!("unknown residual mode '{s}'")))
    }
}

/// Componentwise bounds applied after squashing raw policy output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualBounds {
    /// N m per joint.
    pub torque: f64,
    /// (N, N, N m).
    pub wrench: [f64; 3],
    /// rad per joint.
    pub joint_delta: f64,
    /// (m, m, rad).
    pub pose_delta: [f64; 3],
}

impl Default for ResidualBounds {
    fn default() -> Self {
        Self {
            torque: 3.0,
            wrench: [4.0, 4.0, 1.0],
            joint_delta: 0.05,
            pose_delta: [0.01, 0.01, 0.05],
        }
    }
}

impl ResidualBounds {
    pub fn validate(&self) -> Result<()> {
        let all = [self.torque, self.joint_delta]
            .into_iter()
            .chain(self.wrench)
            .chain(self.pose_delta);
        for b in all {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::Config("residual bounds must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// Per-component scale for a mode's action vector.
    pub fn scale(&self, mode: ResidualMode, n: usize) -> Vec<f64> {
        match mode {
            ResidualMode::None => Vec::new(),
            ResidualMode::JointEffort => vec![self.torque; n],
            ResidualMode::EeWrench => self.wrench.to_vec(),
            ResidualMode::JointPosFeedback => vec![self.joint_delta; n],
            ResidualMode::EePoseFeedback => self.pose_delta.to_vec(),
            ResidualMode::Hybrid => {
                let mut s = vec![self.torque; n];
                s.extend(std::iter::repeat_n(self.joint_delta, n));
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResidualCommand {
    JointEffort(JointVector),
    EeWrench(PlanarWrench),
    JointPosFeedback(JointVector),
    EePoseFeedback(Vector3<f64>),
    Hybrid { torque: JointVector, feedback: JointVector },
}

impl ResidualCommand {
    pub fn mode(&self) -> ResidualMode {
        match self {
            ResidualCommand::JointEffort(_) => ResidualMode::JointEffort,
            ResidualCommand::EeWrench(_) => ResidualMode::EeWrench,
            ResidualCommand::JointPosFeedback(_) => ResidualMode::JointPosFeedback,
            ResidualCommand::EePoseFeedback(_) => ResidualMode::EePoseFeedback,
            ResidualCommand::Hybrid { .. } => ResidualMode::Hybrid,
        }
    }

    pub fn zero(mode: ResidualMode, n: usize) -> Option<Self> {
        Self::from_scaled(mode, &vec![0.0; mode.action_dim(n)], n).ok()
    }

    /// Build from an already-bounded action vector.
    pub fn from_scaled(mode: ResidualMode, a: &[f64], n: usize) -> Result<Self> {
        let d = mode.action_dim(n);
        if a.len() != d || mode == ResidualMode::None {
            return Err(Error::Dimension {
                expected: d,
                got: a.len(),
            });
        }
        Ok(match mode {
            ResidualMode::None => unreachable!(),
            ResidualMode::JointEffort => ResidualCommand::JointEffort(JointVector::from_column_slice(a)),
            ResidualMode::EeWrench => ResidualCommand::EeWrench(PlanarWrench::new(a[0], a[1], a[2])),
            ResidualMode::JointPosFeedback => ResidualCommand::JointPosFeedback(JointVector::from_column_slice(a)),
            ResidualMode::EePoseFeedback => ResidualCommand::EePoseFeedback(Vector3::new(a[0], a[1], a[2])),
            ResidualMode::Hybrid => ResidualCommand::Hybrid {
                torque: JointVector::from_column_slice(&a[..n]),
                feedback: JointVector::from_column_slice(&a[n..]),
            },
        })
    }

    /// Squash raw policy output with `tanh` and scale to the mode's bounds.
    pub fn from_raw(mode: ResidualMode, raw: &[f64], bounds: &ResidualBounds, n: usize) -> Result<Self> {
        let scale = bounds.scale(mode, n);
        if raw.len() != scale.len() {
            return Err(Error::Dimension {
                expected: scale.len(),
                got: raw.len(),
            });
        }
        let a: Vec<f64> = raw.iter().zip(&scale).map(|(r, s)| s * r.tanh()).collect();
        Self::from_scaled(mode, &a, n)
    }

    pub fn as_vec(&self) -> Vec<f64> {
        match self {
            ResidualCommand::JointEffort(v) | ResidualCommand::JointPosFeedback(v) => v.iter().copied().collect(),
            ResidualCommand::EeWrench(w) => vec![w.fx, w.fy, w.tz],
            ResidualCommand::EePoseFeedback(d) => d.iter().copied().collect(),
            ResidualCommand::Hybrid { torque, feedback } => torque.iter().chain(feedback.iter()).copied().collect(),
        }
    }

    /// Euclidean norm of the payload, for logging.
    pub fn magnitude(&self) -> f64 {
        self.as_vec().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn within(&self, bounds: &ResidualBounds, n: usize) -> bool {
        let scale = bounds.scale(self.mode(), n);
        self.as_vec().iter().zip(&scale).all(|(a, s)| a.abs() <= *s)
    }

    /// The feedback-side part alone, if the command has one.
    pub fn feedback_part(&self) -> Option<ResidualCommand> {
        match self {
            ResidualCommand::JointPosFeedback(_) | ResidualCommand::EePoseFeedback(_) => Some(self.clone()),
            ResidualCommand::Hybrid { feedback, .. } => Some(ResidualCommand::JointPosFeedback(feedback.clone())),
            _ => None,
        }
    }
}

fn tag_error(expected: ResidualMode) -> Error {
    Error::Mode {
        mode: expected.as_str(),
    }
}

/// `f_out + cmd`, clamped. The flag reports whether the clamp engaged.
pub fn apply_joint_effort(f_out: &JointVector, cmd: &ResidualCommand, arm: &ArmParams) -> Result<(JointVector, bool)> {
    let ResidualCommand::JointEffort(t) = cmd else {
        return Err(tag_error(ResidualMode::JointEffort));
    };
    arm.check_dim(t.len())?;
    let mut out = f_out + t;
    let clamped = arm.clamp_torque(&mut out);
    Ok((out, clamped))
}

/// `f_out + J(q)^T cmd`, clamped.
pub fn apply_ee_wrench(
    f_out: &JointVector,
    cmd: &ResidualCommand,
    j: &arm::Jacobian,
    arm: &ArmParams,
) -> Result<(JointVector, bool)> {
    let ResidualCommand::EeWrench(w) = cmd else {
        return Err(tag_error(ResidualMode::EeWrench));
    };
    let mut out = f_out + arm::joint_torque_from_wrench(j, w);
    let clamped = arm.clamp_torque(&mut out);
    Ok((out, clamped))
}

/// Offset the measured joint positions; velocities and external torques are untouched.
pub fn apply_joint_pos_feedback(o1: &JointState, cmd: &ResidualCommand) -> Result<JointState> {
    let ResidualCommand::JointPosFeedback(dq) = cmd else {
        return Err(tag_error(ResidualMode::JointPosFeedback));
    };
    if dq.len() != o1.q.len() {
        return Err(Error::Dimension {
            expected: o1.q.len(),
            got: dq.len(),
        });
    }
    Ok(JointState {
        q: &o1.q + dq,
        v: o1.v.clone(),
        tau_ext: o1.tau_ext.clone(),
    })
}

/// `q' = IK(FK(q) + delta)` seeded at `q`. Falls back to `q` when IK fails;
/// the returned flag reports the fallback.
pub fn apply_ee_pose_feedback(
    o1: &JointState,
    cmd: &ResidualCommand,
    arm: &ArmParams,
    ik: &IkSettings,
) -> Result<(JointState, bool)> {
    let ResidualCommand::EePoseFeedback(delta) = cmd else {
        return Err(tag_error(ResidualMode::EePoseFeedback));
    };
    let pose = arm::forward_kinematics(&o1.q, arm)?;
    let target = pose.offset(delta);
    let (q, fell_back) = match arm::inverse_kinematics(&target, &o1.q, arm, ik.tolerance, ik.max_iters) {
        Ok(q) => (q, false),
        Err(_) => (o1.q.clone(), true),
    };
    Ok((
        JointState {
            q,
            v: o1.v.clone(),
            tau_ext: o1.tau_ext.clone(),
        },
        fell_back,
    ))
}

/// `f(o1 + feedback) + torque`.
pub fn apply_hybrid(
    o1: &JointState,
    f: &mut dyn FnMut(&JointState) -> JointVector,
    cmd: &ResidualCommand,
    arm: &ArmParams,
) -> Result<(JointVector, bool)> {
    let ResidualCommand::Hybrid { torque, feedback } = cmd else {
        return Err(tag_error(ResidualMode::Hybrid));
    };
    let virt = apply_joint_pos_feedback(o1, &ResidualCommand::JointPosFeedback(feedback.clone()))?;
    apply_joint_effort(&f(&virt), &ResidualCommand::JointEffort(torque.clone()), arm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSettings {
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iters: 30,
        }
    }
}

/// Result of one composed controller tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Composed {
    pub torque: JointVector,
    /// The state the controller actually saw.
    pub feedback: JointState,
    pub clamped: bool,
    pub ik_fallback: bool,
}

/// Feedback state the controller sees under a (possibly suppressed) command.
///
/// Feedback modifications persist while the policy is not queried, so a
/// suppressed command still contributes its feedback half.
pub fn virtual_feedback(
    o1: &JointState,
    cmd: Option<&ResidualCommand>,
    arm: &ArmParams,
    ik: &IkSettings,
) -> Result<(JointState, bool)> {
    match cmd.and_then(ResidualCommand::feedback_part) {
        Some(c @ ResidualCommand::JointPosFeedback(_)) => Ok((apply_joint_pos_feedback(o1, &c)?, false)),
        Some(c @ ResidualCommand::EePoseFeedback(_)) => apply_ee_pose_feedback(o1, &c, arm, ik),
        _ => Ok((o1.clone(), false)),
    }
}

/// One controller tick under residual mode `mode`.
///
/// `f` is the bare controller. When the policy is not active (`!rl_gated`
/// or `buffered`) the action half of `cmd` is dropped; its feedback half,
/// if any, keeps shaping what `f` sees.
#[allow(clippy::too_many_arguments)]
pub fn compose_step(
    mode: ResidualMode,
    o1: &JointState,
    f: &mut dyn FnMut(&JointState) -> JointVector,
    cmd: Option<&ResidualCommand>,
    rl_gated: bool,
    buffered: bool,
    arm: &ArmParams,
    ik: &IkSettings,
) -> Result<Composed> {
    if let Some(c) = cmd {
        if mode != ResidualMode::None && c.mode() != mode {
            return Err(tag_error(mode));
        }
    }
    let bare = |o1: &JointState, f: &mut dyn FnMut(&JointState) -> JointVector| Composed {
        torque: f(o1),
        feedback: o1.clone(),
        clamped: false,
        ik_fallback: false,
    };
    let Some(cmd) = cmd.filter(|_| mode != ResidualMode::None) else {
        return Ok(bare(o1, f));
    };
    if !rl_gated || buffered {
        if !mode.is_feedback() {
            return Ok(bare(o1, f));
        }
        let (fb, ik_fallback) = virtual_feedback(o1, Some(cmd), arm, ik)?;
        return Ok(Composed {
            torque: f(&fb),
            feedback: fb,
            clamped: false,
            ik_fallback,
        });
    }
    match cmd {
        ResidualCommand::JointEffort(_) => {
            let (torque, clamped) = apply_joint_effort(&f(o1), cmd, arm)?;
            Ok(Composed {
                torque,
                feedback: o1.clone(),
                clamped,
                ik_fallback: false,
            })
        }
        ResidualCommand::EeWrench(_) => {
            let j = arm::jacobian(&o1.q, arm)?;
            let (torque, clamped) = apply_ee_wrench(&f(o1), cmd, &j, arm)?;
            Ok(Composed {
                torque,
                feedback: o1.clone(),
                clamped,
                ik_fallback: false,
            })
        }
        ResidualCommand::JointPosFeedback(_) => {
            let fb = apply_joint_pos_feedback(o1, cmd)?;
            Ok(Composed {
                torque: f(&fb),
                feedback: fb,
                clamped: false,
                ik_fallback: false,
            })
        }
        ResidualCommand::EePoseFeedback(_) => {
            let (fb, ik_fallback) = apply_ee_pose_feedback(o1, cmd, arm, ik)?;
            Ok(Composed {
                torque: f(&fb),
                feedback: fb,
                clamped: false,
                ik_fallback,
            })
        }
        ResidualCommand::Hybrid { feedback, .. } => {
            let fb = apply_joint_pos_feedback(o1, &ResidualCommand::JointPosFeedback(feedback.clone()))?;
            let (torque, clamped) = apply_hybrid(o1, f, cmd, arm)?;
            Ok(Composed {
                torque,
                feedback: fb,
                clamped,
                ik_fallback: false,
            })
        }
    }
}
