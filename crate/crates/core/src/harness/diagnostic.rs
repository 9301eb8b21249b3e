//! Buffer-steps diagnostic: a scripted residual pushes the pre-insert motion
//! sideways and we measure how much of that push survives the buffer.

use serde::Serialize;

use super::config::Config;
use crate::arm::{inverse_kinematics, JointVector};
use crate::controller::{home_configuration, pre_insert_goal, HoleFrame, Phase};
use crate::error::{Error, Result};
use crate::residual::{ResidualCommand, ResidualMode};
use crate::world::{Env, HoleSample};

/// Modes the diagnostic compares.
pub const DIAGNOSTIC_MODES: [ResidualMode; 2] = [ResidualMode::JointEffort, ResidualMode::JointPosFeedback];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub mode: &'static str,
    pub buffer_steps: u64,
    pub strict: u8,
    /// Sign of the lateral offset for this trial (+1 or -1).
    pub direction: i8,
    pub offset: f64,
    /// Lateral TCP displacement from the pre-insert goal toward the offset target (m).
    pub displacement: f64,
    pub error: u8,
    pub exit_tick: u64,
}

/// Joint displacement that moves the pre-insert pose `lateral` metres sideways.
fn oracle_delta(config: &Config, lateral: f64) -> Result<(JointVector, f64)> {
    let geometry = &config.world.geometry;
    let nominal = HoleSample::nominal(geometry).nominal_pose;
    let c = &config.controller;
    let goal = pre_insert_goal(c, &nominal);
    let shifted = HoleFrame::new(&nominal).pose(c.pre_insert_lateral + lateral, c.pre_insert_height, c.pre_insert_tilt);
    let home = home_configuration(c, &config.arm)?;
    let q0 = inverse_kinematics(&goal, &home, &config.arm, c.ik_tolerance, c.ik_max_iters)?;
    let q1 = inverse_kinematics(&shifted, &q0, &config.arm, c.ik_tolerance, c.ik_max_iters)?;
    let (goal_lat, _) = HoleFrame::new(&nominal).to_local(goal.x, goal.y);
    Ok((q1 - q0, goal_lat))
}

/// The scripted residual. Torque mode pushes with the controller's own
/// stiffness; feedback mode shifts the sensed joints the opposite way.
fn oracle_command(mode: ResidualMode, dq: &JointVector, config: &Config) -> Result<ResidualCommand> {
    match mode {
        ResidualMode::JointEffort => {
            let kp = JointVector::from_column_slice(&config.controller.gains.kp);
            Ok(ResidualCommand::JointEffort(kp.component_mul(dq)))
        }
        ResidualMode::JointPosFeedback => Ok(ResidualCommand::JointPosFeedback(-dq)),
        other => Err(Error::Mode { mode: other.as_str() }),
    }
}

/// Run one pre-insert motion under the oracle and report the lateral
/// displacement at the moment the machine leaves the state.
pub fn diagnostic_trial(config: &Config, mode: ResidualMode, b: u64, strict: bool, offset: f64) -> Result<DiagnosticRow> {
    let mut c = config.clone();
    c.controller.buffer_steps = b;
    c.controller.strict_condition = strict;
    let (dq, goal_lat) = oracle_delta(&c, offset)?;
    let cmd = oracle_command(mode, &dq, &c)?;
    let mut env = Env::new(c.arm.clone(), c.controller.clone(), c.world.clone(), mode)?;
    env.set_policy_phases(Some(&[Phase::MoveToPreInsert]));
    let hole = HoleSample::nominal(&c.world.geometry);
    env.reset_to(hole);
    let frame = HoleFrame::new(&hole.nominal_pose);
    while env.machine().phase == Phase::MoveToPreInsert && !env.is_done() {
        let act = env.rl_active().then(|| cmd.clone());
        env.step(act, None)?;
    }
    let exit_tick = env.machine().entry_tick;
    let tcp = env.tcp();
    let (lat, _) = frame.to_local(tcp.x, tcp.y);
    Ok(DiagnosticRow {
        mode: mode.as_str(),
        buffer_steps: b,
        strict: strict as u8,
        direction: offset.signum() as i8,
        offset: offset.abs(),
        displacement: (lat - goal_lat) * offset.signum(),
        error: env.machine().error as u8,
        exit_tick,
    })
}

/// All (mode, b, strict, direction) trials.
pub fn buffer_steps_diagnostic(config: &Config, b_values: &[u64], modes: &[ResidualMode], offset: f64) -> Result<Vec<DiagnosticRow>> {
    if !(offset.is_finite() && offset > 0.0 && offset < 0.5 * config.arm.reach()) {
        return Err(Error::Config(format!("oracle offset {offset} m is outside the workspace")));
    }
    let mut rows = Vec::new();
    for &mode in modes {
        for &b in b_values {
            for strict in [false, true] {
                for sign in [1.0, -1.0] {
                    rows.push(diagnostic_trial(config, mode, b, strict, sign * offset)?);
                }
            }
        }
    }
    Ok(rows)
}

/// Mean displacement and error rate over the trials of one (mode, b, strict) cell.
pub fn cell_stats(rows: &[DiagnosticRow], mode: ResidualMode, b: u64, strict: bool) -> Option<(f64, f64)> {
    let cell: Vec<_> = rows
        .iter()
        .filter(|r| r.mode == mode.as_str() && r.buffer_steps == b && r.strict == strict as u8)
        .collect();
    if cell.is_empty() {
        return None;
    }
    let n = cell.len() as f64;
    let disp = cell.iter().map(|r| r.displacement).sum::<f64>() / n;
    let err = cell.iter().map(|r| r.error as f64).sum::<f64>() / n;
    Some((disp, err))
}
