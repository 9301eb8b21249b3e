//! The prior controller: a joint-space impedance law driven by a five-state
//! insertion machine with a recovery state.
//!
//! The impedance law runs every plant tick. The machine runs at the policy
//! rate: at each period boundary it evaluates its success and error
//! conditions and emits a new set-point, which is then held constant until
//! the next boundary.
//!
//! Set-points are described in the *nominal* hole frame (origin at the
//! believed mouth center, `+y` out of the surface). States that press on the
//! surface are force-controlled along the hole axis: their axial set-point
//! follows the feedback so only the feed-forward force acts along the axis.
//! `Insertion` is force-controlled in every direction: its whole set-point
//! is re-latched to the feedback pose at each boundary.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arm::{self, wrap_angle, ArmParams, JointState, JointVector, PlanarPose, PlanarWrench};
use crate::error::{Error, Result};
use crate::world::ContactFlags;

/// Plant tick length (s).
pub const TICK_DT: f64 = 1e-3;
/// Plant ticks per policy period (40 Hz policy against a 1 kHz controller).
pub const TICKS_PER_PERIOD: u64 = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpedanceGains {
    /// Joint stiffness (N m / rad).
    pub kp: Vec<f64>,
    /// Joint damping (N m s / rad).
    pub kd: Vec<f64>,
}

impl Default for ImpedanceGains {
    fn default() -> Self {
        Self::uniform(3, 100.0, 10.0)
    }
}

impl ImpedanceGains {
    pub fn uniform(n: usize, kp: f64, kd: f64) -> Self {
        Self {
            kp: vec![kp; n],
            kd: vec![kd; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kp.len() != n || self.kd.len() != n {
            return Err(Error::Config(format!("impedance gains must have {n} entries")));
        }
        if !self.kp.iter().chain(&self.kd).all(|g| g.is_finite() && *g > 0.0) {
            return Err(Error::Config("impedance gains must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal force overlay `amplitude * sin(2 pi f (t - t0)) * axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oscillation {
    pub amplitude: f64,
    pub frequency: f64,
    /// Unit direction in the base frame.
    pub axis: (f64, f64),
    pub origin_tick: u64,
}

impl Oscillation {
    pub fn wrench_at(&self, tick: u64) -> PlanarWrench {
        let t = tick.saturating_sub(self.origin_tick) as f64 * TICK_DT;
        let f = self.amplitude * (TAU * self.frequency * t).sin();
        PlanarWrench::new(f * self.axis.0, f * self.axis.1, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSetpoint {
    pub q_set: JointVector,
    pub ff_wrench: PlanarWrench,
    pub oscillation: Option<Oscillation>,
}

impl ControllerSetpoint {
    pub fn hold(q: JointVector) -> Self {
        Self {
            q_set: q,
            ff_wrench: PlanarWrench::ZERO,
            oscillation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    MoveToPreInsert,
    FindContact,
    SearchHole,
    HybridForceAlign,
    Insertion,
    Recovery,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::MoveToPreInsert => "move-to-pre-insert",
            Phase::FindContact => "find-contact",
            Phase::SearchHole => "search-hole",
            Phase::HybridForceAlign => "hybrid-force-align",
            Phase::Insertion => "insertion",
            Phase::Recovery => "recovery",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Time budgets per state (s). Exceeding one is an error condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateBudgets {
    pub move_to_pre_insert: f64,
    pub find_contact: f64,
    pub search_hole: f64,
    pub hybrid_force_align: f64,
    pub insertion: f64,
}

impl Default for StateBudgets {
    fn default() -> Self {
        Self {
            move_to_pre_insert: 1.5,
            find_contact: 1.0,
            search_hole: 2.0,
            hybrid_force_align: 0.5,
            insertion: 1.0,
        }
    }
}

impl StateBudgets {
    fn ticks(&self, phase: Phase) -> u64 {
        let s = match phase {
            Phase::MoveToPreInsert => self.move_to_pre_insert,
            Phase::FindContact => self.find_contact,
            Phase::SearchHole => self.search_hole,
            Phase::HybridForceAlign => self.hybrid_force_align,
            Phase::Insertion => self.insertion,
            Phase::Recovery => return u64::MAX,
        };
        seconds_to_ticks(s)
    }
}

fn seconds_to_ticks(s: f64) -> u64 {
    (s / TICK_DT).round() as u64
}

fn round_up_to_period(ticks: u64) -> u64 {
    ticks.div_ceil(TICKS_PER_PERIOD) * TICKS_PER_PERIOD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub gains: ImpedanceGains,
    pub budgets: StateBudgets,
    /// TCP pose the arm starts from and retracts to, in the base frame.
    pub home: PlanarPose,
    /// Pre-insert TCP target above the nominal mouth, hole frame (m).
    pub pre_insert_height: f64,
    pub pre_insert_lateral: f64,
    /// Peg tilt about the hole axis while approaching and searching (rad).
    pub pre_insert_tilt: f64,
    /// Duration of the pre-insert motion before any buffer steps (s).
    pub move_duration: f64,
    /// Descent speed while looking for the surface (m/s).
    pub descend_speed: f64,
    /// Constant force pressing along the hole axis (N).
    pub press_force: f64,
    /// Half-width of the triangular search sweep (m).
    pub sweep_amplitude: f64,
    pub sweep_period: f64,
    pub align_duration: f64,
    pub oscillation_amplitude: f64,
    pub oscillation_frequency: f64,
    pub strict_condition: bool,
    /// TCP deviation from a state's goal at exit that fails a strict exit (m).
    pub strict_threshold: f64,
    /// Controller-only ticks appended to the pre-insert motion.
    pub buffer_steps: u64,
    pub ik_tolerance: f64,
    pub ik_max_iters: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gains: ImpedanceGains::default(),
            budgets: StateBudgets::default(),
            home: PlanarPose::new(0.40, -0.09, -FRAC_PI_2),
            pre_insert_height: 0.03,
            pre_insert_lateral: 0.0,
            pre_insert_tilt: 0.2,
            move_duration: 1.0,
            descend_speed: 0.06,
            press_force: 5.0,
            sweep_amplitude: 0.008,
            sweep_period: 1.0,
            align_duration: 0.3,
            oscillation_amplitude: 2.0,
            oscillation_frequency: 8.0,
            strict_condition: false,
            strict_threshold: 0.005,
            buffer_steps: 0,
            ik_tolerance: 1e-9,
            ik_max_iters: 50,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, arm: &ArmParams) -> Result<()> {
        self.gains.validate(arm.n_joints())?;
        let positive = [
            ("move_duration", self.move_duration),
            ("descend_speed", self.descend_speed),
            ("sweep_period", self.sweep_period),
            ("align_duration", self.align_duration),
            ("strict_threshold", self.strict_threshold),
            ("ik_tolerance", self.ik_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("controller.{name} must be > 0")));
            }
        }
        for (name, v) in [
            ("press_force", self.press_force),
            ("sweep_amplitude", self.sweep_amplitude),
            ("oscillation_amplitude", self.oscillation_amplitude),
            ("oscillation_frequency", self.oscillation_frequency),
            ("pre_insert_height", self.pre_insert_height),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("controller.{name} must be >= 0")));
            }
        }
        if self.move_state_ticks() > self.budgets.ticks(Phase::MoveToPreInsert) {
            return Err(Error::Config(format!(
                "pre-insert motion plus {} buffer steps exceeds the state budget",
                self.buffer_steps
            )));
        }
        Ok(())
    }

    /// Length of `MoveToPreInsert` including buffer steps, whole periods.
    pub fn move_state_ticks(&self) -> u64 {
        round_up_to_period(seconds_to_ticks(self.move_duration) + self.buffer_steps)
    }
}

/// Phase of the insertion machine plus what it remembers across boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub phase: Phase,
    pub entry_tick: u64,
    pub strict_condition: bool,
    pub buffer_steps: u64,
    /// Set when `Recovery` was entered through an error condition.
    pub error: bool,
    /// TCP pose when the current state was entered.
    pub entry_pose: PlanarPose,
    /// Feedback TCP pose when the surface was first touched.
    pub contact_anchor: Option<PlanarPose>,
    /// Feedback TCP pose when the tip was judged to be in the hole.
    pub align_anchor: Option<PlanarPose>,
    /// Set-point emitted at the last boundary.
    pub last_q_set: Option<JointVector>,
}

impl MachineState {
    pub fn new(config: &ControllerConfig, entry_pose: PlanarPose) -> Self {
        Self {
            phase: Phase::MoveToPreInsert,
            entry_tick: 0,
            strict_condition: config.strict_condition,
            buffer_steps: config.buffer_steps,
            error: false,
            entry_pose,
            contact_anchor: None,
            align_anchor: None,
            last_q_set: None,
        }
    }

    fn enter(&mut self, phase: Phase, tick: u64, pose: PlanarPose) {
        self.phase = phase;
        self.entry_tick = tick;
        self.entry_pose = pose;
    }

    fn fail(&mut self, tick: u64, pose: PlanarPose) {
        self.error = true;
        self.enter(Phase::Recovery, tick, pose);
    }
}

/// Nominal hole frame: origin at the believed mouth center, `+y` out of the surface.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HoleFrame {
    origin: PlanarPose,
    c: f64,
    s: f64,
}

impl HoleFrame {
    pub(crate) fn new(origin: &PlanarPose) -> Self {
        Self {
            origin: *origin,
            c: origin.phi.cos(),
            s: origin.phi.sin(),
        }
    }

    pub(crate) fn to_world(self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin.x + self.c * x - self.s * y,
            self.origin.y + self.s * x + self.c * y,
        )
    }

    pub(crate) fn to_local(self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.origin.x, y - self.origin.y);
        (self.c * dx + self.s * dy, -self.s * dx + self.c * dy)
    }

    pub(crate) fn dir_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        (self.c * x - self.s * y, self.s * x + self.c * y)
    }

    /// TCP heading that points the peg straight down the hole axis.
    pub(crate) fn insertion_heading(&self) -> f64 {
        wrap_angle(self.origin.phi - FRAC_PI_2)
    }

    /// Pose from hole-frame position and tilt about the insertion heading.
    pub(crate) fn pose(&self, x: f64, y: f64, tilt: f64) -> PlanarPose {
        let (wx, wy) = self.to_world(x, y);
        PlanarPose::new(wx, wy, self.insertion_heading() + tilt)
    }

    pub(crate) fn axial_force(&self, magnitude: f64) -> PlanarWrench {
        let (fx, fy) = self.dir_to_world(0.0, -magnitude);
        PlanarWrench::new(fx, fy, 0.0)
    }
}

/// `tau = kp (q_set - q) - kd v + J^T (ff + oscillation)`, clamped to the torque limits.
pub fn impedance_torque(
    setpoint: &ControllerSetpoint,
    state: &JointState,
    gains: &ImpedanceGains,
    tick: u64,
    arm: &ArmParams,
) -> Result<JointVector> {
    let j = arm::jacobian(&state.q, arm)?;
    Ok(impedance_torque_with(setpoint, state, gains, tick, arm, &j))
}

pub(crate) fn impedance_torque_with(
    setpoint: &ControllerSetpoint,
    state: &JointState,
    gains: &ImpedanceGains,
    tick: u64,
    arm: &ArmParams,
    j: &arm::Jacobian,
) -> JointVector {
    let mut ff = setpoint.ff_wrench;
    if let Some(osc) = &setpoint.oscillation {
        ff = ff + osc.wrench_at(tick);
    }
    let mut tau = arm::joint_torque_from_wrench(j, &ff);
    for i in 0..tau.len() {
        tau[i] += gains.kp[i] * (setpoint.q_set[i] - state.q[i]) - gains.kd[i] * state.v[i];
    }
    arm.clamp_torque(&mut tau);
    tau
}

/// Whether the residual policy acts in this state.
pub fn rl_gate(machine: &MachineState) -> bool {
    matches!(machine.phase, Phase::SearchHole | Phase::Insertion)
}

/// True during the final `buffer_steps` ticks of the pre-insert motion.
pub fn buffer_phase(machine: &MachineState, tick: u64, config: &ControllerConfig) -> bool {
    if machine.phase != Phase::MoveToPreInsert || machine.buffer_steps == 0 {
        return false;
    }
    let end = machine.entry_tick + config.move_state_ticks();
    tick + machine.buffer_steps >= end
}

fn smoothstep(a: f64) -> f64 {
    let a = a.clamp(0.0, 1.0);
    a * a * (3.0 - 2.0 * a)
}

fn lerp_pose(a: &PlanarPose, b: &PlanarPose, t: f64) -> PlanarPose {
    PlanarPose::new(
        a.x + (b.x - a.x) * t,
        a.y + (b.y - a.y) * t,
        a.phi + wrap_angle(b.phi - a.phi) * t,
    )
}

/// Symmetric triangle wave in `[-1, 1]`, starting at 0 and rising.
fn triangle(t: f64, period: f64) -> f64 {
    let u = (t / period + 0.25).rem_euclid(1.0);
    if u < 0.5 {
        4.0 * u - 1.0
    } else {
        3.0 - 4.0 * u
    }
}

/// Goal pose of the pre-insert motion.
pub fn pre_insert_goal(config: &ControllerConfig, nominal_hole: &PlanarPose) -> PlanarPose {
    HoleFrame::new(nominal_hole).pose(config.pre_insert_lateral, config.pre_insert_height, config.pre_insert_tilt)
}

/// Evaluate success and error conditions at a period boundary and emit the
/// set-point for the following period.
///
/// `state` and `tcp` are the feedback the controller sees, which may carry a
/// residual feedback modification. `flags` come from the contact sensors.
#[allow(clippy::too_many_arguments)]
pub fn machine_step(
    machine: &MachineState,
    state: &JointState,
    flags: &ContactFlags,
    tcp: &PlanarPose,
    nominal_hole: &PlanarPose,
    tick: u64,
    config: &ControllerConfig,
    arm: &ArmParams,
) -> (ControllerSetpoint, MachineState) {
    let mut m = machine.clone();
    let frame = HoleFrame::new(nominal_hole);
    let (tcp_lat, tcp_ax) = frame.to_local(tcp.x, tcp.y);
    let elapsed = tick.saturating_sub(m.entry_tick);
    let over_budget = elapsed >= config.budgets.ticks(m.phase);

    match m.phase {
        Phase::MoveToPreInsert => {
            if elapsed >= config.move_state_ticks() {
                let goal = pre_insert_goal(config, nominal_hole);
                if m.strict_condition && tcp.distance_to(&goal) > config.strict_threshold {
                    m.fail(tick, *tcp);
                } else {
                    m.enter(Phase::FindContact, tick, goal);
                }
            } else if over_budget {
                m.fail(tick, *tcp);
            }
        }
        Phase::FindContact => {
            if flags.any() {
                m.contact_anchor = Some(*tcp);
                m.enter(Phase::SearchHole, tick, *tcp);
            } else if over_budget {
                m.fail(tick, *tcp);
            }
        }
        Phase::SearchHole => {
            // The leading corner caught in the mouth is the only cue; an axial
            // drop test on the (possibly modified) feedback fires on noise.
            if flags.left_wall || flags.right_wall {
                m.align_anchor = Some(*tcp);
                m.enter(Phase::HybridForceAlign, tick, *tcp);
            } else if over_budget {
                m.fail(tick, *tcp);
            }
        }
        Phase::HybridForceAlign => {
            if elapsed >= round_up_to_period(seconds_to_ticks(config.align_duration)) {
                let anchor = m.align_anchor.unwrap_or(m.entry_pose);
                let (anchor_lat, _) = frame.to_local(anchor.x, anchor.y);
                if m.strict_condition && (tcp_lat - anchor_lat).abs() > config.strict_threshold {
                    m.fail(tick, *tcp);
                } else {
                    m.enter(Phase::Insertion, tick, *tcp);
                }
            } else if over_budget {
                m.fail(tick, *tcp);
            }
        }
        Phase::Insertion => {
            if over_budget {
                m.fail(tick, *tcp);
            }
        }
        Phase::Recovery => {}
    }

    let elapsed = tick.saturating_sub(m.entry_tick);
    let t = elapsed as f64 * TICK_DT;
    let heading = frame.insertion_heading();
    let (pose, ff, oscillation) = match m.phase {
        Phase::MoveToPreInsert => {
            let goal = pre_insert_goal(config, nominal_hole);
            let a = smoothstep(t / config.move_duration);
            (lerp_pose(&m.entry_pose, &goal, a), PlanarWrench::ZERO, None)
        }
        Phase::FindContact => {
            let start = m.entry_pose;
            let (lat, ax) = frame.to_local(start.x, start.y);
            let pose = frame.pose(lat, ax - config.descend_speed * t, config.pre_insert_tilt);
            (pose, PlanarWrench::ZERO, None)
        }
        Phase::SearchHole => {
            let anchor = m.contact_anchor.unwrap_or(m.entry_pose);
            let (lat, _) = frame.to_local(anchor.x, anchor.y);
            let sweep = config.sweep_amplitude * triangle(t, config.sweep_period);
            let pose = frame.pose(lat + sweep, tcp_ax, config.pre_insert_tilt);
            (pose, frame.axial_force(config.press_force), None)
        }
        Phase::HybridForceAlign => {
            let anchor = m.align_anchor.unwrap_or(m.entry_pose);
            let (lat, _) = frame.to_local(anchor.x, anchor.y);
            let a = smoothstep(t / config.align_duration);
            let tilt = config.pre_insert_tilt * (1.0 - a);
            (frame.pose(lat, tcp_ax, tilt), frame.axial_force(config.press_force), None)
        }
        Phase::Insertion => {
            let osc = Oscillation {
                amplitude: config.oscillation_amplitude,
                frequency: config.oscillation_frequency,
                axis: frame.dir_to_world(1.0, 0.0),
                origin_tick: m.entry_tick,
            };
            let _ = heading;
            (*tcp, frame.axial_force(config.press_force), Some(osc))
        }
        Phase::Recovery => (config.home, PlanarWrench::ZERO, None),
    };

    let seed = match m.phase {
        Phase::Insertion => state.q.clone(),
        _ => m.last_q_set.clone().unwrap_or_else(|| state.q.clone()),
    };
    let q_set = arm::inverse_kinematics(&pose, &seed, arm, config.ik_tolerance, config.ik_max_iters)
        .unwrap_or_else(|_| m.last_q_set.clone().unwrap_or(seed));
    let q_set = clamp_to_limits(q_set, arm);
    m.last_q_set = Some(q_set.clone());
    (
        ControllerSetpoint {
            q_set,
            ff_wrench: ff,
            oscillation,
        },
        m,
    )
}

fn clamp_to_limits(mut q: JointVector, arm: &ArmParams) -> JointVector {
    for (qi, (lo, hi)) in q.iter_mut().zip(&arm.joint_limits) {
        *qi = qi.clamp(*lo, *hi);
    }
    q
}

/// Joint configuration of the home pose, solved from a fixed elbow-up seed.
pub fn home_configuration(config: &ControllerConfig, arm: &ArmParams) -> Result<JointVector> {
    let n = arm.n_joints();
    // Elbow-up seed: shoulder raised, elbow folded back, wrist pointing down.
    let mut seed = JointVector::zeros(n);
    seed[0] = 0.9;
    seed[1] = -1.6;
    for i in 2..n {
        seed[i] = (config.home.phi - 0.9 + 1.6) / (n - 2) as f64;
    }
    arm::inverse_kinematics(&config.home, &seed, arm, 1e-12, 200)
}
