//! Peg-in-hole environment: hole sampling, penalty contact, sparse reward and
//! episode stepping with the 1 kHz controller / 40 Hz policy split.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arm::{self, ArmParams, JointState, JointVector, PlanarPose, PlanarWrench};
use crate::controller::{
    self, buffer_phase, home_configuration, machine_step, rl_gate, ControllerConfig, ControllerSetpoint, HoleFrame,
    MachineState, Phase, TICKS_PER_PERIOD, TICK_DT,
};
use crate::curriculum::Difficulty;
use crate::error::{Error, Result};
use crate::residual::{compose_step, virtual_feedback, IkSettings, ResidualCommand, ResidualMode};
use crate::rng::Stream;

/// Observation dimension: relative position (2), heading (1), wrench (3).
pub const OBS_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoleGeometry {
    pub hole_width: f64,
    pub peg_width: f64,
    pub peg_length: f64,
    pub hole_depth: f64,
    /// Believed mouth center; `phi` rotates the surface line (0 = horizontal).
    pub nominal_hole_pose: PlanarPose,
}

impl Default for HoleGeometry {
    fn default() -> Self {
        Self {
            hole_width: 0.0258,
            peg_width: 0.025,
            peg_length: 0.070,
            hole_depth: 0.030,
            nominal_hole_pose: PlanarPose::new(0.42, -0.20, 0.0),
        }
    }
}

impl HoleGeometry {
    pub fn clearance(&self) -> f64 {
        self.hole_width - self.peg_width
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peg_width > 0.0 && self.hole_width > self.peg_width) {
            return Err(Error::Config("hole must be wider than the peg".into()));
        }
        if !(self.peg_length > 0.0 && self.hole_depth > 0.0) {
            return Err(Error::Config("peg length and hole depth must be > 0".into()));
        }
        if !self.nominal_hole_pose.is_finite() {
            return Err(Error::Config("nominal hole pose must be finite".into()));
        }
        Ok(())
    }

    /// Hole-bottom center for a hole whose mouth sits at `mouth`.
    pub fn goal(&self, mouth: &PlanarPose) -> PlanarPose {
        let (x, y) = HoleFrame::new(mouth).to_world(0.0, -self.hole_depth);
        PlanarPose::new(x, y, HoleFrame::new(mouth).insertion_heading())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactParams {
    /// Normal stiffness (N/m).
    pub stiffness: f64,
    /// Normal damping (N s/m).
    pub damping: f64,
    /// Coulomb coefficient.
    pub friction: f64,
    /// Slope of the regularized friction law below the Coulomb cap (N s/m).
    pub tangential_damping: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness: 1e4,
            damping: 50.0,
            friction: 0.3,
            tangential_damping: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoleSample {
    pub true_pose: PlanarPose,
    pub nominal_pose: PlanarPose,
}

impl HoleSample {
    pub fn nominal(geometry: &HoleGeometry) -> Self {
        Self {
            true_pose: geometry.nominal_hole_pose,
            nominal_pose: geometry.nominal_hole_pose,
        }
    }
}

/// Perturb the nominal hole. The orientation pivots about the mouth center.
pub fn sample_hole<R: Rng + ?Sized>(difficulty: &Difficulty, geometry: &HoleGeometry, rng: &mut R) -> HoleSample {
    let nominal = geometry.nominal_hole_pose;
    let mut draw = |std: f64| {
        if std > 0.0 {
            Normal::new(0.0, std).expect("finite std").sample(rng)
        } else {
            0.0
        }
    };
    let dx = draw(difficulty.pos_std);
    let dy = draw(difficulty.pos_std);
    let dphi = draw(difficulty.ori_std);
    HoleSample {
        true_pose: PlanarPose::new(nominal.x + dx, nominal.y + dy, nominal.phi + dphi),
        nominal_pose: nominal,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContactFlags {
    pub surface: bool,
    pub left_wall: bool,
    pub right_wall: bool,
    pub bottom: bool,
}

impl ContactFlags {
    pub fn any(&self) -> bool {
        self.surface || self.left_wall || self.right_wall || self.bottom
    }

    fn set(&mut self, kind: ContactKind) {
        match kind {
            ContactKind::Surface => self.surface = true,
            ContactKind::LeftWall => self.left_wall = true,
            ContactKind::RightWall => self.right_wall = true,
            ContactKind::Bottom => self.bottom = true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactKind {
    Surface,
    LeftWall,
    RightWall,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPoint {
    /// Base-frame location.
    pub point: (f64, f64),
    /// Force on the peg, base frame.
    pub force: (f64, f64),
    pub depth: f64,
    pub kind: ContactKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContactReport {
    /// Net contact wrench on the peg, base-frame force and moment about the TCP.
    pub wrench: PlanarWrench,
    pub flags: ContactFlags,
    pub points: [Option<ContactPoint>; 4],
}

type V2 = (f64, f64);

fn dot(a: V2, b: V2) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

/// Penetration of a hole-frame point into the solid around the hole:
/// `(depth, outward normal, kind)`.
fn solid_penetration(p: V2, half_width: f64, depth: f64) -> Option<(f64, V2, ContactKind)> {
    if p.1 >= 0.0 {
        return None;
    }
    if p.0.abs() < half_width {
        return (p.1 < -depth).then(|| (-depth - p.1, (0.0, 1.0), ContactKind::Bottom));
    }
    let surface = -p.1;
    let wall = p.0.abs() - half_width;
    if surface <= wall {
        Some((surface, (0.0, 1.0), ContactKind::Surface))
    } else if p.0 < 0.0 {
        Some((wall, (1.0, 0.0), ContactKind::LeftWall))
    } else {
        Some((wall, (-1.0, 0.0), ContactKind::RightWall))
    }
}

/// Penalty contact between the peg and the holed surface.
///
/// Checks the two tip corners against the solid and the two mouth edges
/// against the peg body. `tcp_vel` is `(xdot, ydot, phidot)` of the TCP.
pub fn contact_wrench(
    tcp: &PlanarPose,
    tcp_vel: &Vector3<f64>,
    geometry: &HoleGeometry,
    hole: &HoleSample,
    params: &ContactParams,
) -> ContactReport {
    let frame = HoleFrame::new(&hole.true_pose);
    let tip = frame.to_local(tcp.x, tcp.y);
    let rel_phi = tcp.phi - hole.true_pose.phi;
    let d = (rel_phi.cos(), rel_phi.sin());
    let n = (-d.1, d.0);
    let (hc, hs) = (hole.true_pose.phi.cos(), hole.true_pose.phi.sin());
    let v_tip = (hc * tcp_vel[0] + hs * tcp_vel[1], -hs * tcp_vel[0] + hc * tcp_vel[1]);
    let omega = tcp_vel[2];
    let velocity_at = |p: V2| {
        let r = (p.0 - tip.0, p.1 - tip.1);
        (v_tip.0 - omega * r.1, v_tip.1 + omega * r.0)
    };

    let half_w = 0.5 * geometry.peg_width;
    let half_h = 0.5 * geometry.hole_width;
    let mut candidates: [Option<(V2, f64, V2, ContactKind)>; 4] = [None; 4];

    for (slot, sign) in [(0, 1.0), (1, -1.0)] {
        let p = (tip.0 + sign * half_w * n.0, tip.1 + sign * half_w * n.1);
        if let Some((depth, normal, kind)) = solid_penetration(p, half_h, geometry.hole_depth) {
            candidates[slot] = Some((p, depth, normal, kind));
        }
    }
    for (slot, ex) in [(2, -half_h), (3, half_h)] {
        let e = (ex, 0.0);
        let rel = (e.0 - tip.0, e.1 - tip.1);
        let s = -dot(rel, d);
        let u = dot(rel, n);
        if s <= 0.0 || s >= geometry.peg_length || u.abs() >= half_w {
            continue;
        }
        let side = half_w - u.abs();
        let (depth, normal, kind) = if side <= s {
            let wall = if ex < 0.0 { ContactKind::LeftWall } else { ContactKind::RightWall };
            (side, (-u.signum() * n.0, -u.signum() * n.1), wall)
        } else {
            (s, (-d.0, -d.1), ContactKind::Surface)
        };
        candidates[slot] = Some((e, depth, normal, kind));
    }

    let mut report = ContactReport::default();
    let (mut fx, mut fy, mut tz) = (0.0, 0.0, 0.0);
    for (slot, c) in candidates.iter().enumerate() {
        let Some((p, depth, normal, kind)) = *c else { continue };
        let v = velocity_at(p);
        let depth_rate = -dot(v, normal);
        let f_n = (params.stiffness * depth + params.damping * depth_rate).max(0.0);
        let t = (-normal.1, normal.0);
        let cap = params.friction * f_n;
        let f_t = -(params.tangential_damping * dot(v, t)).clamp(-cap, cap);
        let local = (f_n * normal.0 + f_t * t.0, f_n * normal.1 + f_t * t.1);
        let r = (p.0 - tip.0, p.1 - tip.1);
        tz += r.0 * local.1 - r.1 * local.0;
        let force = frame.dir_to_world(local.0, local.1);
        fx += force.0;
        fy += force.1;
        report.flags.set(kind);
        report.points[slot] = Some(ContactPoint {
            point: frame.to_world(p.0, p.1),
            force,
            depth,
            kind,
        });
    }
    report.wrench = PlanarWrench::new(fx, fy, tz);
    report
}

/// `1` iff the TCP is strictly within `epsilon` of the goal position.
pub fn reward(tcp: &PlanarPose, goal: &PlanarPose, epsilon: f64) -> f64 {
    if ((tcp.x - goal.x).powi(2) + (tcp.y - goal.y).powi(2)).sqrt() < epsilon {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Observation {
    /// TCP position relative to the first contact (m), zero before contact.
    pub rel_pos: (f64, f64),
    /// TCP heading relative to the nominal insertion heading (rad).
    pub rel_phi: f64,
    pub wrench: PlanarWrench,
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        [
            self.rel_pos.0,
            self.rel_pos.1,
            self.rel_phi,
            self.wrench.fx,
            self.wrench.fy,
            self.wrench.tz,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub phase: Phase,
    pub flags: ContactFlags,
    pub tcp: PlanarPose,
    pub tick: u64,
    pub success: bool,
    pub error: bool,
    /// Whether the policy's command acted during this period.
    pub gated: bool,
    pub residual_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub geometry: HoleGeometry,
    pub contact: ContactParams,
    pub success_epsilon: f64,
    pub episode_cap: u64,
    /// Per-component observation noise std; zero disables it.
    pub observation_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            geometry: HoleGeometry::default(),
            contact: ContactParams::default(),
            success_epsilon: 0.005,
            episode_cap: 6000,
            observation_noise: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let c = &self.contact;
        if ![c.stiffness, c.damping, c.friction, c.tangential_damping].iter().all(|x| x.is_finite() && *x >= 0.0) {
            return Err(Error::Config("contact constants must be finite and >= 0".into()));
        }
        if !(self.success_epsilon > 0.0) {
            return Err(Error::Config("success_epsilon must be > 0".into()));
        }
        if self.episode_cap == 0 {
            return Err(Error::Config("episode_cap must be > 0".into()));
        }
        if !(self.observation_noise >= 0.0) {
            return Err(Error::Config("observation_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-tick trace record, kept only when tracing is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub phase: Phase,
    pub torque: JointVector,
    pub tcp: PlanarPose,
    pub contact_force: (f64, f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EpisodeCounters {
    pub ik_fallbacks: u64,
    pub clamp_events: u64,
    pub gated_steps: u64,
}

/// One environment instance. Owns its plant, controller state and hole.
#[derive(Debug, Clone)]
pub struct Env {
    arm: ArmParams,
    controller: ControllerConfig,
    world: WorldConfig,
    ik: IkSettings,
    mode: ResidualMode,
    scratch: bool,
    policy_phases: Option<Vec<Phase>>,
    home_q: JointVector,
    state: JointState,
    machine: MachineState,
    setpoint: ControllerSetpoint,
    hole: HoleSample,
    goal: PlanarPose,
    tick: u64,
    done: bool,
    anchor: Option<(f64, f64)>,
    latched: Option<ResidualCommand>,
    flags: ContactFlags,
    wrench: PlanarWrench,
    counters: EpisodeCounters,
    trace: Option<Vec<TickRecord>>,
}

impl Env {
    pub fn new(arm: ArmParams, controller: ControllerConfig, world: WorldConfig, mode: ResidualMode) -> Result<Self> {
        arm.validate()?;
        controller.validate(&arm)?;
        world.validate()?;
        let home_q = home_configuration(&controller, &arm)?;
        let state = JointState::at_rest(home_q.clone());
        let pose = arm::forward_kinematics(&home_q, &arm)?;
        let machine = MachineState::new(&controller, pose);
        let hole = HoleSample::nominal(&world.geometry);
        let goal = world.geometry.goal(&hole.true_pose);
        Ok(Self {
            ik: IkSettings {
                tolerance: controller.ik_tolerance,
                max_iters: controller.ik_max_iters,
            },
            setpoint: ControllerSetpoint::hold(home_q.clone()),
            arm,
            controller,
            world,
            mode,
            scratch: false,
            policy_phases: None,
            home_q,
            state,
            machine,
            hole,
            goal,
            tick: 0,
            done: true,
            anchor: None,
            latched: None,
            flags: ContactFlags::default(),
            wrench: PlanarWrench::ZERO,
            counters: EpisodeCounters::default(),
            trace: None,
        })
    }

    /// Replace the controller in gated states by the raw policy torque.
    pub fn set_scratch(&mut self, scratch: bool) {
        self.scratch = scratch;
    }

    /// Let the policy act in `phases` instead of the default gated states.
    pub fn set_policy_phases(&mut self, phases: Option<&[Phase]>) {
        self.policy_phases = phases.map(<[Phase]>::to_vec);
    }

    fn gated(&self) -> bool {
        match &self.policy_phases {
            Some(p) => p.contains(&self.machine.phase),
            None => rl_gate(&self.machine),
        }
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.trace = on.then(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TickRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn mode(&self) -> ResidualMode {
        self.mode
    }

    pub fn arm(&self) -> &ArmParams {
        &self.arm
    }

    pub fn controller(&self) -> &ControllerConfig {
        &self.controller
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world
    }

    pub fn hole(&self) -> &HoleSample {
        &self.hole
    }

    pub fn machine(&self) -> &MachineState {
        &self.machine
    }

    pub fn joint_state(&self) -> &JointState {
        &self.state
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn counters(&self) -> EpisodeCounters {
        self.counters
    }

    pub fn tcp(&self) -> PlanarPose {
        arm::forward_kinematics(&self.state.q, &self.arm).expect("state has arm dimension")
    }

    /// Whether a command passed to the next `step` will act.
    pub fn rl_active(&self) -> bool {
        !self.done && self.gated()
    }

    /// Start an episode against a hole drawn at `difficulty`.
    pub fn reset<R: Rng + ?Sized>(&mut self, difficulty: &Difficulty, rng: &mut R) -> Observation {
        let hole = sample_hole(difficulty, &self.world.geometry, rng);
        self.reset_to(hole)
    }

    /// Start an episode against a given hole.
    pub fn reset_to(&mut self, hole: HoleSample) -> Observation {
        self.hole = hole;
        self.goal = self.world.geometry.goal(&hole.true_pose);
        self.state = JointState::at_rest(self.home_q.clone());
        let pose = self.tcp();
        self.machine = MachineState::new(&self.controller, pose);
        self.tick = 0;
        self.done = false;
        self.anchor = None;
        self.latched = None;
        self.flags = ContactFlags::default();
        self.wrench = PlanarWrench::ZERO;
        self.counters = EpisodeCounters::default();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        let (setpoint, machine) = machine_step(
            &self.machine,
            &self.state,
            &self.flags,
            &pose,
            &self.hole.nominal_pose,
            0,
            &self.controller,
            &self.arm,
        );
        self.setpoint = setpoint;
        self.machine = machine;
        self.observe(None)
    }

    fn observe(&self, noise: Option<&mut dyn FnMut() -> f64>) -> Observation {
        let tcp = self.tcp();
        let rel_pos = self.anchor.map_or((0.0, 0.0), |a| (tcp.x - a.0, tcp.y - a.1));
        let heading = HoleFrame::new(&self.hole.nominal_pose).insertion_heading();
        let mut obs = Observation {
            rel_pos,
            rel_phi: arm::wrap_angle(tcp.phi - heading),
            wrench: self.wrench,
        };
        if let Some(noise) = noise {
            obs.rel_pos.0 += noise();
            obs.rel_pos.1 += noise();
            obs.rel_phi += noise();
            obs.wrench.fx += noise();
            obs.wrench.fy += noise();
            obs.wrench.tz += noise();
        }
        obs
    }

    /// Advance one policy period (25 plant ticks).
    ///
    /// `noise_rng` is used only when observation noise is configured.
    pub fn step(&mut self, cmd: Option<ResidualCommand>, noise_rng: Option<&mut Stream>) -> Result<Transition> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        if let Some(c) = &cmd {
            if self.mode != ResidualMode::None && c.mode() != self.mode {
                return Err(Error::Mode { mode: self.mode.as_str() });
            }
        }
        let gated = self.gated();
        if gated && self.mode != ResidualMode::None {
            if let Some(c) = cmd {
                self.latched = Some(c);
            }
        }
        let residual_magnitude = if gated { self.latched.as_ref().map_or(0.0, |c| c.magnitude()) } else { 0.0 };
        if gated {
            self.counters.gated_steps += 1;
        }

        for _ in 0..TICKS_PER_PERIOD {
            self.plant_tick(gated)?;
        }

        let tcp = self.tcp();
        let r = reward(&tcp, &self.goal, self.world.success_epsilon);
        let mut success = false;
        let mut error = false;
        if r > 0.0 {
            success = true;
            self.done = true;
        } else {
            let (fb, _) = virtual_feedback(&self.state, self.latched.as_ref(), &self.arm, &self.ik)?;
            let fb_tcp = arm::forward_kinematics(&fb.q, &self.arm)?;
            let (setpoint, machine) = machine_step(
                &self.machine,
                &fb,
                &self.flags,
                &fb_tcp,
                &self.hole.nominal_pose,
                self.tick,
                &self.controller,
                &self.arm,
            );
            self.setpoint = setpoint;
            self.machine = machine;
            if self.machine.phase == Phase::Recovery {
                error = true;
                self.done = true;
            }
        }
        if self.tick >= self.world.episode_cap {
            self.done = true;
        }

        let std = self.world.observation_noise;
        let observation = match noise_rng {
            Some(rng) if std > 0.0 => {
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut draw = || normal.sample(rng);
                self.observe(Some(&mut draw))
            }
            _ => self.observe(None),
        };
        Ok(Transition {
            observation,
            reward: r,
            done: self.done,
            info: StepInfo {
                phase: self.machine.phase,
                flags: self.flags,
                tcp,
                tick: self.tick,
                success,
                error,
                gated,
                residual_magnitude,
            },
        })
    }

    fn plant_tick(&mut self, gated: bool) -> Result<()> {
        let tick = self.tick;
        let buffered = buffer_phase(&self.machine, tick, &self.controller);
        let setpoint = &self.setpoint;
        let gains = &self.controller.gains;
        let arm = &self.arm;
        let mut f = |fb: &JointState| {
            let j = arm::jacobian(&fb.q, arm).expect("state has arm dimension");
            controller::impedance_torque_with(setpoint, fb, gains, tick, arm, &j)
        };

        let composed = if self.scratch && gated && !buffered {
            match &self.latched {
                Some(ResidualCommand::JointEffort(t)) => {
                    let mut torque = t.clone();
                    let clamped = arm.clamp_torque(&mut torque);
                    crate::residual::Composed {
                        torque,
                        feedback: self.state.clone(),
                        clamped,
                        ik_fallback: false,
                    }
                }
                _ => compose_step(ResidualMode::None, &self.state, &mut f, None, gated, buffered, arm, &self.ik)?,
            }
        } else {
            compose_step(self.mode, &self.state, &mut f, self.latched.as_ref(), gated, buffered, arm, &self.ik)?
        };
        self.counters.clamp_events += composed.clamped as u64;
        self.counters.ik_fallbacks += composed.ik_fallback as u64;

        let (pose, j) = arm::pose_and_jacobian(&self.state.q, arm)?;
        let vel = &j * &self.state.v;
        let report = contact_wrench(&pose, &vel, &self.world.geometry, &self.hole, &self.world.contact);
        self.state = arm::step_dynamics(&self.state, &composed.torque, &report.wrench, TICK_DT, arm)?;
        self.flags = report.flags;
        self.wrench = report.wrench;
        if self.anchor.is_none() && report.flags.any() {
            self.anchor = Some((pose.x, pose.y));
        }
        if let Some(trace) = self.trace.as_mut() {
            let (fx, fy) = report.points.iter().flatten().fold((0.0, 0.0), |a, p| (a.0 + p.force.0, a.1 + p.force.1));
            trace.push(TickRecord {
                tick,
                phase: self.machine.phase,
                torque: composed.torque,
                tcp: pose,
                contact_force: (fx, fy),
            });
        }
        self.tick += 1;
        Ok(())
    }

    /// Hole-bottom goal of the current episode.
    pub fn goal(&self) -> PlanarPose {
        self.goal
    }
}
