//! Planar revolute arm: forward kinematics, Jacobian, damped pseudo-inverse,
//! damped least-squares IK and a torque-driven semi-implicit Euler plant.
//!
//! The arm moves in a plane with no gravity. Joint `i` rotates link `i`
//! relative to link `i - 1`; the tool center point (TCP) sits at the tip of
//! the last link, which carries the peg.

use std::f64::consts::{PI, TAU};

use nalgebra::{DVector, Matrix3, Matrix3xX, MatrixXx3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type JointVector = DVector<f64>;
pub type Jacobian = Matrix3xX<f64>;
pub type JacobianPinv = MatrixXx3<f64>;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Physical and numerical constants of the arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmParams {
    /// Link lengths in meters, base to tip.
    pub link_lengths: Vec<f64>,
    /// Diagonal joint inertia (kg m^2).
    pub joint_inertia: Vec<f64>,
    /// Viscous joint damping (N m s / rad).
    pub joint_damping: Vec<f64>,
    /// Per-joint position interval (rad).
    pub joint_limits: Vec<(f64, f64)>,
    /// Per-joint torque magnitude limit (N m).
    pub torque_limit: Vec<f64>,
    /// Damping factor of the pseudo-inverse.
    pub damping_lambda: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self::planar(vec![0.30, 0.30, 0.10])
    }
}

impl ArmParams {
    /// Arm with the given link lengths and the default per-joint constants.
    pub fn planar(link_lengths: Vec<f64>) -> Self {
        let n = link_lengths.len();
        Self {
            link_lengths,
            joint_inertia: vec![0.25; n],
            joint_damping: vec![0.2; n],
            joint_limits: vec![(-2.9, 2.9); n],
            torque_limit: vec![50.0; n],
            damping_lambda: 1e-4,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        if n < 2 {
            return Err(Error::Config(format!("arm needs at least 2 joints, got {n}")));
        }
        for (name, len) in [
            ("joint_inertia", self.joint_inertia.len()),
            ("joint_damping", self.joint_damping.len()),
            ("joint_limits", self.joint_limits.len()),
            ("torque_limit", self.torque_limit.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{name} has {len} entries, arm has {n} joints")));
            }
        }
        let positive = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.link_lengths) || !positive(&self.joint_inertia) || !positive(&self.joint_damping) {
            return Err(Error::Config("link lengths, inertias and damping must be strictly positive".into()));
        }
        if !positive(&self.torque_limit) {
            return Err(Error::Config("torque limits must be strictly positive".into()));
        }
        if self.joint_limits.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("joint limits must satisfy lower < upper".into()));
        }
        if !(self.damping_lambda >= 0.0) {
            return Err(Error::Config("damping_lambda must be >= 0".into()));
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, len: usize) -> Result<()> {
        if len == self.n_joints() {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.n_joints(),
                got: len,
            })
        }
    }

    pub fn clamp_torque(&self, tau: &mut JointVector) -> bool {
        let mut clamped = false;
        for (t, lim) in tau.iter_mut().zip(&self.torque_limit) {
            if t.abs() > *lim {
                *t = t.clamp(-lim, *lim);
                clamped = true;
            }
        }
        clamped
    }
}

/// Joint-space feedback of the arm: the controller's input.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: JointVector,
    pub v: JointVector,
    pub tau_ext: JointVector,
}

impl JointState {
    pub fn at_rest(q: JointVector) -> Self {
        let n = q.len();
        Self {
            q,
            v: JointVector::zeros(n),
            tau_ext: JointVector::zeros(n),
        }
    }
}

/// SE(2) pose of the TCP.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self {
            x,
            y,
            phi: wrap_angle(phi),
        }
    }

    /// `self - other` with the angle difference wrapped, as a task-space vector.
    pub fn error_to(&self, target: &PlanarPose) -> Vector3<f64> {
        Vector3::new(target.x - self.x, target.y - self.y, wrap_angle(target.phi - self.phi))
    }

    pub fn offset(&self, delta: &Vector3<f64>) -> PlanarPose {
        PlanarPose::new(self.x + delta.x, self.y + delta.y, self.phi + delta.z)
    }

    pub fn distance_to(&self, other: &PlanarPose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.phi.is_finite()
    }
}

/// Force and moment at the TCP, expressed in the base frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarWrench {
    pub fx: f64,
    pub fy: f64,
    pub tz: f64,
}

impl PlanarWrench {
    pub const ZERO: PlanarWrench = PlanarWrench {
        fx: 0.0,
        fy: 0.0,
        tz: 0.0,
    };

    pub fn new(fx: f64, fy: f64, tz: f64) -> Self {
        Self { fx, fy, tz }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.fx, self.fy, self.tz)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn is_finite(&self) -> bool {
        self.fx.is_finite() && self.fy.is_finite() && self.tz.is_finite()
    }
}

impl std::ops::Add for PlanarWrench {
    type Output = PlanarWrench;
    fn add(self, o: PlanarWrench) -> PlanarWrench {
        PlanarWrench::new(self.fx + o.fx, self.fy + o.fy, self.tz + o.tz)
    }
}

impl std::ops::Neg for PlanarWrench {
    type Output = PlanarWrench;
    fn neg(self) -> PlanarWrench {
        PlanarWrench::new(-self.fx, -self.fy, -self.tz)
    }
}

/// Joint origins and TCP pose for one configuration.
struct Chain {
    /// Origin of each joint; entry 0 is the base.
    origins: Vec<(f64, f64)>,
    tcp: (f64, f64),
    phi: f64,
}

fn chain(q: &[f64], params: &ArmParams) -> Chain {
    let mut origins = Vec::with_capacity(q.len());
    let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
    for (qi, len) in q.iter().zip(&params.link_lengths) {
        origins.push((x, y));
        theta += qi;
        x += len * theta.cos();
        y += len * theta.sin();
    }
    Chain {
        origins,
        tcp: (x, y),
        phi: theta,
    }
}

pub fn forward_kinematics(q: &JointVector, params: &ArmParams) -> Result<PlanarPose> {
    params.check_dim(q.len())?;
    let c = chain(q.as_slice(), params);
    Ok(PlanarPose::new(c.tcp.0, c.tcp.1, c.phi))
}

fn jacobian_of(c: &Chain) -> Jacobian {
    let n = c.origins.len();
    let mut j = Jacobian::zeros(n);
    for (i, (ox, oy)) in c.origins.iter().enumerate() {
        j[(0, i)] = -(c.tcp.1 - oy);
        j[(1, i)] = c.tcp.0 - ox;
        j[(2, i)] = 1.0;
    }
    j
}

/// Geometric Jacobian mapping joint velocities to `[x_dot, y_dot, phi_dot]`.
pub fn jacobian(q: &JointVector, params: &ArmParams) -> Result<Jacobian> {
    params.check_dim(q.len())?;
    Ok(jacobian_of(&chain(q.as_slice(), params)))
}

/// TCP pose and Jacobian from a single pass over the chain.
pub fn pose_and_jacobian(q: &JointVector, params: &ArmParams) -> Result<(PlanarPose, Jacobian)> {
    params.check_dim(q.len())?;
    let c = chain(q.as_slice(), params);
    Ok((PlanarPose::new(c.tcp.0, c.tcp.1, c.phi), jacobian_of(&c)))
}

/// `J^T (J J^T + lambda^2 I)^-1`.
pub fn damped_pinv(j: &Jacobian, lambda: f64) -> Result<JacobianPinv> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("pseudo-inverse damping must be >= 0, got {lambda}")));
    }
    let jjt: Matrix3<f64> = j * j.transpose() + Matrix3::identity() * (lambda * lambda);
    let inv = jjt.try_inverse().ok_or(Error::Singular)?;
    if !inv.iter().all(|x| x.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(j.transpose() * inv)
}

/// Damped least-squares IK seeded at `seed`.
///
/// Returns the seed untouched when it already satisfies `tol`.
pub fn inverse_kinematics(
    target: &PlanarPose,
    seed: &JointVector,
    params: &ArmParams,
    tol: f64,
    max_iters: usize,
) -> Result<JointVector> {
    params.check_dim(seed.len())?;
    let mut q = seed.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        let c = chain(q.as_slice(), params);
        let pose = PlanarPose::new(c.tcp.0, c.tcp.1, c.phi);
        let err = pose.error_to(target);
        residual = err.norm();
        if residual < tol {
            return Ok(q);
        }
        if !residual.is_finite() {
            break;
        }
        let pinv = damped_pinv(&jacobian_of(&c), params.damping_lambda)?;
        q += pinv * err;
    }
    Err(Error::IkFailure { residual })
}

/// Contact torque `J^T F` felt at the joints.
pub fn joint_torque_from_wrench(j: &Jacobian, w: &PlanarWrench) -> JointVector {
    j.transpose() * w.as_vector()
}

/// One semi-implicit Euler step of the decoupled joint dynamics.
///
/// `tau_cmd` is clamped to the torque limits; joints that hit a position
/// limit are clamped there with their velocity zeroed.
pub fn step_dynamics(
    state: &JointState,
    tau_cmd: &JointVector,
    contact: &PlanarWrench,
    dt: f64,
    params: &ArmParams,
) -> Result<JointState> {
    params.check_dim(state.q.len())?;
    params.check_dim(tau_cmd.len())?;
    if !(dt > 0.0) {
        return Err(Error::Plant(format!("time step must be positive, got {dt}")));
    }
    if !contact.is_finite()
        || !tau_cmd.iter().all(|t| t.is_finite())
        || !state.q.iter().chain(state.v.iter()).all(|t| t.is_finite())
    {
        return Err(Error::Plant("non-finite plant input".into()));
    }
    let j = jacobian(&state.q, params)?;
    let mut tau = tau_cmd.clone();
    params.clamp_torque(&mut tau);
    let tau_ext = joint_torque_from_wrench(&j, contact);

    let n = params.n_joints();
    let mut q = JointVector::zeros(n);
    let mut v = JointVector::zeros(n);
    for i in 0..n {
        let accel = (tau[i] + tau_ext[i] - params.joint_damping[i] * state.v[i]) / params.joint_inertia[i];
        let vi = state.v[i] + dt * accel;
        let qi = state.q[i] + dt * vi;
        let (lo, hi) = params.joint_limits[i];
        if qi < lo || qi > hi {
            q[i] = qi.clamp(lo, hi);
            v[i] = 0.0;
        } else {
            q[i] = qi;
            v[i] = vi;
        }
    }
    Ok(JointState { q, v, tau_ext })
}

/// Kinetic energy `1/2 v^T M v` of the decoupled plant.
pub fn kinetic_energy(state: &JointState, params: &ArmParams) -> f64 {
    state
        .v
        .iter()
        .zip(&params.joint_inertia)
        .map(|(v, m)| 0.5 * m * v * v)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(v: &[f64]) -> JointVector {
        JointVector::from_row_slice(v)
    }

    /// Independent FK: accumulate each link's absolute angle explicitly.
    fn fk_oracle(qs: &[f64], lengths: &[f64]) -> (f64, f64, f64) {
        let mut abs_angles = Vec::new();
        for i in 0..qs.len() {
            abs_angles.push(qs[..=i].iter().sum::<f64>());
        }
        let x = abs_angles.iter().zip(lengths).map(|(a, l)| l * a.cos()).sum();
        let y = abs_angles.iter().zip(lengths).map(|(a, l)| l * a.sin()).sum();
        (x, y, *abs_angles.last().unwrap())
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.1 + 4.0 * TAU), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn fk_straight_and_rotated() {
        let p = ArmParams::default();
        let pose = forward_kinematics(&q(&[0.0, 0.0, 0.0]), &p).unwrap();
        assert_abs_diff_eq!(pose.x, 0.70, epsilon = 1e-15);
        assert_abs_diff_eq!(pose.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pose.phi, 0.0, epsilon = 1e-15);

        let pose = forward_kinematics(&q(&[PI / 2.0, 0.0, 0.0]), &p).unwrap();
        assert_abs_diff_eq!(pose.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.y, 0.70, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.phi, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_matches_link_oracle() {
        let p = ArmParams::default();
        let qs = [0.3, -0.2, 0.5];
        let pose = forward_kinematics(&q(&qs), &p).unwrap();
        let (x, y, phi) = fk_oracle(&qs, &p.link_lengths);
        assert!((pose.x - x).abs() < 1e-12);
        assert!((pose.y - y).abs() < 1e-12);
        assert!((pose.phi - phi).abs() < 1e-12);
    }

    #[test]
    fn fk_rejects_wrong_dimension() {
        let p = ArmParams::default();
        assert!(matches!(
            forward_kinematics(&q(&[0.0, 0.0]), &p),
            Err(Error::Dimension { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn jacobian_structure() {
        let p = ArmParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let qs: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let j = jacobian(&q(&qs), &p).unwrap();
            assert!(j.row(2).iter().all(|&x| x == 1.0));
        }
        let j = jacobian(&q(&[0.0, 0.0, 0.0]), &p).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 0)], 0.7, epsilon = 1e-15);
        assert_eq!(j[(2, 0)], 1.0);
    }

    #[test]
    fn pinv_right_inverse_and_damping_limit() {
        let p = ArmParams::default();
        let j = jacobian(&q(&[0.4, -1.1, 0.3]), &p).unwrap();
        let pinv = damped_pinv(&j, 0.0).unwrap();
        let prod = &j * &pinv;
        assert!((prod - Matrix3::identity()).abs().max() < 1e-10);

        let big = damped_pinv(&j, 1e6).unwrap();
        assert!(big.abs().max() < 1e-9);
    }

    #[test]
    fn pinv_singular_without_damping() {
        // Straight arm: all lever arms collinear, J J^T rank 2.
        let p = ArmParams::default();
        let j = jacobian(&q(&[0.0, 0.0, 0.0]), &p).unwrap();
        assert!(matches!(damped_pinv(&j, 0.0), Err(Error::Singular)));
        assert!(damped_pinv(&j, 1e-4).is_ok());
    }

    #[test]
    fn pinv_matches_svd_at_straight_arm() {
        let p = ArmParams::default();
        let j = jacobian(&q(&[0.0, 0.0, 0.0]), &p).unwrap();
        let lambda = 1e-4;
        let pinv = damped_pinv(&j, lambda).unwrap();
        // J^dagger = V diag(s / (s^2 + lambda^2)) U^T
        let svd = j.clone().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut oracle = JacobianPinv::zeros(3);
        for k in 0..svd.singular_values.len() {
            let s = svd.singular_values[k];
            let w = s / (s * s + lambda * lambda);
            oracle += vt.row(k).transpose() * u.column(k).transpose() * w;
        }
        assert!((pinv - oracle).abs().max() < 1e-8);
    }

    #[test]
    fn ik_fixed_point_returns_seed() {
        let p = ArmParams::default();
        let seed = q(&[0.3, -1.2, -0.6]);
        let target = forward_kinematics(&seed, &p).unwrap();
        let sol = inverse_kinematics(&target, &seed, &p, 1e-9, 50).unwrap();
        assert_eq!(sol, seed);
    }

    #[test]
    fn ik_local_round_trip() {
        let p = ArmParams::default();
        let q0 = q(&[0.3, -1.2, -0.6]);
        let target = forward_kinematics(&q0, &p).unwrap();
        let seed = q0.add_scalar(0.01);
        let sol = inverse_kinematics(&target, &seed, &p, 1e-10, 100).unwrap();
        let got = forward_kinematics(&sol, &p).unwrap();
        assert!(got.error_to(&target).norm() < 1e-8);
    }

    #[test]
    fn ik_reports_unreachable_target() {
        let p = ArmParams::default();
        let seed = q(&[0.3, -1.2, -0.6]);
        let target = PlanarPose::new(2.0, 0.0, 0.0);
        match inverse_kinematics(&target, &seed, &p, 1e-6, 100) {
            Err(Error::IkFailure { residual }) => assert!(residual > 1.0),
            other => panic!("expected IK failure, got {other:?}"),
        }
    }

    #[test]
    fn dynamics_equilibrium() {
        let p = ArmParams::default();
        let s = JointState::at_rest(q(&[0.1, -0.5, 0.2]));
        let next = step_dynamics(&s, &JointVector::zeros(3), &PlanarWrench::ZERO, 1e-3, &p).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn dynamics_rejects_nan_and_bad_dt() {
        let p = ArmParams::default();
        let s = JointState::at_rest(q(&[0.1, -0.5, 0.2]));
        let tau = q(&[f64::NAN, 0.0, 0.0]);
        assert!(matches!(step_dynamics(&s, &tau, &PlanarWrench::ZERO, 1e-3, &p), Err(Error::Plant(_))));
        let tau = JointVector::zeros(3);
        assert!(matches!(step_dynamics(&s, &tau, &PlanarWrench::ZERO, 0.0, &p), Err(Error::Plant(_))));
    }

    #[test]
    fn dynamics_ballistic_single_joint() {
        // One driven joint, no damping: q(t) = 1/2 (tau / I) t^2.
        let mut p = ArmParams::planar(vec![0.3, 0.3]);
        p.joint_damping = vec![1e-300; 2];
        p.joint_limits = vec![(-100.0, 100.0); 2];
        let mut s = JointState::at_rest(q(&[0.0, 0.0]));
        let tau = q(&[0.5, 0.0]);
        let dt = 1e-3;
        let steps = 500;
        for _ in 0..steps {
            s = step_dynamics(&s, &tau, &PlanarWrench::ZERO, dt, &p).unwrap();
        }
        let t = steps as f64 * dt;
        let analytic = 0.5 * (0.5 / p.joint_inertia[0]) * t * t;
        // Semi-implicit Euler overshoots by exactly a*t*dt/2.
        assert!((s.q[0] - analytic).abs() <= (0.5 / p.joint_inertia[0]) * t * dt);
        assert_eq!(s.q[1], 0.0);
    }

    #[test]
    fn dynamics_clamps_at_joint_limit() {
        let p = ArmParams::default();
        let mut s = JointState::at_rest(q(&[2.8999, 0.0, 0.0]));
        s.v[0] = 10.0;
        let next = step_dynamics(&s, &JointVector::zeros(3), &PlanarWrench::ZERO, 1e-3, &p).unwrap();
        assert_eq!(next.q[0], 2.9);
        assert_eq!(next.v[0], 0.0);
    }

    #[test]
    fn dynamics_energy_audit() {
        // For each step the exact identity is
        //   dE = dt F.v' - dt^2/2 F^2 / I  with F = tau + J^T c - D v,
        // so dE <= dt (tau + J^T c) . v' - dt D v . v'.
        let p = ArmParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dt = 1e-3;
        let mut s = JointState::at_rest(q(&[0.4, -1.0, -0.9]));
        let (mut total_de, mut total_work) = (0.0, 0.0);
        for _ in 0..2000 {
            let tau = q(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)]);
            let c = PlanarWrench::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0);
            let next = step_dynamics(&s, &tau, &c, dt, &p).unwrap();
            let j = jacobian(&s.q, &p).unwrap();
            let injected = &tau + joint_torque_from_wrench(&j, &c);
            let work = dt * injected.dot(&next.v);
            let dissipation: f64 = (0..3).map(|i| dt * p.joint_damping[i] * s.v[i] * next.v[i]).sum();
            let de = kinetic_energy(&next, &p) - kinetic_energy(&s, &p);
            assert!(de <= work - dissipation + 1e-15);
            total_de += de;
            total_work += work;
            s = next;
        }
        assert!(total_de <= total_work);
    }
}
