use nalgebra::Vector3;
use proptest::prelude::*;
use residual_insert::arm::{
    damped_pinv, forward_kinematics, inverse_kinematics, jacobian, joint_torque_from_wrench, step_dynamics, ArmParams,
    JointState, JointVector, PlanarPose, PlanarWrench,
};
use residual_insert::rng::{stream, Purpose};
use rand::Rng;

fn fd_jacobian(q: &JointVector, arm: &ArmParams, h: f64) -> Vec<[f64; 3]> {
    (0..q.len())
        .map(|i| {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let p = forward_kinematics(&qp, arm).unwrap();
            let m = forward_kinematics(&qm, arm).unwrap();
            [(p.x - m.x) / (2.0 * h), (p.y - m.y) / (2.0 * h), (p.phi - m.phi) / (2.0 * h)]
        })
        .collect()
}

fn rel_err_jacobian(q: &JointVector, arm: &ArmParams) -> f64 {
    let j = jacobian(q, arm).unwrap();
    let fd = fd_jacobian(q, arm, 1e-6);
    let mut num = 0.0f64;
    for (i, col) in fd.iter().enumerate() {
        for r in 0..3 {
            num = num.max((j[(r, i)] - col[r]).abs());
        }
    }
    num / j.abs().max().max(1e-12)
}

#[test]
fn jacobian_matches_finite_differences_on_100_configurations() {
    let arm = ArmParams::default();
    let mut rng = stream(11, 0, Purpose::Diagnostic);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = JointVector::from_fn(3, |_, _| rng.random_range(-2.9..2.9));
        worst = worst.max(rel_err_jacobian(&q, &arm));
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn redundant_arm_jacobian_matches_finite_differences() {
    let arm = ArmParams::planar(vec![0.25, 0.2, 0.15, 0.1]);
    let mut rng = stream(12, 0, Purpose::Diagnostic);
    for _ in 0..100 {
        let q = JointVector::from_fn(4, |_, _| rng.random_range(-2.9..2.9));
        assert!(rel_err_jacobian(&q, &arm) < 1e-6);
    }
}

fn well_conditioned(q: &JointVector, arm: &ArmParams) -> bool {
    let j = jacobian(q, arm).unwrap();
    let s = (&j * j.transpose()).symmetric_eigenvalues();
    s.min() > 1e-3
}

/// Targets within 2 cm and 0.05 rad of FK(seed) are recovered to 1e-8.
#[test]
fn ik_round_trip_for_two_centimetre_perturbations() {
    let arm = ArmParams::default();
    let mut rng = stream(13, 0, Purpose::Diagnostic);
    let mut checked = 0;
    while checked < 100 {
        let seed = JointVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        if !well_conditioned(&seed, &arm) {
            continue;
        }
        let p = forward_kinematics(&seed, &arm).unwrap();
        let r = rng.random_range(0.0..0.02);
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let target = PlanarPose::new(p.x + r * a.cos(), p.y + r * a.sin(), p.phi + rng.random_range(-0.05..0.05));
        let q = inverse_kinematics(&target, &seed, &arm, 1e-10, 100).unwrap();
        let back = forward_kinematics(&q, &arm).unwrap();
        assert!(back.error_to(&target).norm() < 1e-8);
        checked += 1;
    }
}

#[test]
fn wrench_duality_at_non_singular_configurations() {
    let arm = ArmParams::default();
    let mut rng = stream(14, 0, Purpose::Diagnostic);
    let mut checked = 0;
    while checked < 100 {
        let q = JointVector::from_fn(3, |_, _| rng.random_range(-2.9..2.9));
        if !well_conditioned(&q, &arm) {
            continue;
        }
        let j = jacobian(&q, &arm).unwrap();
        let f = PlanarWrench::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-1.0..1.0));
        let tau = joint_torque_from_wrench(&j, &f);
        let back: Vector3<f64> = damped_pinv(&j, 1e-6).unwrap().transpose() * tau;
        let rel = (back - f.as_vector()).norm() / f.as_vector().norm();
        assert!(rel < 1e-4, "relative error {rel:e} at {q:?}");
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fk_jacobian_consistency(q0 in -2.9f64..2.9, q1 in -2.9f64..2.9, q2 in -2.9f64..2.9) {
        let arm = ArmParams::default();
        let q = JointVector::from_column_slice(&[q0, q1, q2]);
        prop_assert!(rel_err_jacobian(&q, &arm) < 1e-6);
    }

    #[test]
    fn dynamics_is_deterministic(
        q in prop::array::uniform3(-2.5f64..2.5),
        v in prop::array::uniform3(-1.0f64..1.0),
        tau in prop::array::uniform3(-60.0f64..60.0),
        f in prop::array::uniform3(-20.0f64..20.0),
    ) {
        let arm = ArmParams::default();
        let s = JointState { q: JointVector::from_column_slice(&q), v: JointVector::from_column_slice(&v), tau_ext: JointVector::zeros(3) };
        let t = JointVector::from_column_slice(&tau);
        let w = PlanarWrench::new(f[0], f[1], f[2]);
        let a = step_dynamics(&s, &t, &w, 1e-3, &arm).unwrap();
        let b = step_dynamics(&s, &t, &w, 1e-3, &arm).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dynamics_keeps_joints_within_limits(
        q in prop::array::uniform3(-2.9f64..2.9),
        v in prop::array::uniform3(-50.0f64..50.0),
    ) {
        let arm = ArmParams::default();
        let s = JointState { q: JointVector::from_column_slice(&q), v: JointVector::from_column_slice(&v), tau_ext: JointVector::zeros(3) };
        let out = step_dynamics(&s, &JointVector::from_element(3, 50.0), &PlanarWrench::ZERO, 1e-3, &arm).unwrap();
        for (qi, (lo, hi)) in out.q.iter().zip(&arm.joint_limits) {
            prop_assert!(*qi >= *lo && *qi <= *hi);
        }
    }
}
