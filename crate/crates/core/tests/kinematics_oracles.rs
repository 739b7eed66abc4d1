//! Kinematics checked against routes that do not share code with the library:
//! plain 4x4 homogeneous products built from the limb dimensions, and central
//! finite differences of FK.

use std::f64::consts::PI;

use limbkit::kinematics::{
    compose_chains, gripper_flip, IkOptions, KinematicChain, KinematicsError, LimbGeometry,
    TaskMask,
};
use nalgebra::{Isometry3, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::*;

#[test]
fn fk_matches_homogeneous_product() {
    let g = LimbGeometry::default();
    let chain = KinematicChain::limb(&g, "a");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let q = random_angles(&mut rng, &chain);
        let got = chain.tool_isometry(&q).unwrap();
        let expected = oracle_limb(&g, &q);
        let pos_err = (0..3)
            .map(|i| (got.translation.vector[i] - expected[i][3]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(pos_err <= 1e-10, "position error {pos_err:e} at {q:?}");
        assert!(max_diff(&to_m4(&got), &expected) <= 1e-10);
    }
}

/// Rotation vector of R_plus * R_minus^T via the matrix log.
fn rotation_delta(plus: &Matrix3<f64>, minus: &Matrix3<f64>) -> Vector3<f64> {
    let r = plus * minus.transpose();
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < 1e-12 {
        v / 2.0
    } else {
        v * (angle / (2.0 * angle.sin()))
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let g = LimbGeometry::default();
    let limb = KinematicChain::limb(&g, "a");
    let eight = compose_chains(&limb, &KinematicChain::limb(&g, "b"), &Isometry3::identity());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    for chain in [&limb, &eight] {
        for _ in 0..300 {
            // Stay a step inside the limits so the stencil is admissible.
            let q: Vec<f64> = chain
                .joints
                .iter()
                .map(|j| rng.random_range(j.position_limits.0 + 1e-3..=j.position_limits.1 - 1e-3))
                .collect();
            let jac = chain.jacobian(&q).unwrap();
            for col in 0..chain.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[col] += h;
                qm[col] -= h;
                let tp = chain.tool_isometry(&qp).unwrap();
                let tm = chain.tool_isometry(&qm).unwrap();
                let dp = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
                let dr = rotation_delta(
                    tp.rotation.to_rotation_matrix().matrix(),
                    tm.rotation.to_rotation_matrix().matrix(),
                ) / (2.0 * h);
                for r in 0..3 {
                    assert!((jac[(r, col)] - dp[r]).abs() <= 1e-6, "lin {r},{col}");
                    assert!((jac[(r + 3, col)] - dr[r]).abs() <= 1e-6, "ang {r},{col}");
                }
            }
        }
    }
}

#[test]
fn fk_ik_round_trip_on_random_reachable_targets() {
    let chain = KinematicChain::limb(&LimbGeometry::default(), "a");
    let options = IkOptions::for_dof(4);
    let mask = TaskMask::position_and_roll();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut solved = 0;
    while solved < 1000 {
        let goal = random_angles(&mut rng, &chain);
        if chain.is_near_singular(&goal, &mask, 0.02).unwrap().0 {
            continue;
        }
        let seed: Vec<f64> = goal
            .iter()
            .zip(&chain.joints)
            .map(|(q, j)| {
                (q + rng.random_range(-0.2..=0.2)).clamp(j.position_limits.0, j.position_limits.1)
            })
            .collect();
        let target = chain.forward_kinematics(&goal).unwrap();
        let sol = chain
            .solve_ik(&target, &seed, &options)
            .unwrap_or_else(|e| panic!("goal {goal:?} seed {seed:?}: {e}"));
        let reached = chain.forward_kinematics(&sol.angles).unwrap();
        assert!((reached.position - target.position).norm() <= options.tol_linear * 10.0);
        let roll = (target.orientation * reached.orientation.inverse())
            .scaled_axis()
            .dot(&(reached.orientation * Vector3::z()));
        assert!(roll.abs() <= options.tol_angular * 10.0);
        solved += 1;
    }
}

#[test]
fn eight_dof_ik_reaches_full_pose() {
    let g = LimbGeometry::default();
    let eight = compose_chains(
        &KinematicChain::limb(&g, "a"),
        &KinematicChain::limb(&g, "b"),
        &Isometry3::identity(),
    );
    let options = IkOptions::for_dof(8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let goal = random_angles(&mut rng, &eight);
        let seed: Vec<f64> = goal
            .iter()
            .zip(&eight.joints)
            .map(|(q, j)| (q + rng.random_range(-0.1..=0.1)).clamp(j.position_limits.0, j.position_limits.1))
            .collect();
        let target = eight.forward_kinematics(&goal).unwrap();
        let sol = eight.solve_ik(&target, &seed, &options).unwrap();
        let reached = eight.forward_kinematics(&sol.angles).unwrap();
        assert!((reached.position - target.position).norm() < 1e-8);
        assert!(reached.orientation.angle_to(&target.orientation) < 1e-8);
    }
}

#[test]
fn composite_fk_matches_product_of_sub_chains() {
    let g = LimbGeometry::default();
    let a = KinematicChain::limb(&g, "a");
    let b = KinematicChain::limb(&g, "b");
    let coupling = Isometry3::translation(0.0, 0.0, 0.01);
    let eight = compose_chains(&a, &b, &coupling);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let qa = random_angles(&mut rng, &a);
        let qb = random_angles(&mut rng, &b);
        let mut q = qa.clone();
        q.extend(qb.iter().rev());
        let got = to_m4(&eight.tool_isometry(&q).unwrap());
        let expected = [
            oracle_limb(&g, &qa),
            to_m4(&coupling),
            flip_x(),
            rigid_inverse(&oracle_limb(&g, &qb)),
            flip_x(),
        ]
        .iter()
        .fold(identity(), |acc, m| mul(&acc, m));
        assert!(max_diff(&got, &expected) <= 1e-10);
    }
    // Joint ids: a forward, then b from its wrist back to its base.
    assert_eq!(
        eight.joint_ids(),
        ["a/j1", "a/j2", "a/j3", "a/j4", "b/j4", "b/j3", "b/j2", "b/j1"]
    );
}

#[test]
fn concatenation_is_associative() {
    let g = LimbGeometry::default();
    let a = KinematicChain::limb(&g, "a");
    let b = KinematicChain::limb(&g, "b").reversed();
    let c = KinematicChain::limb(&g, "c");
    let k1 = gripper_flip() * Isometry3::translation(0.0, 0.01, 0.0);
    let k2 = Isometry3::rotation(Vector3::new(0.0, 0.0, 0.3));
    let left = a.append(&b, &k1).append(&c, &k2);
    let right = a.append(&b.append(&c, &k2), &k1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let q = random_angles(&mut rng, &left);
        let l = left.tool_isometry(&q).unwrap();
        let r = right.tool_isometry(&q).unwrap();
        assert!(max_diff(&to_m4(&l), &to_m4(&r)) <= 1e-10);
    }
}

#[test]
fn wrist_roll_never_moves_the_tool_point() {
    let chain = KinematicChain::limb(&LimbGeometry::default(), "a");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let mut q = random_angles(&mut rng, &chain);
        let p0 = chain.forward_kinematics(&q).unwrap().position;
        q[3] = rng.random_range(-PI..=PI);
        let p1 = chain.forward_kinematics(&q).unwrap().position;
        assert!((p0 - p1).norm() <= 1e-12);
    }
}

#[test]
fn bent_pose_singular_value_from_svd() {
    let chain = KinematicChain::limb(&LimbGeometry::default(), "a");
    let bent = [0.0, -PI / 4.0, PI / 2.0, 0.0];
    let (flag, sigma) = chain
        .is_near_singular(&bent, &TaskMask::position_and_roll(), 1e-3)
        .unwrap();
    assert!(!flag);
    // Independent estimate: smallest eigenvalue of J J^T, square-rooted.
    let jac = chain.jacobian(&bent).unwrap();
    let tool_z = chain.forward_kinematics(&bent).unwrap().orientation * Vector3::z();
    let mut masked = nalgebra::DMatrix::zeros(4, 4);
    for c in 0..4 {
        for r in 0..3 {
            masked[(r, c)] = jac[(r, c)];
        }
        masked[(3, c)] = tool_z.dot(&Vector3::new(jac[(3, c)], jac[(4, c)], jac[(5, c)]));
    }
    let gram = &masked * masked.transpose();
    let eig = gram.symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min).max(0.0).sqrt();
    assert!((min - sigma).abs() < 1e-9, "{min} vs {sigma}");
}

#[test]
fn unreachable_and_bad_seed_errors() {
    let chain = KinematicChain::limb(&LimbGeometry::default(), "a");
    let far = chain
        .forward_kinematics(&[0.0; 4])
        .unwrap()
        .translated(Vector3::new(10.0 * chain.reach(), 0.0, 0.0));
    assert!(matches!(
        chain.solve_ik(&far, &[0.0, -0.5, 1.0, 0.0], &IkOptions::for_dof(4)),
        Err(KinematicsError::Unreachable { .. })
    ));
    assert!(matches!(
        chain.solve_ik(&far, &[0.0, -3.0, 1.0, 0.0], &IkOptions::for_dof(4)),
        Err(KinematicsError::LimitViolation { .. })
    ));
}
