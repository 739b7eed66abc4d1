//! Serial-chain kinematics: forward kinematics, geometric Jacobians,
//! damped least-squares IK and chain composition.
//!
//! Joint frames follow `frame_i = frame_{i-1} * parent_offset_i * rot(axis_i, q_i)`,
//! and the tool pose is `base * frame_n * tool_offset`. Roll joints turn about
//! the local z axis (the limb's long axis), pitch joints about local y.

use std::f64::consts::PI;

use nalgebra::{
    DMatrix, DVector, Isometry3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::OUTPUT_SPEED_LIMIT_RPM;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} joint angles, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("joint {joint_id} angle {angle} rad outside [{lo}, {hi}]")]
    LimitViolation {
        joint_id: String,
        angle: f64,
        lo: f64,
        hi: f64,
    },
    #[error("target {distance:.4} m from the base is beyond the {reach:.4} m reach")]
    Unreachable { distance: f64, reach: f64 },
    #[error("IK did not converge in {iterations} iterations (best residual {best_residual:.3e})")]
    NoConvergence {
        iterations: usize,
        best_residual: f64,
        best_angles: Vec<f64>,
    },
    #[error("task mask selects {rows} rows but the chain has {dof} DOF")]
    MaskTooLarge { rows: usize, dof: usize },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    Roll,
    Pitch,
}

impl AxisKind {
    pub fn local_axis(self) -> Unit<Vector3<f64>> {
        match self {
            AxisKind::Roll => Vector3::z_axis(),
            AxisKind::Pitch => Vector3::y_axis(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub joint_id: String,
    pub kind: AxisKind,
    /// Rotation axis in the joint frame. Negated for joints traversed in reverse.
    pub axis: Unit<Vector3<f64>>,
    pub parent_offset: Isometry3<f64>,
    /// rad.
    pub position_limits: (f64, f64),
    /// rad/s.
    pub velocity_limit: f64,
    /// Nm.
    pub torque_limit: f64,
}

impl JointSpec {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        let (lo, hi) = self.position_limits;
        if !(lo <= hi) {
            return Err(KinematicsError::InvalidChain(format!(
                "joint {} has limits ({lo}, {hi})",
                self.joint_id
            )));
        }
        if !(self.velocity_limit > 0.0) {
            return Err(KinematicsError::InvalidChain(format!(
                "joint {} velocity limit must be positive",
                self.joint_id
            )));
        }
        Ok(())
    }

    pub fn within_limits(&self, angle: f64) -> bool {
        angle >= self.position_limits.0 && angle <= self.position_limits.1
    }

    fn rotation(&self, angle: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&self.axis, angle)
    }
}

/// Position plus unit-quaternion orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose::from_isometry(&Isometry3::identity())
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Pose {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn translated(&self, delta: Vector3<f64>) -> Pose {
        Pose {
            position: self.position + delta,
            ..*self
        }
    }
}

/// Rotation by pi about x: turns a gripper's outward frame into the frame of
/// a partner facing it.
pub fn gripper_flip() -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::new_unchecked(Quaternion::new(0.0, 1.0, 0.0, 0.0)),
    )
}

/// Link dimensions and joint ranges of the limb module.
///
/// The lengths are placeholders; the real module dimensions are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimbGeometry {
    /// Base gripper face to the first roll joint, m.
    pub base_to_roll: f64,
    /// First roll joint to the first pitch joint, m.
    pub roll_to_pitch: f64,
    /// Pitch to pitch, m.
    pub upper_link: f64,
    /// Second pitch to the wrist roll, m.
    pub lower_link: f64,
    /// Wrist roll to the tool gripper face, m.
    pub tool_length: f64,
    /// Symmetric roll range, rad.
    pub roll_limit: f64,
    /// Symmetric pitch range, rad.
    pub pitch_limit: f64,
    /// rad/s.
    pub velocity_limit: f64,
    /// Nm.
    pub torque_limit: f64,
}

impl Default for LimbGeometry {
    fn default() -> Self {
        LimbGeometry {
            base_to_roll: 0.05,
            roll_to_pitch: 0.10,
            upper_link: 0.30,
            lower_link: 0.30,
            tool_length: 0.12,
            roll_limit: PI,
            pitch_limit: 2.88,
            velocity_limit: OUTPUT_SPEED_LIMIT_RPM / 60.0 * 2.0 * PI,
            torque_limit: 123.0,
        }
    }
}

fn along_z(d: f64) -> Isometry3<f64> {
    Isometry3::translation(0.0, 0.0, d)
}

/// Rows a task space may constrain. Positions and rotations are expressed in
/// the chain base frame; `ToolRoll` is the rotation about the current tool z axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRow {
    Px,
    Py,
    Pz,
    Rx,
    Ry,
    Rz,
    ToolRoll,
}

impl TaskRow {
    fn is_position(self) -> bool {
        matches!(self, TaskRow::Px | TaskRow::Py | TaskRow::Pz)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMask(Vec<TaskRow>);

impl TaskMask {
    pub fn new(rows: impl IntoIterator<Item = TaskRow>) -> Self {
        let mut rows: Vec<TaskRow> = rows.into_iter().collect();
        rows.sort();
        rows.dedup();
        TaskMask(rows)
    }

    pub fn position() -> Self {
        TaskMask::new([TaskRow::Px, TaskRow::Py, TaskRow::Pz])
    }

    pub fn position_and_roll() -> Self {
        TaskMask::new([TaskRow::Px, TaskRow::Py, TaskRow::Pz, TaskRow::ToolRoll])
    }

    pub fn full() -> Self {
        TaskMask::new([
            TaskRow::Px,
            TaskRow::Py,
            TaskRow::Pz,
            TaskRow::Rx,
            TaskRow::Ry,
            TaskRow::Rz,
        ])
    }

    /// Full pose for redundant chains, position plus tool roll for a limb.
    pub fn default_for(dof: usize) -> Self {
        match dof {
            d if d >= 6 => TaskMask::full(),
            d if d >= 4 => TaskMask::position_and_roll(),
            _ => TaskMask::position(),
        }
    }

    pub fn rows(&self) -> &[TaskRow] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub joints: Vec<JointSpec>,
    pub base_frame: Isometry3<f64>,
    pub tool_offset: Isometry3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkOptions {
    pub mask: TaskMask,
    /// m.
    pub tol_linear: f64,
    /// rad.
    pub tol_angular: f64,
    pub max_iter: usize,
    /// Peak damping factor applied as the smallest singular value reaches zero.
    pub damping: f64,
    /// Singular value below which damping ramps in.
    pub damping_threshold: f64,
    /// Largest joint update per iteration, rad.
    pub max_step: f64,
}

impl IkOptions {
    pub fn for_dof(dof: usize) -> Self {
        IkOptions {
            mask: TaskMask::default_for(dof),
            tol_linear: 1e-9,
            tol_angular: 1e-9,
            max_iter: 200,
            damping: 1e-2,
            damping_threshold: 0.05,
            max_step: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub angles: Vec<f64>,
    /// Solver updates taken; zero when the seed already satisfies the target.
    pub iterations: usize,
    /// Position error norm on masked rows, m.
    pub linear_residual: f64,
    /// Rotation error norm on masked rows, rad.
    pub angular_residual: f64,
}

impl KinematicChain {
    pub fn empty() -> Self {
        KinematicChain {
            joints: Vec::new(),
            base_frame: Isometry3::identity(),
            tool_offset: Isometry3::identity(),
        }
    }

    /// Roll-pitch-pitch-roll limb from its base gripper face to its tool
    /// gripper face. Joint ids are `{prefix}/j1` .. `{prefix}/j4`.
    pub fn limb(geometry: &LimbGeometry, prefix: &str) -> Self {
        let joint = |n: usize, kind: AxisKind, offset: f64| {
            let limit = match kind {
                AxisKind::Roll => geometry.roll_limit,
                AxisKind::Pitch => geometry.pitch_limit,
            };
            JointSpec {
                joint_id: format!("{prefix}/j{n}"),
                kind,
                axis: kind.local_axis(),
                parent_offset: along_z(offset),
                position_limits: (-limit, limit),
                velocity_limit: geometry.velocity_limit,
                torque_limit: geometry.torque_limit,
            }
        };
        KinematicChain {
            joints: vec![
                joint(1, AxisKind::Roll, geometry.base_to_roll),
                joint(2, AxisKind::Pitch, geometry.roll_to_pitch),
                joint(3, AxisKind::Pitch, geometry.upper_link),
                joint(4, AxisKind::Roll, geometry.lower_link),
            ],
            base_frame: Isometry3::identity(),
            tool_offset: along_z(geometry.tool_length),
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_ids(&self) -> Vec<&str> {
        self.joints.iter().map(|j| j.joint_id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        self.joints.iter().try_for_each(JointSpec::validate)
    }

    /// Is this the 4-joint roll-pitch-pitch-roll limb layout?
    pub fn is_limb_layout(&self) -> bool {
        let kinds: Vec<AxisKind> = self.joints.iter().map(|j| j.kind).collect();
        kinds == [AxisKind::Roll, AxisKind::Pitch, AxisKind::Pitch, AxisKind::Roll]
    }

    /// Upper bound on the distance from the base frame to the tool, m.
    pub fn reach(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| j.parent_offset.translation.vector.norm())
            .sum::<f64>()
            + self.tool_offset.translation.vector.norm()
    }

    pub fn check_angles(&self, angles: &[f64]) -> Result<(), KinematicsError> {
        if angles.len() != self.dof() {
            return Err(KinematicsError::LengthMismatch {
                expected: self.dof(),
                got: angles.len(),
            });
        }
        for (joint, &angle) in self.joints.iter().zip(angles) {
            if !joint.within_limits(angle) {
                return Err(KinematicsError::LimitViolation {
                    joint_id: joint.joint_id.clone(),
                    angle,
                    lo: joint.position_limits.0,
                    hi: joint.position_limits.1,
                });
            }
        }
        Ok(())
    }

    /// Frame of every joint (after its rotation) followed by the tool frame.
    fn frames(&self, angles: &[f64]) -> (Vec<Isometry3<f64>>, Isometry3<f64>) {
        let mut current = self.base_frame;
        let mut frames = Vec::with_capacity(self.dof());
        for (joint, &q) in self.joints.iter().zip(angles) {
            current = current * joint.parent_offset;
            current = current * Isometry3::from_parts(Translation3::identity(), joint.rotation(q));
            frames.push(current);
        }
        (frames, current * self.tool_offset)
    }

    /// Joint frames and tool frame without the limit check. Compliance can
    /// carry a measured angle slightly past a limit.
    pub fn frames_unchecked(&self, angles: &[f64]) -> (Vec<Isometry3<f64>>, Isometry3<f64>) {
        assert_eq!(angles.len(), self.dof(), "angle count");
        self.frames(angles)
    }

    pub fn tool_isometry(&self, angles: &[f64]) -> Result<Isometry3<f64>, KinematicsError> {
        self.check_angles(angles)?;
        Ok(self.frames(angles).1)
    }

    pub fn forward_kinematics(&self, angles: &[f64]) -> Result<Pose, KinematicsError> {
        self.tool_isometry(angles).map(|iso| Pose::from_isometry(&iso))
    }

    /// Geometric Jacobian, rows `[vx vy vz wx wy wz]` in the base frame.
    pub fn jacobian(&self, angles: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_angles(angles)?;
        Ok(self.jacobian_unchecked(angles))
    }

    fn jacobian_unchecked(&self, angles: &[f64]) -> DMatrix<f64> {
        let (frames, tool) = self.frames(angles);
        let tip = tool.translation.vector;
        let mut jac = DMatrix::zeros(6, self.dof());
        for (i, (joint, frame)) in self.joints.iter().zip(&frames).enumerate() {
            let axis = frame.rotation * joint.axis.into_inner();
            let linear = axis.cross(&(tip - frame.translation.vector));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&linear);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&axis);
        }
        jac
    }

    fn masked_jacobian(&self, angles: &[f64], mask: &TaskMask) -> DMatrix<f64> {
        let full = self.jacobian_unchecked(angles);
        let tool_z = self.frames(angles).1.rotation * Vector3::z();
        let mut out = DMatrix::zeros(mask.len(), self.dof());
        for (r, row) in mask.rows().iter().enumerate() {
            for c in 0..self.dof() {
                out[(r, c)] = match row {
                    TaskRow::Px => full[(0, c)],
                    TaskRow::Py => full[(1, c)],
                    TaskRow::Pz => full[(2, c)],
                    TaskRow::Rx => full[(3, c)],
                    TaskRow::Ry => full[(4, c)],
                    TaskRow::Rz => full[(5, c)],
                    TaskRow::ToolRoll => {
                        tool_z.dot(&Vector3::new(full[(3, c)], full[(4, c)], full[(5, c)]))
                    }
                };
            }
        }
        out
    }

    /// Task error (target minus current) on the masked rows.
    fn task_error(&self, current: &Isometry3<f64>, target: &Pose, mask: &TaskMask) -> DVector<f64> {
        let dp = target.position - current.translation.vector;
        let dr = (target.orientation * current.rotation.inverse()).scaled_axis();
        let tool_z = current.rotation * Vector3::z();
        DVector::from_iterator(
            mask.len(),
            mask.rows().iter().map(|row| match row {
                TaskRow::Px => dp.x,
                TaskRow::Py => dp.y,
                TaskRow::Pz => dp.z,
                TaskRow::Rx => dr.x,
                TaskRow::Ry => dr.y,
                TaskRow::Rz => dr.z,
                TaskRow::ToolRoll => dr.dot(&tool_z),
            }),
        )
    }

    fn split_residual(error: &DVector<f64>, mask: &TaskMask) -> (f64, f64) {
        let (mut lin, mut ang) = (0.0, 0.0);
        for (row, e) in mask.rows().iter().zip(error.iter()) {
            if row.is_position() {
                lin += e * e;
            } else {
                ang += e * e;
            }
        }
        (lin.sqrt(), ang.sqrt())
    }

    /// Smallest singular value of the masked Jacobian.
    pub fn smallest_singular_value(
        &self,
        angles: &[f64],
        mask: &TaskMask,
    ) -> Result<f64, KinematicsError> {
        self.check_angles(angles)?;
        let jac = self.masked_jacobian(angles, mask);
        Ok(jac
            .singular_values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min))
    }

    /// Flags configurations whose masked Jacobian has a singular value below
    /// `threshold`. Returns the flag and the smallest singular value.
    pub fn is_near_singular(
        &self,
        angles: &[f64],
        mask: &TaskMask,
        threshold: f64,
    ) -> Result<(bool, f64), KinematicsError> {
        let sigma = self.smallest_singular_value(angles, mask)?;
        Ok((sigma < threshold, sigma))
    }

    /// Damped least-squares IK from `seed` toward `target` on the masked rows.
    pub fn solve_ik(
        &self,
        target: &Pose,
        seed: &[f64],
        options: &IkOptions,
    ) -> Result<IkSolution, KinematicsError> {
        self.check_angles(seed)?;
        let mask = &options.mask;
        if mask.len() > self.dof() {
            return Err(KinematicsError::MaskTooLarge {
                rows: mask.len(),
                dof: self.dof(),
            });
        }
        let distance = (target.position - self.base_frame.translation.vector).norm();
        let reach = self.reach();
        if distance > reach + 1e-12 {
            return Err(KinematicsError::Unreachable { distance, reach });
        }

        let mut q = seed.to_vec();
        let mut best = (f64::INFINITY, q.clone());
        for iteration in 0..=options.max_iter {
            let (_, tool) = self.frames(&q);
            let error = self.task_error(&tool, target, mask);
            let (lin, ang) = Self::split_residual(&error, mask);
            let score = lin + ang;
            if score < best.0 {
                best = (score, q.clone());
            }
            if lin <= options.tol_linear && ang <= options.tol_angular {
                return Ok(IkSolution {
                    angles: q,
                    iterations: iteration,
                    linear_residual: lin,
                    angular_residual: ang,
                });
            }
            if iteration == options.max_iter {
                break;
            }

            let jac = self.masked_jacobian(&q, mask);
            let svd = jac.svd(true, true);
            let sigma_min = svd
                .singular_values
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let lambda_sq = if sigma_min < options.damping_threshold {
                let r = sigma_min / options.damping_threshold;
                options.damping * options.damping * (1.0 - r * r)
            } else {
                0.0
            };
            let u = svd.u.as_ref().expect("u requested");
            let v_t = svd.v_t.as_ref().expect("v_t requested");
            let mut dq = DVector::zeros(self.dof());
            for (k, &s) in svd.singular_values.iter().enumerate() {
                let denom = s * s + lambda_sq;
                if denom <= f64::EPSILON * f64::EPSILON {
                    continue;
                }
                let coeff = s / denom * u.column(k).dot(&error);
                dq += v_t.row(k).transpose() * coeff;
            }
            let largest = dq.amax();
            if largest > options.max_step {
                dq *= options.max_step / largest;
            }
            for (i, joint) in self.joints.iter().enumerate() {
                q[i] = (q[i] + dq[i]).clamp(joint.position_limits.0, joint.position_limits.1);
            }
        }
        Err(KinematicsError::NoConvergence {
            iterations: options.max_iter,
            best_residual: best.0,
            best_angles: best.1,
        })
    }

    /// Serial concatenation: `other` is mounted at this chain's tool frame
    /// through `coupling`.
    pub fn append(&self, other: &KinematicChain, coupling: &Isometry3<f64>) -> KinematicChain {
        let bridge = self.tool_offset * coupling * other.base_frame;
        let mut joints = self.joints.clone();
        let tool_offset = match other.joints.split_first() {
            None => bridge * other.tool_offset,
            Some((first, rest)) => {
                let mut first = first.clone();
                first.parent_offset = bridge * first.parent_offset;
                joints.push(first);
                joints.extend(rest.iter().cloned());
                other.tool_offset
            }
        };
        KinematicChain {
            joints,
            base_frame: self.base_frame,
            tool_offset,
        }
    }

    /// The same chain entered through its tool gripper and left through its
    /// base gripper. Joint angles keep their meaning; axes flip sign.
    pub fn reversed(&self) -> KinematicChain {
        let flip = gripper_flip();
        let mut pending = flip * self.tool_offset.inverse();
        let mut joints = Vec::with_capacity(self.dof());
        for joint in self.joints.iter().rev() {
            let mut r = joint.clone();
            r.axis = -joint.axis;
            r.parent_offset = pending;
            pending = joint.parent_offset.inverse();
            joints.push(r);
        }
        KinematicChain {
            joints,
            base_frame: Isometry3::identity(),
            tool_offset: pending * self.base_frame.inverse() * flip,
        }
    }
}

/// Joins two chains gripper to gripper: `chain_b` is mounted reversed
/// through its tool frame at `chain_a`'s tool, `coupling` being the closed
/// gripper interface.
pub fn compose_chains(
    chain_a: &KinematicChain,
    chain_b: &KinematicChain,
    coupling: &Isometry3<f64>,
) -> KinematicChain {
    chain_a.append(&chain_b.reversed(), coupling)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limb() -> KinematicChain {
        KinematicChain::limb(&LimbGeometry::default(), "l")
    }

    const BENT: [f64; 4] = [0.0, -PI / 4.0, PI / 2.0, 0.0];

    #[test]
    fn template_layout() {
        let c = limb();
        assert_eq!(c.dof(), 4);
        assert!(c.is_limb_layout());
        assert_eq!(c.joint_ids(), ["l/j1", "l/j2", "l/j3", "l/j4"]);
        assert!((c.reach() - 0.87).abs() < 1e-12);
        assert!((c.joints[0].velocity_limit - 2.722).abs() < 1e-3);
    }

    #[test]
    fn zero_pose_is_straight_up() {
        let pose = limb().forward_kinematics(&[0.0; 4]).unwrap();
        assert!((pose.position - Vector3::new(0.0, 0.0, 0.87)).norm() < 1e-12);
        assert!(pose.orientation.angle() < 1e-12);
    }

    #[test]
    fn base_roll_rotates_the_home_pose() {
        let c = limb();
        let q = [PI / 2.0, -0.4, 0.9, 0.0];
        let mut q0 = q;
        q0[0] = 0.0;
        let a = c.forward_kinematics(&q0).unwrap();
        let b = c.forward_kinematics(&q).unwrap();
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI / 2.0);
        assert!((rz * a.position - b.position).norm() < 1e-12);
        assert!((rz * a.orientation).angle_to(&b.orientation) < 1e-12);
    }

    #[test]
    fn fk_errors() {
        let c = limb();
        assert!(matches!(
            c.forward_kinematics(&[0.0; 3]),
            Err(KinematicsError::LengthMismatch { expected: 4, got: 3 })
        ));
        assert!(matches!(
            c.forward_kinematics(&[0.0, 3.0, 0.0, 0.0]),
            Err(KinematicsError::LimitViolation { .. })
        ));
    }

    #[test]
    fn stretched_pose_is_singular() {
        let c = limb();
        let jac = c.jacobian(&[0.0; 4]).unwrap();
        let pos = jac.rows(0, 3).into_owned();
        let rank = pos.rank(1e-9);
        assert!(rank < 3);
        let (flag, sigma) = c
            .is_near_singular(&[0.0; 4], &TaskMask::position_and_roll(), 1e-3)
            .unwrap();
        assert!(flag);
        assert!(sigma < 1e-9);
        let (flag, _) = c
            .is_near_singular(&[0.0; 4], &TaskMask::position_and_roll(), 0.0)
            .unwrap();
        assert!(!flag);
    }

    #[test]
    fn bent_pose_is_not_singular() {
        let (flag, sigma) = limb()
            .is_near_singular(&BENT, &TaskMask::position_and_roll(), 1e-3)
            .unwrap();
        assert!(!flag, "sigma {sigma}");
    }

    #[test]
    fn wrist_roll_column_has_no_linear_part() {
        let jac = limb().jacobian(&[0.3, -0.5, 1.1, 0.7]).unwrap();
        assert!(jac.fixed_view::<3, 1>(0, 3).norm() < 1e-12);
    }

    #[test]
    fn ik_returns_seed_for_its_own_pose() {
        let c = limb();
        let target = c.forward_kinematics(&BENT).unwrap();
        let sol = c.solve_ik(&target, &BENT, &IkOptions::for_dof(4)).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.angles, BENT.to_vec());
    }

    #[test]
    fn ik_ten_millimetre_step() {
        let c = limb();
        let target = c
            .forward_kinematics(&BENT)
            .unwrap()
            .translated(Vector3::new(0.01, 0.0, 0.0));
        let sol = c.solve_ik(&target, &BENT, &IkOptions::for_dof(4)).unwrap();
        let reached = c.forward_kinematics(&sol.angles).unwrap();
        assert!((reached.position - target.position).norm() < 1e-6);
    }

    #[test]
    fn ik_far_target_is_unreachable() {
        let c = limb();
        let target = Pose::identity().translated(Vector3::new(8.7, 0.0, 0.0));
        assert!(matches!(
            c.solve_ik(&target, &BENT, &IkOptions::for_dof(4)),
            Err(KinematicsError::Unreachable { .. })
        ));
    }

    #[test]
    fn ik_reports_best_residual_when_starved() {
        let c = limb();
        let target = c.forward_kinematics(&[0.5, 0.6, 0.8, -0.2]).unwrap();
        let mut opts = IkOptions::for_dof(4);
        opts.max_iter = 1;
        match c.solve_ik(&target, &BENT, &opts) {
            Err(KinematicsError::NoConvergence { best_residual, .. }) => {
                assert!(best_residual > 0.0)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oversized_mask_is_rejected() {
        let c = limb();
        let target = c.forward_kinematics(&BENT).unwrap();
        let mut opts = IkOptions::for_dof(4);
        opts.mask = TaskMask::full();
        assert!(matches!(
            c.solve_ik(&target, &BENT, &opts),
            Err(KinematicsError::MaskTooLarge { rows: 6, dof: 4 })
        ));
    }

    #[test]
    fn composing_with_empty_chain_is_identity() {
        let c = limb();
        let composed = compose_chains(&c, &KinematicChain::empty(), &gripper_flip());
        // An empty chain reversed is flip * flip = identity.
        let q = [0.2, -0.3, 0.4, 0.5];
        let a = c.tool_isometry(&q).unwrap();
        let b = composed.tool_isometry(&q).unwrap();
        assert!((a.translation.vector - b.translation.vector).norm() < 1e-12);
        assert!(a.rotation.angle_to(&(b.rotation * gripper_flip().rotation)) < 1e-12);
        let same = compose_chains(&c, &KinematicChain::empty(), &Isometry3::identity());
        assert_eq!(same.joints, c.joints);
        let t = same.tool_isometry(&q).unwrap();
        assert!((t.translation.vector - a.translation.vector).norm() < 1e-15);
        assert!(t.rotation.angle_to(&a.rotation) < 1e-15);
    }

    #[test]
    fn two_limbs_make_eight_dof() {
        let c = limb();
        let eight = compose_chains(&c, &c, &Isometry3::identity());
        assert_eq!(eight.dof(), 8);
        assert!(!eight.is_limb_layout());
    }

    #[test]
    fn reversal_is_an_involution() {
        let c = limb();
        let rr = c.reversed().reversed();
        let q = [0.1, 0.2, -0.7, 1.0];
        let a = c.tool_isometry(&q).unwrap();
        let b = rr.tool_isometry(&q).unwrap();
        assert!((a.translation.vector - b.translation.vector).norm() < 1e-12);
        assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
    }
}
