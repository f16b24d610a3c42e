//! 4-DOF manipulator: a base yaw joint followed by three pitch joints.
//!
//! Joint convention: all zeros is the arm stretched straight out along the
//! arm-base +x axis. Positive pitch rotates the chain downward. The
//! end-effector frame has its approach axis on local +x and its closing axis
//! on local +y, so its orientation is always `rot_z(q1) * rot_y(q2 + q3 + q4)`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rot_x, rot_y, rot_z, wrap_angle, Pose3, Vec3};
use crate::world::{Posture, RobotState, SceneObject, Shape, WorldScene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArmError {
    #[error("joint {joint} at {value:.4} rad is outside [{min:.4}, {max:.4}]")]
    JointLimitViolation {
        joint: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("target is outside the arm workspace")]
    Unreachable,
    #[error("orientation not reachable by a yaw + pitch chain: {0}")]
    OrientationInfeasible(String),
    #[error("gripper already holds {0}")]
    GripperOccupied(String),
    #[error("grasp pose is not executable: {0}")]
    InfeasiblePose(String),
    #[error("nothing is held")]
    NothingHeld,
    #[error("unknown object {0}")]
    UnknownObject(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState(pub [f64; 4]);

impl JointState {
    pub fn new(q1: f64, q2: f64, q3: f64, q4: f64) -> Self {
        Self([q1, q2, q3, q4])
    }

    pub fn zeros() -> Self {
        Self([0.0; 4])
    }

    pub fn max_abs_delta(&self, other: &JointState) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn lerp(&self, other: &JointState, s: f64) -> JointState {
        let mut out = [0.0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.0[i] + (other.0[i] - self.0[i]) * s;
        }
        JointState(out)
    }

    /// Moves toward `target` by at most `max_step` per joint.
    pub fn step_toward(&self, target: &JointState, max_step: f64) -> JointState {
        let mut out = self.0;
        for (i, o) in out.iter_mut().enumerate() {
            *o += (target.0[i] - self.0[i]).clamp(-max_step, max_step);
        }
        JointState(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmModel {
    /// Shoulder height L1 followed by the three pitch links L2..L4 (m).
    pub link_lengths: [f64; 4],
    pub joint_limits: [[f64; 2]; 4],
    /// rad/s, shared by all joints.
    pub max_joint_speed: f64,
    pub max_opening: f64,
    /// kg
    pub payload: f64,
    /// Gripper camera pose in the end-effector frame.
    pub camera_offset: Pose3,
    /// Arm base pose in the robot base frame, per posture.
    pub mount_standing: Pose3,
    pub mount_sitting: Pose3,
    pub home: JointState,
    pub survey: JointState,
    /// ε_p: allowed distance between the fingers' center and the object's chord midpoint.
    pub grasp_tolerance: f64,
    pub pregrasp_standoff: f64,
}

/// End-effector frame: +x approach, +y closing. Camera frame: +z forward,
/// +x right, +y down. Maps camera axes into the end-effector frame.
pub fn camera_in_ee_rotation() -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            link_lengths: [0.077, 0.130, 0.124, 0.126],
            joint_limits: [[-2.8, 2.8], [-2.0, 1.6], [-1.6, 2.4], [-1.8, 2.1]],
            max_joint_speed: 1.0,
            max_opening: 0.07,
            payload: 0.5,
            camera_offset: Pose3::new(camera_in_ee_rotation(), Vec3::new(-0.05, 0.0, 0.0)),
            mount_standing: Pose3::from_translation(0.05, 0.0, 0.30),
            mount_sitting: Pose3::from_translation(0.05, 0.0, 0.12),
            home: JointState::new(0.0, -1.5, 1.4, 1.2),
            survey: JointState::new(-0.45, -1.3, 1.3, 1.25),
            grasp_tolerance: 0.01,
            pregrasp_standoff: 0.05,
        }
    }
}

impl ArmModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.link_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err("arm.link_lengths must be positive".into());
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err("arm.joint_limits must be well ordered".into());
        }
        if !(self.max_joint_speed > 0.0) || !(self.max_opening > 0.0) || !(self.payload > 0.0) {
            return Err("arm speed, opening and payload must be positive".into());
        }
        if !(self.grasp_tolerance > 0.0) {
            return Err("arm.grasp_tolerance must be positive".into());
        }
        self.check_limits(&self.home)
            .map_err(|e| format!("arm.home: {e}"))?;
        self.check_limits(&self.survey)
            .map_err(|e| format!("arm.survey: {e}"))?;
        Ok(())
    }

    pub fn max_reach(&self) -> f64 {
        self.link_lengths[1] + self.link_lengths[2] + self.link_lengths[3]
    }

    pub fn mount(&self, posture: Posture) -> &Pose3 {
        match posture {
            Posture::Standing => &self.mount_standing,
            Posture::Sitting => &self.mount_sitting,
        }
    }

    pub fn check_limits(&self, q: &JointState) -> Result<(), ArmError> {
        for (i, (v, [lo, hi])) in q.0.iter().zip(self.joint_limits.iter()).enumerate() {
            if !(v >= lo && v <= hi) {
                return Err(ArmError::JointLimitViolation {
                    joint: i + 1,
                    value: *v,
                    min: *lo,
                    max: *hi,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &JointState) -> JointState {
        let mut out = q.0;
        for (o, [lo, hi]) in out.iter_mut().zip(self.joint_limits.iter()) {
            *o = o.clamp(*lo, *hi);
        }
        JointState(out)
    }
}

/// Forward kinematics without the limit check.
pub fn fk_unchecked(model: &ArmModel, q: &JointState) -> Pose3 {
    let [l1, l2, l3, l4] = model.link_lengths;
    let [q1, q2, q3, q4] = q.0;
    let a2 = q2;
    let a3 = q2 + q3;
    let a4 = q2 + q3 + q4;
    let radial = l2 * a2.cos() + l3 * a3.cos() + l4 * a4.cos();
    let drop = l2 * a2.sin() + l3 * a3.sin() + l4 * a4.sin();
    let (s1, c1) = q1.sin_cos();
    Pose3::new(
        rot_z(q1) * rot_y(a4),
        Vec3::new(radial * c1, radial * s1, l1 - drop),
    )
}

/// End-effector pose in the arm-base frame.
pub fn fk(model: &ArmModel, q: &JointState) -> Result<Pose3, ArmError> {
    model.check_limits(q)?;
    Ok(fk_unchecked(model, q))
}

/// Gripper camera pose in the arm-base frame.
pub fn camera_pose(model: &ArmModel, q: &JointState) -> Pose3 {
    fk_unchecked(model, q).compose(&model.camera_offset)
}

// Tolerances for deciding whether a pose lies on the yaw + pitch manifold.
const ROLL_TOL: f64 = 1e-6;
const LATERAL_TOL: f64 = 1e-6;

/// Decomposes an orientation into (yaw, downward pitch) if it has no roll.
pub fn manifold_angles(rotation: &nalgebra::Matrix3<f64>) -> Result<(f64, f64), ArmError> {
    // For rot_z(yaw) * rot_y(pitch) the closing axis (column 1) is (-sin yaw, cos yaw, 0).
    let closing = rotation.column(1);
    if closing.z.abs() > ROLL_TOL {
        return Err(ArmError::OrientationInfeasible(format!(
            "closing axis tilted by {:.3} rad (roll)",
            closing.z.asin()
        )));
    }
    let yaw = (-closing.x).atan2(closing.y);
    let approach = rotation.column(0);
    let horizontal = approach.x * yaw.cos() + approach.y * yaw.sin();
    let pitch = (-approach.z).atan2(horizontal);
    Ok((yaw, pitch))
}

/// Closed-form inverse kinematics; prefers the elbow-up branch.
pub fn ik(model: &ArmModel, target: &Pose3) -> Result<JointState, ArmError> {
    let (yaw, pitch) = manifold_angles(&target.rotation)?;
    let p = target.translation;
    let lateral = -p.x * yaw.sin() + p.y * yaw.cos();
    if lateral.abs() > LATERAL_TOL {
        return Err(ArmError::OrientationInfeasible(format!(
            "yaw {yaw:.4} does not point at the target (lateral offset {lateral:.2e} m)"
        )));
    }
    let [l1, l2, l3, l4] = model.link_lengths;
    let radial = p.x * yaw.cos() + p.y * yaw.sin();
    let drop = l1 - p.z;
    if (radial * radial + drop * drop).sqrt() > model.max_reach() + 1e-12 {
        return Err(ArmError::Unreachable);
    }
    let wr = radial - l4 * pitch.cos();
    let wd = drop - l4 * pitch.sin();
    let c3 = (wr * wr + wd * wd - l2 * l2 - l3 * l3) / (2.0 * l2 * l3);
    if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&c3) {
        return Err(ArmError::Unreachable);
    }
    let base = c3.clamp(-1.0, 1.0).acos();
    let mut first_violation = None;
    // Elbow up is q3 >= 0: the upper arm rises above the shoulder-wrist line.
    for q3 in [base, -base] {
        let q2 = wd.atan2(wr) - (l3 * q3.sin()).atan2(l2 + l3 * q3.cos());
        let q2 = wrap_angle(q2);
        let q4 = wrap_angle(pitch - q2 - q3);
        let q = JointState::new(wrap_angle(yaw), q2, q3, q4);
        match model.check_limits(&q) {
            Ok(()) => return Ok(q),
            Err(e) => {
                first_violation.get_or_insert(e);
            }
        }
    }
    Err(first_violation.unwrap_or(ArmError::Unreachable))
}

/// Rotation on the reachable manifold with the given yaw and downward pitch.
pub fn manifold_rotation(yaw: f64, pitch: f64) -> nalgebra::Matrix3<f64> {
    rot_z(yaw) * rot_y(pitch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(joints, time)` pairs with non-decreasing time.
    pub waypoints: Vec<(JointState, f64)>,
}

impl Trajectory {
    pub fn stationary(q: JointState) -> Self {
        Self {
            waypoints: vec![(q, 0.0)],
        }
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().map(|w| w.1).unwrap_or(0.0)
    }

    pub fn final_state(&self) -> JointState {
        self.waypoints.last().map(|w| w.0).unwrap_or_else(JointState::zeros)
    }

    pub fn sample(&self, t: f64) -> JointState {
        let w = &self.waypoints;
        if t <= w[0].1 {
            return w[0].0;
        }
        for pair in w.windows(2) {
            let (a, ta) = pair[0];
            let (b, tb) = pair[1];
            if t <= tb {
                let s = if tb > ta { (t - ta) / (tb - ta) } else { 1.0 };
                return a.lerp(&b, s);
            }
        }
        self.final_state()
    }

    fn append(&mut self, q: JointState, speed: f64) {
        let (last, t) = *self.waypoints.last().expect("trajectory starts non-empty");
        let dt = last.max_abs_delta(&q) / speed;
        if dt > 0.0 {
            self.waypoints.push((q, t + dt));
        }
    }
}

/// Straight joint-space move, timed by the slowest joint.
pub fn plan_trajectory(
    model: &ArmModel,
    from: &JointState,
    to: &JointState,
) -> Result<Trajectory, ArmError> {
    model.check_limits(from)?;
    model.check_limits(to)?;
    let mut traj = Trajectory::stationary(*from);
    traj.append(*to, model.max_joint_speed);
    Ok(traj)
}

/// Pre-grasp standoff position for a grasp pose.
pub fn pregrasp_pose(model: &ArmModel, grasp: &Pose3) -> Pose3 {
    Pose3::new(
        grasp.rotation,
        grasp.translation - model.pregrasp_standoff * grasp.axis(0),
    )
}

/// from → pre-grasp standoff → grasp, each leg a timed joint-space line.
pub fn plan_grasp_approach(
    model: &ArmModel,
    from: &JointState,
    grasp: &Pose3,
) -> Result<Trajectory, ArmError> {
    let q_grasp = ik(model, grasp)?;
    let q_pre = ik(model, &pregrasp_pose(model, grasp))?;
    model.check_limits(from)?;
    let mut traj = Trajectory::stationary(*from);
    traj.append(q_pre, model.max_joint_speed);
    traj.append(q_grasp, model.max_joint_speed);
    Ok(traj)
}

pub fn raise_to_survey(model: &ArmModel, current: &JointState) -> Trajectory {
    let from = model.clamp(current);
    plan_trajectory(model, &from, &model.survey).expect("clamped state and survey pose are within limits")
}

/// Why a grasp attempt failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    /// Sphere grasped too far from its center; it slipped out.
    Slipped,
    /// Fingers missed the chord midpoint and nudged a rolling object away.
    RolledAway,
    /// Fingers closed without a chord through the object close enough to their center.
    Missed,
    /// The object is wider than the gripper along the closing axis.
    TooWide,
    /// Heavy object held far from its center.
    OffCenterHeavy,
    Overweight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraspStatus {
    Success,
    FailSlip,
    FailDrop,
    FailPlan,
}

impl GraspStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            GraspStatus::Success => "success",
            GraspStatus::FailSlip => "fail-slip",
            GraspStatus::FailDrop => "fail-drop",
            GraspStatus::FailPlan => "fail-plan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GraspOutcome {
    Success { object_id: String },
    Failed { object_id: Option<String>, cause: FailureCause },
}

impl GraspOutcome {
    pub fn status(&self) -> GraspStatus {
        match self {
            GraspOutcome::Success { .. } => GraspStatus::Success,
            GraspOutcome::Failed { cause, .. } => match cause {
                FailureCause::OffCenterHeavy | FailureCause::Overweight => GraspStatus::FailDrop,
                _ => GraspStatus::FailSlip,
            },
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, GraspOutcome::Success { .. })
    }
}

/// Thresholds of the geometric grasp-success proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspPhysics {
    /// Off-center fraction of the half-extent above which heavy objects drop.
    pub drop_offset_fraction: f64,
    /// Mass above which off-center grasps drop (kg).
    pub heavy_mass: f64,
    /// Impulse applied to a rolling object the fingers disturb (N·s).
    pub nudge_impulse: f64,
}

impl Default for GraspPhysics {
    fn default() -> Self {
        Self {
            drop_offset_fraction: 0.4,
            heavy_mass: 0.15,
            nudge_impulse: 0.004,
        }
    }
}

/// World pose of the arm base for the robot's current base pose and posture.
pub fn arm_base_world(model: &ArmModel, robot: &RobotState) -> Pose3 {
    robot.base.to_pose3().compose(model.mount(robot.posture))
}

/// Chord of `object` along the line `p + s·dir`, as `(s_enter, s_exit)`.
pub fn object_chord(object: &SceneObject, p: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
    let inv = object.pose.inverse();
    let o = inv.transform_point(p);
    let d = inv.transform_vector(dir);
    object.shape.line_interval(&o, &d)
}

/// Largest off-center fraction over the object's axes that are not aligned with
/// the closing direction.
fn off_center_fraction(object: &SceneObject, p: &Vec3, closing: &Vec3) -> f64 {
    let mut d = p - object.pose.translation;
    d -= d.dot(closing) * closing;
    let local = object.pose.rotation.transpose() * d;
    let local_closing = object.pose.rotation.transpose() * closing;
    match object.shape {
        Shape::Box { size } => (0..3)
            .filter(|&i| local_closing[i].abs() < 0.9)
            .map(|i| local[i].abs() / (size[i] / 2.0))
            .fold(0.0, f64::max),
        Shape::Cylinder { radius, height } => {
            let axial = local.z.abs() / (height / 2.0);
            let radial = (local.x * local.x + local.y * local.y).sqrt() / radius;
            axial.max(radial)
        }
        Shape::Sphere { radius } => local.norm() / radius,
    }
}

/// Closes the gripper at `grasp_pose_base` (arm-base frame) and decides the outcome.
///
/// The commanded pose is perturbed by zero-mean Gaussian execution noise with
/// standard deviation `execution_sigma` per axis, drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn execute_grasp(
    scene: &mut WorldScene,
    robot: &mut RobotState,
    model: &ArmModel,
    physics: &GraspPhysics,
    grasp_pose_base: &Pose3,
    width: f64,
    execution_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GraspOutcome, ArmError> {
    if let Some(held) = &robot.held_object {
        return Err(ArmError::GripperOccupied(held.clone()));
    }
    let q = ik(model, grasp_pose_base).map_err(|e| ArmError::InfeasiblePose(e.to_string()))?;
    let base_world = arm_base_world(model, robot);
    let mut ee = base_world.compose(&fk_unchecked(model, &q));
    if execution_sigma > 0.0 {
        let n = Normal::new(0.0, execution_sigma).expect("finite sigma");
        ee.translation += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    robot.arm_joints = q;
    robot.gripper_opening = width.clamp(0.0, model.max_opening);
    let p = ee.translation;
    let closing = ee.axis(1);

    // The object whose chord midpoint along the closing axis is nearest the finger center.
    let best = scene
        .objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| {
            object_chord(o, &p, &closing).map(|(s0, s1)| (i, ((s0 + s1) / 2.0).abs(), s1 - s0))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1));

    let Some((idx, mid_offset, chord)) = best else {
        return Ok(GraspOutcome::Failed {
            object_id: None,
            cause: FailureCause::Missed,
        });
    };
    let object = scene.objects[idx].clone();
    let fail = |cause| GraspOutcome::Failed {
        object_id: Some(object.id.clone()),
        cause,
    };
    let is_sphere = matches!(object.shape, Shape::Sphere { .. });
    let nudge_dir = {
        let mut d = object.pose.translation - p;
        d.z = 0.0;
        if d.norm() < 1e-9 {
            d = ee.axis(0);
            d.z = 0.0;
        }
        d.try_normalize(1e-12).unwrap_or_else(Vec3::x)
    };

    if mid_offset > model.grasp_tolerance {
        if is_sphere && object.movable {
            scene.perturb_object(&object.id, nudge_dir * physics.nudge_impulse)
                .map_err(|_| ArmError::UnknownObject(object.id.clone()))?;
            return Ok(fail(FailureCause::RolledAway));
        }
        return Ok(fail(FailureCause::Missed));
    }
    if chord > model.max_opening {
        return Ok(fail(FailureCause::TooWide));
    }
    if object.mass > model.payload {
        return Ok(fail(FailureCause::Overweight));
    }
    match object.shape {
        Shape::Sphere { radius } => {
            let offset = (p - object.pose.translation).norm();
            if offset >= (1.0 - object.slip_coefficient) * radius {
                if object.movable {
                    scene
                        .perturb_object(&object.id, nudge_dir * physics.nudge_impulse)
                        .map_err(|_| ArmError::UnknownObject(object.id.clone()))?;
                }
                return Ok(fail(FailureCause::Slipped));
            }
        }
        _ => {
            let frac = off_center_fraction(&object, &p, &closing);
            if frac > physics.drop_offset_fraction && object.mass > physics.heavy_mass {
                return Ok(fail(FailureCause::OffCenterHeavy));
            }
        }
    }

    robot.held_object = Some(object.id.clone());
    robot.held_offset = Some(ee.inverse().compose(&object.pose));
    robot.held_rest_rotation = Some(object.pose.rotation);
    robot.gripper_opening = chord;
    Ok(GraspOutcome::Success {
        object_id: object.id,
    })
}

/// Finds a reachable joint state with the end-effector at `point` (arm-base
/// frame), trying approach pitches from straight down toward horizontal.
pub fn reach_point(model: &ArmModel, point: &Vec3) -> Result<JointState, ArmError> {
    let yaw = point.y.atan2(point.x);
    let mut last = ArmError::Unreachable;
    for step in 0..=18 {
        let pitch = FRAC_PI_2 - step as f64 * (FRAC_PI_2 / 18.0);
        let pose = Pose3::new(manifold_rotation(yaw, pitch), *point);
        match ik(model, &pose) {
            Ok(q) => return Ok(q),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Releases the held object at `target` (world frame, z ignored: the object
/// rests on the floor).
pub fn place(
    scene: &mut WorldScene,
    robot: &mut RobotState,
    model: &ArmModel,
    target: &Vec3,
) -> Result<(), ArmError> {
    let id = robot.held_object.clone().ok_or(ArmError::NothingHeld)?;
    let idx = scene
        .objects
        .iter()
        .position(|o| o.id == id)
        .ok_or_else(|| ArmError::UnknownObject(id.clone()))?;
    let rest = robot
        .held_rest_rotation
        .unwrap_or(scene.objects[idx].pose.rotation);
    let half_height = scene.objects[idx].shape.half_height(&rest);
    let world_target = Vec3::new(target.x, target.y, half_height);
    let base = arm_base_world(model, robot);
    let local = base.inverse().transform_point(&world_target);
    let q = reach_point(model, &local).map_err(|_| ArmError::Unreachable)?;
    robot.arm_joints = q;
    robot.gripper_opening = model.max_opening;
    robot.held_object = None;
    robot.held_offset = None;
    robot.held_rest_rotation = None;
    let obj = &mut scene.objects[idx];
    obj.pose = Pose3::new(rest, world_target);
    Ok(())
}

/// Rotation with a roll about the approach axis, used by tests and fixtures.
pub fn with_roll(rotation: &nalgebra::Matrix3<f64>, roll: f64) -> nalgebra::Matrix3<f64> {
    rotation * rot_x(roll)
}

/// Uniformly samples a joint state within limits.
pub fn random_joints<R: Rng>(model: &ArmModel, rng: &mut R) -> JointState {
    let mut q = [0.0; 4];
    for (v, [lo, hi]) in q.iter_mut().zip(model.joint_limits.iter()) {
        *v = rng.gen_range(*lo..=*hi);
    }
    JointState(q)
}
