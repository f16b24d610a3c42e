use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::{render, CameraId, SensorFrame};
use super::{Pose2, Posture, RobotState, Scenario, WorldScene};
use crate::arm::{self, ArmError, GraspOutcome, JointState};
use crate::geometry::{wrap_angle, Pose3, Vec3};
use crate::world::RobotConfig;

/// Rolling distance per unit of `impulse / mass` (s).
pub const ROLL_GAIN: f64 = 0.5;
/// Boxes and cylinders slide only at or above this slip coefficient.
pub const SLIDE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseCommand {
    /// m/s, along the heading.
    pub v: f64,
    /// rad/s, counter-clockwise positive.
    pub omega: f64,
}

impl BaseCommand {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn stop() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.v == 0.0 && self.omega == 0.0
    }
}

/// One tick worth of actuator commands; `None` leaves an actuator alone.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub base: Option<BaseCommand>,
    pub arm_target: Option<JointState>,
    pub gripper: Option<f64>,
    pub posture: Option<Posture>,
}

impl Command {
    pub fn base(v: f64, omega: f64) -> Self {
        Self {
            base: Some(BaseCommand::new(v, omega)),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_none() && self.arm_target.is_none() && self.gripper.is_none() && self.posture.is_none()
    }
}

/// Advances the robot by `dt` seconds.
///
/// The base is a unicycle saturated at the configured speed limits. A move
/// whose end point falls in an occupied (or off-grid) cell keeps the old
/// position while the heading still integrates. The base does not translate
/// or turn while sitting. Arm joints move toward their target at the joint
/// speed limit.
pub fn step(
    scene: &WorldScene,
    robot: &RobotState,
    command: &Command,
    dt: f64,
    limits: &RobotConfig,
    arm_model: &arm::ArmModel,
) -> RobotState {
    assert!(dt > 0.0, "dt must be positive");
    let mut next = robot.clone();
    if let Some(p) = command.posture {
        next.posture = p;
    }
    if let Some(b) = command.base {
        if robot.posture == Posture::Standing && next.posture == Posture::Standing {
            let v = b.v.clamp(-limits.max_linear_speed, limits.max_linear_speed);
            let w = b.omega.clamp(-limits.max_angular_speed, limits.max_angular_speed);
            let th = robot.base.heading;
            let x = robot.base.x + v * th.cos() * dt;
            let y = robot.base.y + v * th.sin() * dt;
            if scene.grid.is_free_point(x, y) {
                next.base.x = x;
                next.base.y = y;
            }
            next.base.heading = wrap_angle(th + w * dt);
        }
    }
    if let Some(target) = command.arm_target {
        let target = arm_model.clamp(&target);
        next.arm_joints = robot
            .arm_joints
            .step_toward(&target, arm_model.max_joint_speed * dt);
    }
    if let Some(g) = command.gripper {
        next.gripper_opening = g.clamp(0.0, arm_model.max_opening);
    }
    next
}

/// The single writer of `(scene, robot)`; every other component reads snapshots.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub scenario: Scenario,
    pub scene: WorldScene,
    pub robot: RobotState,
    pub time: f64,
    pub tick: u64,
    pub seed: u64,
    /// Last commanded arm target; the arm keeps moving toward it.
    pub arm_setpoint: Option<JointState>,
    exec_rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let robot = RobotState::new(
            scenario.robot.home,
            scenario.arm.home,
            scenario.arm.max_opening,
        );
        Self {
            scene: scenario.scene.clone(),
            scenario,
            robot,
            time: 0.0,
            tick: 0,
            seed,
            arm_setpoint: None,
            exec_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6A09_E667_F3BC_C908),
        }
    }

    pub fn apply(&mut self, command: &Command, dt: f64) {
        if command.arm_target.is_some() {
            self.arm_setpoint = command.arm_target;
        }
        let effective = Command {
            arm_target: self.arm_setpoint,
            ..command.clone()
        };
        self.robot = step(
            &self.scene,
            &self.robot,
            &effective,
            dt,
            &self.scenario.robot,
            &self.scenario.arm,
        );
        self.sync_held_object();
        self.time += dt;
        self.tick += 1;
    }

    /// Moves a held object along with the end effector.
    pub fn sync_held_object(&mut self) {
        if let (Some(id), Some(offset)) = (&self.robot.held_object, self.robot.held_offset) {
            let ee = arm::arm_base_world(&self.scenario.arm, &self.robot)
                .compose(&arm::fk_unchecked(&self.scenario.arm, &self.robot.arm_joints));
            if let Some(i) = self.scene.object_index(id) {
                self.scene.objects[i].pose = ee.compose(&offset);
            }
        }
    }

    pub fn render(&self, camera: CameraId) -> SensorFrame {
        render(
            &self.scene,
            &self.robot,
            &self.scenario.cameras,
            &self.scenario.arm,
            camera,
            self.scenario.noise.depth_sigma,
            self.seed,
            self.tick,
        )
    }

    /// Base pose as reported by localization (true pose plus Gaussian noise).
    pub fn localized_base(&self) -> Pose2 {
        let sigma = self.scenario.noise.localization_sigma;
        if sigma <= 0.0 {
            return self.robot.base;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.rotate_left(17) ^ self.tick);
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        Pose2::new(
            self.robot.base.x + n.sample(&mut rng),
            self.robot.base.y + n.sample(&mut rng),
            self.robot.base.heading,
        )
    }

    pub fn execute_grasp(&mut self, grasp_pose_base: &Pose3, width: f64) -> Result<GraspOutcome, ArmError> {
        let out = arm::execute_grasp(
            &mut self.scene,
            &mut self.robot,
            &self.scenario.arm,
            &self.scenario.physics,
            grasp_pose_base,
            width,
            self.scenario.noise.execution_sigma,
            &mut self.exec_rng,
        );
        self.arm_setpoint = Some(self.robot.arm_joints);
        self.sync_held_object();
        out
    }

    pub fn place(&mut self, target: &Vec3) -> Result<(), ArmError> {
        arm::place(&mut self.scene, &mut self.robot, &self.scenario.arm, target)?;
        self.arm_setpoint = Some(self.robot.arm_joints);
        Ok(())
    }

    /// Opens the gripper, dropping any held object straight onto the floor.
    pub fn release(&mut self) {
        if let Some(id) = self.robot.held_object.take() {
            if let Some(i) = self.scene.object_index(&id) {
                let rest = self
                    .robot
                    .held_rest_rotation
                    .unwrap_or(self.scene.objects[i].pose.rotation);
                let obj = &mut self.scene.objects[i];
                let z = obj.shape.half_height(&rest);
                obj.pose = Pose3::new(rest, Vec3::new(obj.pose.translation.x, obj.pose.translation.y, z));
            }
        }
        self.robot.held_offset = None;
        self.robot.held_rest_rotation = None;
        self.robot.gripper_opening = self.scenario.arm.max_opening;
    }

    /// Object position in the robot base frame as `(forward, right)` meters.
    pub fn object_offset(&self, object_id: &str) -> Option<(f64, f64)> {
        let obj = self.scene.object(object_id)?;
        let local = self.robot.base.to_pose3().inverse().transform_point(&obj.pose.translation);
        Some((local.x, -local.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::OccupancyGrid;

    fn limits() -> RobotConfig {
        RobotConfig {
            home: Pose2::default(),
            place_target: [0.0; 3],
            max_linear_speed: 1.0,
            max_angular_speed: 2.0,
            posture_time: 1.0,
        }
    }

    fn scene() -> WorldScene {
        let mut grid = OccupancyGrid::free(20, 20, 0.1);
        grid.set_occupied((10, 5), true);
        WorldScene {
            rooms: vec![],
            objects: vec![],
            grid,
            home_pose: Pose2::default(),
            place_target: Vec3::zeros(),
        }
    }

    fn robot_at(x: f64, y: f64, th: f64) -> RobotState {
        RobotState::new(Pose2::new(x, y, th), JointState::zeros(), 0.07)
    }

    #[test]
    fn zero_command_is_identity() {
        let r = robot_at(0.5, 0.5, 0.3);
        let next = step(&scene(), &r, &Command::base(0.0, 0.0), 0.1, &limits(), &Default::default());
        assert_eq!(next, r);
    }

    #[test]
    fn unicycle_advances() {
        let r = robot_at(0.15, 0.55, 0.0);
        let next = step(&scene(), &r, &Command::base(0.5, 0.0), 1.0, &limits(), &Default::default());
        assert!((next.base.x - 0.65).abs() < 1e-12);
        assert_eq!(next.base.y, 0.55);
    }

    #[test]
    fn wall_clips_position_not_heading() {
        let r = robot_at(0.95, 0.55, 0.0);
        let next = step(&scene(), &r, &Command::base(0.1, 0.5), 1.0, &limits(), &Default::default());
        assert_eq!((next.base.x, next.base.y), (0.95, 0.55));
        assert!((next.base.heading - 0.5).abs() < 1e-12);
    }

    #[test]
    fn arm_is_rate_limited() {
        let m = arm::ArmModel::default();
        let r = robot_at(0.5, 0.5, 0.0);
        let cmd = Command {
            arm_target: Some(JointState::new(1.0, 0.0, 0.0, 0.0)),
            ..Default::default()
        };
        let next = step(&scene(), &r, &cmd, 0.1, &limits(), &m);
        assert!((next.arm_joints.0[0] - m.max_joint_speed * 0.1).abs() < 1e-12);
    }
}
