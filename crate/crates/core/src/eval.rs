//! Monte-Carlo harnesses: repeated grasp trials from a sampled sit pose and
//! full approach runs from the home pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::GraspStatus;
use crate::geometry::{rot_z, Vec3};
use crate::metrics::{MetricsRecord, SelectionMethod};
use crate::mission::{pick_script, Action, EventKind, Mission, MissionRunner, ScheduledEvent, StateKind};
use crate::world::{CameraId, Posture, Pose2, Scenario, SceneObject, Shape, Simulator};

/// Sit-pose window: object position in the base frame, `(forward, right)` m.
pub const SIT_FORWARD: [f64; 2] = [0.24, 0.27];
pub const SIT_RIGHT: [f64; 2] = [0.05, 0.16];
/// Object long-axis yaw spread around the arm-radial direction (rad).
pub const YAW_SPREAD: f64 = 15.0 * std::f64::consts::PI / 180.0;
/// Every n-th trial selects the grasp by a confirmed drag instead of a click.
pub const DRAG_EVERY: u32 = 6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("scenario has no objects")]
    NoObjects,
    #[error("no free sit pose found for {0}")]
    NoSitPose(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub trials: u32,
    pub seed: u64,
    /// Run the whole mission from home instead of starting beside the object.
    pub full: bool,
    /// Overrides the grasp execution noise (m per axis).
    pub noise_sigma: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 12,
            seed: 42,
            full: false,
            noise_sigma: None,
        }
    }
}

/// One object per class, in first-appearance order.
fn class_representatives(scenario: &Scenario) -> Vec<SceneObject> {
    let mut out: Vec<SceneObject> = Vec::new();
    for o in &scenario.scene.objects {
        if !out.iter().any(|r| r.class_name == o.class_name) {
            out.push(o.clone());
        }
    }
    out
}

fn room_of(scenario: &Scenario, object: &SceneObject) -> Option<String> {
    let p = object.pose.translation;
    scenario
        .scene
        .rooms
        .iter()
        .min_by(|a, b| {
            let da = (a.scan_center[0] - p.x).hypot(a.scan_center[1] - p.y);
            let db = (b.scan_center[0] - p.x).hypot(b.scan_center[1] - p.y);
            da.total_cmp(&db)
        })
        .map(|r| r.name.clone())
}

/// World yaw of the object's long horizontal axis, if it has one.
fn long_axis_yaw(object: &SceneObject) -> Option<f64> {
    let r = &object.pose.rotation;
    let axis = match object.shape {
        Shape::Box { size } => {
            if size[0] >= size[1] {
                r.column(0).into_owned()
            } else {
                r.column(1).into_owned()
            }
        }
        Shape::Cylinder { .. } => r.column(2).into_owned(),
        Shape::Sphere { .. } => return None,
    };
    (axis.x.hypot(axis.y) > 0.5).then(|| axis.y.atan2(axis.x))
}

fn trial_seeds(master: u64, n: u32) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.gen()).collect()
}

/// Places the robot sitting beside `object_id` with the object at a sampled
/// offset inside the sit window, and turns the object's long axis toward the
/// arm. Returns the simulator and the sampled `(forward, right)` offset.
pub fn staged_simulator(scenario: &Scenario, object_id: &str, seed: u64) -> Result<Simulator, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = Simulator::new(scenario.clone(), seed);
    let idx = sim
        .scene
        .object_index(object_id)
        .ok_or_else(|| EvalError::NoSitPose(object_id.to_string()))?;
    let obj_pos = sim.scene.objects[idx].pose.translation;
    let forward = rng.gen_range(SIT_FORWARD[0]..=SIT_FORWARD[1]);
    let right = rng.gen_range(SIT_RIGHT[0]..=SIT_RIGHT[1]);
    let clear = crate::nav::inflate(&sim.scene.grid, sim.scenario.nav.clearance);
    let mut base = None;
    for _ in 0..64 {
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (s, c) = heading.sin_cos();
        // Object at local (forward, -right): world = base + R(heading)·local.
        let x = obj_pos.x - (c * forward + s * right);
        let y = obj_pos.y - (s * forward - c * right);
        if clear.is_free_point(x, y) {
            base = Some(Pose2::new(x, y, heading));
            break;
        }
    }
    let base = base.ok_or_else(|| EvalError::NoSitPose(object_id.to_string()))?;
    sim.robot.base = base;
    sim.robot.posture = Posture::Sitting;

    let arm_base = crate::arm::arm_base_world(&sim.scenario.arm, &sim.robot).translation;
    let radial = (obj_pos.y - arm_base.y).atan2(obj_pos.x - arm_base.x);
    let spread = rng.gen_range(-YAW_SPREAD..=YAW_SPREAD);
    let obj = &mut sim.scene.objects[idx];
    if let Some(yaw) = long_axis_yaw(obj) {
        // A long axis is symmetric; pick the representative nearest the radial.
        let target = radial + spread;
        let mut delta = crate::geometry::wrap_angle(target - yaw);
        if delta.abs() > std::f64::consts::FRAC_PI_2 {
            delta = crate::geometry::wrap_angle(delta + std::f64::consts::PI);
        }
        obj.pose.rotation = rot_z(delta) * obj.pose.rotation;
    }
    Ok(sim)
}

fn grasp_script(object_id: &str, drag: bool) -> Vec<ScheduledEvent> {
    let camera = CameraId::Gripper;
    let object = object_id.to_string();
    if drag {
        vec![
            ScheduledEvent::after(StateKind::AwaitGraspSelection, 0.5, Action::DragObject { camera, object }),
            ScheduledEvent::after(
                StateKind::AwaitDragConfirm,
                0.5,
                Action::Event {
                    event: EventKind::ConfirmDrag { accept: true },
                },
            ),
        ]
    } else {
        vec![ScheduledEvent::after(
            StateKind::AwaitGraspSelection,
            0.5,
            Action::ClickObject { camera, object },
        )]
    }
}

/// Runs until the first grasp outcome is recorded; `None` if the run ended first.
fn first_grasp(runner: &mut MissionRunner) -> Option<MetricsRecord> {
    runner.run_until(|m| !m.metrics.is_empty());
    runner.mission.metrics.first().cloned()
}

fn apply_noise(scenario: &Scenario, cfg: &EvalConfig) -> Scenario {
    let mut s = scenario.clone();
    if let Some(sigma) = cfg.noise_sigma {
        s.noise.execution_sigma = sigma;
    }
    s
}

/// Repeats the grasp phase `cfg.trials` times, cycling object classes.
pub fn run_eval(scenario: &Scenario, cfg: &EvalConfig) -> Result<Vec<MetricsRecord>, EvalError> {
    if cfg.trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let scenario = apply_noise(scenario, cfg);
    let objects = class_representatives(&scenario);
    if objects.is_empty() {
        return Err(EvalError::NoObjects);
    }
    let mut records = Vec::with_capacity(cfg.trials as usize);
    for (i, seed) in trial_seeds(cfg.seed, cfg.trials).into_iter().enumerate() {
        let trial = i as u32 + 1;
        let object = &objects[i % objects.len()];
        let drag = trial % DRAG_EVERY == 0;
        let mut runner = if cfg.full {
            let room = room_of(&scenario, object).ok_or(EvalError::NoObjects)?;
            let sim = Simulator::new(scenario.clone(), seed);
            MissionRunner::new(sim, Mission::default(), pick_script(&room, &object.id, drag))
        } else {
            let mut sim = staged_simulator(&scenario, &object.id, seed)?;
            let mut mission = Mission::default();
            // The gripper starts open, so the entry command has nothing left to do.
            let _ = mission.start_at_survey(&mut sim, &object.id);
            MissionRunner::new(sim, mission, grasp_script(&object.id, drag))
        };
        let offset = runner.sim.object_offset(&object.id).map(|(f, r)| [f, r]).unwrap_or_default();
        let record = first_grasp(&mut runner).unwrap_or(MetricsRecord {
            trial,
            object_class: object.class_name.clone(),
            method: if drag { SelectionMethod::Drag } else { SelectionMethod::Click },
            duration: runner.sim.time,
            status: GraspStatus::FailPlan,
            final_position: if cfg.full { runner.mission.sit_offset() } else { offset },
        });
        log::info!("trial {trial} {} {}", record.object_class, record.status.as_str());
        records.push(MetricsRecord { trial, ..record });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachResult {
    pub seed: u64,
    pub object_id: String,
    /// State the run reached: `Sitting` when the approach arrived.
    pub state: StateKind,
    /// Object position in the base frame on arrival, `(forward, right)` m.
    pub offset: [f64; 2],
    pub distance: f64,
    pub sim_time: f64,
}

impl ApproachResult {
    pub fn arrived(&self) -> bool {
        self.state == StateKind::Sitting
    }
}

/// Drives from home to the room of an object chosen by `seed`, selects it and
/// approaches until the robot sits down.
pub fn run_approach(scenario: &Scenario, seed: u64) -> ApproachResult {
    let objects = &scenario.scene.objects;
    let object = &objects[(seed as usize) % objects.len()];
    let room = room_of(scenario, object).unwrap_or_default();
    let sim = Simulator::new(scenario.clone(), seed);
    let script = pick_script(&room, &object.id, false);
    let mut runner = MissionRunner::new(sim, Mission::default(), script);
    runner.max_time = 120.0;
    runner.run_until(|m| m.state() == StateKind::Sitting);
    let [f, r] = runner.mission.sit_offset();
    let base = runner.sim.robot.base;
    let p = runner.sim.scene.object(&object.id).map(|o| o.pose.translation).unwrap_or_else(Vec3::zeros);
    ApproachResult {
        seed,
        object_id: object.id.clone(),
        state: runner.mission.state(),
        offset: [f, r],
        distance: (p.x - base.x).hypot(p.y - base.y),
        sim_time: runner.sim.time,
    }
}
