use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{OccupancyGrid, Pose2, Room, SceneObject, WorldScene};
use crate::arm::{camera_in_ee_rotation, ArmModel, GraspPhysics};
use crate::geometry::{rot_y, CameraIntrinsics, Pose3, Vec3};
use crate::nav::NavConfig;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario validation error: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Zero-mean Gaussian depth noise (m), applied after rendering.
    pub depth_sigma: f64,
    /// Per-edge Gaussian jitter of detection and tracker boxes (px).
    pub detection_jitter_px: f64,
    /// Localization noise on the base position reported to navigation (m).
    pub localization_sigma: f64,
    /// Gripper placement error per axis when a grasp is executed (m).
    pub execution_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            depth_sigma: 0.003,
            detection_jitter_px: 2.0,
            localization_sigma: 0.005,
            execution_sigma: 0.003,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            depth_sigma: 0.0,
            detection_jitter_px: 0.0,
            localization_sigma: 0.0,
            execution_sigma: 0.0,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let all = [
            self.depth_sigma,
            self.detection_jitter_px,
            self.localization_sigma,
            self.execution_sigma,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err("noise values must be finite and non-negative".into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontCamera {
    pub intrinsics: CameraIntrinsics,
    /// Camera pose in the robot base frame.
    #[serde(default = "default_front_mount")]
    pub mount: Pose3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperCamera {
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub front: FrontCamera,
    pub gripper: GripperCamera,
}

/// 0.25 m above the base origin, pitched 15° down.
pub fn default_front_mount() -> Pose3 {
    Pose3::new(
        rot_y(15f64.to_radians()) * camera_in_ee_rotation(),
        Vec3::new(0.0, 0.0, 0.25),
    )
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            front: FrontCamera {
                intrinsics: CameraIntrinsics {
                    fx: 170.0,
                    fy: 170.0,
                    cx: 160.0,
                    cy: 120.0,
                    width: 320,
                    height: 240,
                },
                mount: default_front_mount(),
            },
            gripper: GripperCamera {
                intrinsics: CameraIntrinsics {
                    fx: 260.0,
                    fy: 260.0,
                    cx: 160.0,
                    cy: 120.0,
                    width: 320,
                    height: 240,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub home: Pose2,
    /// World-frame drop-off point; z is ignored (objects rest on the floor).
    pub place_target: [f64; 3],
    #[serde(default = "default_max_linear")]
    pub max_linear_speed: f64,
    #[serde(default = "default_max_angular")]
    pub max_angular_speed: f64,
    /// Seconds to sit down or stand up.
    #[serde(default = "default_posture_time")]
    pub posture_time: f64,
}

fn default_max_linear() -> f64 {
    0.5
}
fn default_max_angular() -> f64 {
    1.5
}
fn default_posture_time() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoomDoc {
    name: String,
    entry_waypoint: [f64; 2],
    scan_center: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    resolution: f64,
    #[serde(default)]
    origin: [f64; 2],
    rows: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    version: u32,
    #[serde(default)]
    name: String,
    #[serde(default)]
    seed: u64,
    rooms: Vec<RoomDoc>,
    objects: Vec<SceneObject>,
    grid: GridDoc,
    robot: RobotConfig,
    #[serde(default)]
    cameras: CameraRig,
    #[serde(default)]
    arm: ArmModel,
    #[serde(default)]
    noise: NoiseConfig,
    #[serde(default)]
    nav: NavConfig,
    #[serde(default)]
    physics: GraspPhysics,
}

/// A loaded scenario: the scene plus every robot and noise parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub scene: WorldScene,
    pub robot: RobotConfig,
    pub cameras: CameraRig,
    pub arm: ArmModel,
    pub noise: NoiseConfig,
    pub nav: NavConfig,
    pub physics: GraspPhysics,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let doc: ScenarioDoc = serde_json::from_str(text)?;
        Self::from_doc(doc)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            ScenarioError::Validation(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_json(&text)
    }

    fn from_doc(doc: ScenarioDoc) -> Result<Self, ScenarioError> {
        let fail = |m: String| ScenarioError::Validation(m);
        if doc.version != SCENARIO_VERSION {
            return Err(fail(format!(
                "version: expected {SCENARIO_VERSION}, got {}",
                doc.version
            )));
        }
        if !(doc.grid.resolution > 0.0) {
            return Err(fail("grid.resolution must be positive".into()));
        }
        let grid = OccupancyGrid::from_rows(&doc.grid.rows, doc.grid.resolution, doc.grid.origin)
            .map_err(fail)?;

        let mut names = HashSet::new();
        let mut rooms = Vec::with_capacity(doc.rooms.len());
        for (i, r) in doc.rooms.into_iter().enumerate() {
            if !names.insert(r.name.clone()) {
                return Err(fail(format!("rooms[{i}].name: duplicate room name '{}'", r.name)));
            }
            for (field, p) in [("entry_waypoint", r.entry_waypoint), ("scan_center", r.scan_center)] {
                if !grid.is_free_point(p[0], p[1]) {
                    return Err(fail(format!(
                        "rooms[{i}].{field}: ({}, {}) is not a free grid cell",
                        p[0], p[1]
                    )));
                }
            }
            rooms.push(Room {
                name: r.name,
                entry_waypoint: r.entry_waypoint,
                scan_center: r.scan_center,
            });
        }

        let mut ids = HashSet::new();
        for (i, o) in doc.objects.iter().enumerate() {
            if !ids.insert(o.id.clone()) {
                return Err(fail(format!("objects[{i}].id: duplicate object id '{}'", o.id)));
            }
            o.validate().map_err(fail)?;
        }
        if doc.objects.len() >= u16::MAX as usize {
            return Err(fail("objects: too many objects".into()));
        }
        let home = doc.robot.home;
        if !grid.is_free_point(home.x, home.y) {
            return Err(fail("robot.home is not a free grid cell".into()));
        }
        if !(doc.robot.max_linear_speed > 0.0 && doc.robot.max_angular_speed > 0.0) {
            return Err(fail("robot speed limits must be positive".into()));
        }
        if !(doc.robot.posture_time >= 0.0) {
            return Err(fail("robot.posture_time must be non-negative".into()));
        }
        doc.cameras
            .front
            .intrinsics
            .validate()
            .map_err(|e| fail(format!("cameras.front.intrinsics: {e}")))?;
        doc.cameras
            .gripper
            .intrinsics
            .validate()
            .map_err(|e| fail(format!("cameras.gripper.intrinsics: {e}")))?;
        doc.arm.validate().map_err(fail)?;
        doc.noise.validate().map_err(|e| fail(format!("noise: {e}")))?;
        doc.nav.validate().map_err(|e| fail(format!("nav: {e}")))?;

        let p = doc.robot.place_target;
        Ok(Scenario {
            name: doc.name,
            seed: doc.seed,
            scene: WorldScene {
                rooms,
                objects: doc.objects,
                grid,
                home_pose: home,
                place_target: Vec3::new(p[0], p[1], p[2]),
            },
            robot: doc.robot,
            cameras: doc.cameras,
            arm: doc.arm,
            noise: doc.noise,
            nav: doc.nav,
            physics: doc.physics,
        })
    }
}
