//! Scenario state: rooms, object primitives, the occupancy grid and the robot.

pub mod render;
mod scenario;
mod sim;

pub use render::{render, CameraId, LabelImage, SensorFrame};
pub use scenario::{CameraRig, FrontCamera, GripperCamera, NoiseConfig, RobotConfig, Scenario, ScenarioError, SCENARIO_VERSION};
pub use sim::{step, BaseCommand, Command, Simulator, SLIDE_THRESHOLD, ROLL_GAIN};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::JointState;
use crate::geometry::{rot_z, Pose3, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown object {0}")]
    UnknownObject(String),
}

/// Planar pose on the floor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn to_pose3(&self) -> Pose3 {
        Pose3::new(rot_z(self.heading), Vec3::new(self.x, self.y, 0.0))
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        ((p[0] - self.x).powi(2) + (p[1] - self.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Full side lengths along local x, y, z.
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    /// Axis along local z.
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            Shape::Box { size } => size.iter().all(|s| *s > 0.0),
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err("dimensions must be positive".into())
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Box { size } => 0.5 * (size[0].powi(2) + size[1].powi(2) + size[2].powi(2)).sqrt(),
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, height } => (radius * radius + height * height / 4.0).sqrt(),
        }
    }

    /// Half of the vertical extent when resting with local rotation `r` (world).
    pub fn half_height(&self, r: &nalgebra::Matrix3<f64>) -> f64 {
        match *self {
            Shape::Box { size } => (0..3).map(|i| r[(2, i)].abs() * size[i] / 2.0).sum(),
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, height } => {
                let c = r[(2, 2)].abs();
                c * height / 2.0 + (1.0 - c * c).max(0.0).sqrt() * radius
            }
        }
    }

    /// Parameter interval `[t0, t1]` where the line `o + t·d` (local frame)
    /// lies inside the shape, if any.
    pub fn line_interval(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        match *self {
            Shape::Box { size } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    let h = size[i] / 2.0;
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > h {
                            return None;
                        }
                    } else {
                        let a = (-h - o[i]) / d[i];
                        let b = (h - o[i]) / d[i];
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                (t0 <= t1).then_some((t0, t1))
            }
            Shape::Sphere { radius } => {
                let a = d.dot(d);
                let b = 2.0 * o.dot(d);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some(((-b - s) / (2.0 * a), (-b + s) / (2.0 * a)))
            }
            Shape::Cylinder { radius, height } => {
                let h = height / 2.0;
                // Slab along z.
                let (mut t0, mut t1) = if d.z.abs() < 1e-15 {
                    if o.z.abs() > h {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let a = (-h - o.z) / d.z;
                    let b = (h - o.z) / d.z;
                    (a.min(b), a.max(b))
                };
                // Infinite cylinder in xy.
                let a = d.x * d.x + d.y * d.y;
                let c = o.x * o.x + o.y * o.y - radius * radius;
                if a < 1e-15 {
                    if c > 0.0 {
                        return None;
                    }
                } else {
                    let b = 2.0 * (o.x * d.x + o.y * d.y);
                    let disc = b * b - 4.0 * a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    t0 = t0.max((-b - s) / (2.0 * a));
                    t1 = t1.min((-b + s) / (2.0 * a));
                }
                (t0 <= t1).then_some((t0, t1))
            }
        }
    }

    /// Outward unit normal at a surface point given in the local frame.
    pub fn normal_at(&self, p: &Vec3) -> Vec3 {
        match *self {
            Shape::Box { size } => {
                let mut best = 0;
                let mut best_gap = f64::INFINITY;
                for i in 0..3 {
                    let gap = (size[i] / 2.0 - p[i].abs()).abs();
                    if gap < best_gap {
                        best_gap = gap;
                        best = i;
                    }
                }
                let mut n = Vec3::zeros();
                n[best] = p[best].signum();
                n
            }
            Shape::Sphere { .. } => p.normalize(),
            Shape::Cylinder { radius, height } => {
                let side_gap = (radius - (p.x * p.x + p.y * p.y).sqrt()).abs();
                let cap_gap = (height / 2.0 - p.z.abs()).abs();
                if cap_gap < side_gap {
                    Vec3::new(0.0, 0.0, p.z.signum())
                } else {
                    Vec3::new(p.x, p.y, 0.0).normalize()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: String,
    pub class_name: String,
    pub shape: Shape,
    /// World frame.
    pub pose: Pose3,
    /// kg
    pub mass: f64,
    /// 0 = grippy, 1 = maximally slippery.
    pub slip_coefficient: f64,
    #[serde(default = "default_true")]
    pub movable: bool,
}

fn default_true() -> bool {
    true
}

impl SceneObject {
    pub fn validate(&self) -> Result<(), String> {
        self.shape
            .validate()
            .map_err(|e| format!("objects[{}].shape: {e}", self.id))?;
        if !(self.mass > 0.0) {
            return Err(format!("objects[{}].mass must be positive", self.id));
        }
        if !(0.0..=1.0).contains(&self.slip_coefficient) {
            return Err(format!("objects[{}].slip_coefficient must lie in [0, 1]", self.id));
        }
        Ok(())
    }

    /// First ray hit `t > 0` for the world-frame ray `o + t·d`.
    pub fn ray_hit(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let to_center = self.pose.translation - o;
        let tc = to_center.dot(d) / d.dot(d);
        let closest = to_center - tc * d;
        let r = self.shape.bounding_radius();
        if closest.norm_squared() > r * r {
            return None;
        }
        let inv = self.pose.inverse();
        let ol = inv.transform_point(o);
        let dl = inv.transform_vector(d);
        let (t0, t1) = self.shape.line_interval(&ol, &dl)?;
        if t0 > 1e-9 {
            Some(t0)
        } else if t1 > 1e-9 {
            // Origin inside the object.
            None
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub name: String,
    pub entry_waypoint: [f64; 2],
    pub scan_center: [f64; 2],
}

/// Cell coordinate: `(col, row)`; row 0 is the lowest y.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: f64,
    pub origin: [f64; 2],
    pub width: usize,
    pub height: usize,
    /// Row-major, `true` = occupied.
    pub occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn free(width: usize, height: usize, resolution: f64) -> Self {
        Self {
            resolution,
            origin: [0.0, 0.0],
            width,
            height,
            occupied: vec![false; width * height],
        }
    }

    /// Parses rows of `.` (free) and `#` (occupied); `rows[0]` is row 0.
    pub fn from_rows(rows: &[String], resolution: f64, origin: [f64; 2]) -> Result<Self, String> {
        let height = rows.len();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        if height == 0 || width == 0 {
            return Err("grid.rows must be non-empty".into());
        }
        let mut occupied = Vec::with_capacity(width * height);
        for (j, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(format!("grid.rows[{j}] has a different length"));
            }
            for c in row.chars() {
                occupied.push(match c {
                    '.' => false,
                    '#' => true,
                    other => return Err(format!("grid.rows[{j}] has invalid cell '{other}'")),
                });
            }
        }
        Ok(Self {
            resolution,
            origin,
            width,
            height,
            occupied,
        })
    }

    pub fn to_rows(&self) -> Vec<String> {
        (0..self.height)
            .map(|j| {
                (0..self.width)
                    .map(|i| if self.occupied[j * self.width + i] { '#' } else { '.' })
                    .collect()
            })
            .collect()
    }

    pub fn set_occupied(&mut self, cell: Cell, occ: bool) {
        self.occupied[cell.1 * self.width + cell.0] = occ;
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        cell.0 < self.width && cell.1 < self.height && !self.occupied[cell.1 * self.width + cell.0]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        let i = ((x - self.origin[0]) / self.resolution).floor();
        let j = ((y - self.origin[1]) / self.resolution).floor();
        if i < 0.0 || j < 0.0 || i >= self.width as f64 || j >= self.height as f64 {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    pub fn cell_center(&self, cell: Cell) -> [f64; 2] {
        [
            self.origin[0] + (cell.0 as f64 + 0.5) * self.resolution,
            self.origin[1] + (cell.1 as f64 + 0.5) * self.resolution,
        ]
    }

    /// World point is inside the grid and on a free cell.
    pub fn is_free_point(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|c| self.is_free(c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldScene {
    pub rooms: Vec<Room>,
    pub objects: Vec<SceneObject>,
    pub grid: OccupancyGrid,
    pub home_pose: Pose2,
    pub place_target: Vec3,
}

impl WorldScene {
    pub fn room(&self, name: &str) -> Option<&Room> {
        self.rooms.iter().find(|r| r.name == name)
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    /// Pushes an object with `contact_impulse` (N·s, world frame).
    ///
    /// Spheres roll `ROLL_GAIN · |J| / m` along the horizontal impulse
    /// direction. Boxes and cylinders slide `ROLL_GAIN · slip · |J| / m` but only
    /// when their slip coefficient reaches `SLIDE_THRESHOLD`.
    pub fn perturb_object(&mut self, object_id: &str, contact_impulse: Vec3) -> Result<(), WorldError> {
        let obj = self
            .objects
            .iter_mut()
            .find(|o| o.id == object_id)
            .ok_or_else(|| WorldError::UnknownObject(object_id.to_string()))?;
        let horizontal = Vec3::new(contact_impulse.x, contact_impulse.y, 0.0);
        let magnitude = horizontal.norm();
        if !obj.movable || magnitude == 0.0 {
            return Ok(());
        }
        let dir = horizontal / magnitude;
        let distance = match obj.shape {
            Shape::Sphere { .. } => ROLL_GAIN * magnitude / obj.mass,
            _ if obj.slip_coefficient >= SLIDE_THRESHOLD => {
                ROLL_GAIN * obj.slip_coefficient * magnitude / obj.mass
            }
            _ => 0.0,
        };
        obj.pose.translation += dir * distance;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Standing,
    Sitting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base: Pose2,
    pub posture: Posture,
    pub arm_joints: JointState,
    pub gripper_opening: f64,
    pub held_object: Option<String>,
    /// Held object's pose in the end-effector frame.
    pub held_offset: Option<Pose3>,
    /// World rotation the held object had when picked up.
    pub held_rest_rotation: Option<nalgebra::Matrix3<f64>>,
}

impl RobotState {
    pub fn new(base: Pose2, arm_joints: JointState, gripper_opening: f64) -> Self {
        Self {
            base,
            posture: Posture::Standing,
            arm_joints,
            gripper_opening,
            held_object: None,
            held_offset: None,
            held_rest_rotation: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_chord_through_center() {
        let s = Shape::Sphere { radius: 0.5 };
        let (a, b) = s.line_interval(&Vec3::new(-2.0, 0.0, 0.0), &Vec3::x()).unwrap();
        assert!((a - 1.5).abs() < 1e-12 && (b - 2.5).abs() < 1e-12);
        assert!(s.line_interval(&Vec3::new(-2.0, 0.6, 0.0), &Vec3::x()).is_none());
    }

    #[test]
    fn box_and_cylinder_chords() {
        let b = Shape::Box { size: [0.2, 0.4, 0.6] };
        let (t0, t1) = b.line_interval(&Vec3::new(0.0, -1.0, 0.0), &Vec3::y()).unwrap();
        assert!((t1 - t0 - 0.4).abs() < 1e-12);
        let c = Shape::Cylinder { radius: 0.1, height: 0.5 };
        let (t0, t1) = c.line_interval(&Vec3::new(0.0, 0.0, 2.0), &-Vec3::z()).unwrap();
        assert!((t0 - 1.75).abs() < 1e-12 && (t1 - 2.25).abs() < 1e-12);
        let (t0, t1) = c.line_interval(&Vec3::new(-1.0, 0.05, 0.0), &Vec3::x()).unwrap();
        assert!((t1 - t0 - 2.0 * (0.01f64 - 0.0025).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn grid_rows_round_trip() {
        let rows = vec!["..#".to_string(), "#..".to_string()];
        let g = OccupancyGrid::from_rows(&rows, 0.1, [0.0, 0.0]).unwrap();
        assert!(!g.is_free((2, 0)));
        assert!(!g.is_free((0, 1)));
        assert!(g.is_free((1, 1)));
        assert!(!g.is_free((3, 0)));
        assert_eq!(g.to_rows(), rows);
        assert_eq!(g.cell_of(0.25, 0.15), Some((2, 1)));
        assert!(OccupancyGrid::from_rows(&["..".into(), "...".into()], 0.1, [0.0, 0.0]).is_err());
    }

    fn scene_with(obj: SceneObject) -> WorldScene {
        WorldScene {
            rooms: vec![],
            objects: vec![obj],
            grid: OccupancyGrid::free(10, 10, 0.1),
            home_pose: Pose2::default(),
            place_target: Vec3::zeros(),
        }
    }

    fn golf_ball() -> SceneObject {
        SceneObject {
            id: "golf".into(),
            class_name: "golf_ball".into(),
            shape: Shape::Sphere { radius: 0.021 },
            pose: Pose3::from_translation(0.5, 0.5, 0.021),
            mass: 0.046,
            slip_coefficient: 0.8,
            movable: true,
        }
    }

    fn charger() -> SceneObject {
        SceneObject {
            id: "charger".into(),
            class_name: "charger".into(),
            shape: Shape::Box { size: [0.09, 0.04, 0.03] },
            pose: Pose3::from_translation(0.5, 0.5, 0.015),
            mass: 0.08,
            slip_coefficient: 0.1,
            movable: true,
        }
    }

    #[test]
    fn perturb_rules() {
        let mut s = scene_with(golf_ball());
        let before = s.objects[0].pose;
        s.perturb_object("golf", Vec3::zeros()).unwrap();
        assert_eq!(s.objects[0].pose, before);
        let impulse = Vec3::new(0.0, 0.004, 0.0);
        s.perturb_object("golf", impulse).unwrap();
        let moved = (s.objects[0].pose.translation - before.translation).norm();
        let expect = ROLL_GAIN * 0.004 / 0.046;
        assert!((moved - expect).abs() < 1e-12);
        assert!(moved >= 0.01);

        let mut s = scene_with(charger());
        let before = s.objects[0].pose;
        s.perturb_object("charger", impulse).unwrap();
        assert_eq!(s.objects[0].pose, before);
        assert_eq!(
            s.perturb_object("nope", impulse),
            Err(WorldError::UnknownObject("nope".into()))
        );
    }
}
