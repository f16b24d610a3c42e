//! Grid path planning, pure-pursuit path following, the scan rotation and the
//! PID visual-servo approach that ends with the robot sitting beside the object.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::ArmModel;
use crate::geometry::wrap_angle;
use crate::perception::MIN_VISIBLE_PIXELS;
use crate::world::{
    render, BaseCommand, CameraId, CameraRig, Cell, OccupancyGrid, Pose2, Posture, RobotState, WorldScene,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NavError {
    #[error("no path between the cells")]
    NoPath,
    #[error("cell {0:?} is occupied or off the grid")]
    CellOccupied(Cell),
    #[error("object {0} is not visible from the gripper camera after sitting")]
    ObjectNotVisibleAfterSit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_clamp: f64,
    /// Symmetric output saturation.
    pub output_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
            integral_clamp: 1.0,
            output_limit: 1.0,
        }
    }
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64, integral_clamp: f64, output_limit: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            integral_clamp,
            output_limit,
        }
    }

    fn validate(&self, channel: &str) -> Result<(), String> {
        if [self.kp, self.ki, self.kd].iter().any(|g| !(*g >= 0.0)) {
            return Err(format!("{channel} gains must be non-negative"));
        }
        if !(self.integral_clamp > 0.0 && self.output_limit > 0.0) {
            return Err(format!("{channel} integral_clamp and output_limit must be positive"));
        }
        Ok(())
    }
}

/// PID memory for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pid {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

impl Pid {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn update(&mut self, gains: &PidGains, error: f64, dt: f64) -> f64 {
        let derivative = match self.prev_error {
            Some(p) if dt > 0.0 => (error - p) / dt,
            _ => 0.0,
        };
        self.prev_error = Some(error);
        let candidate = (self.integral + error * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
        let raw = gains.kp * error + gains.ki * candidate + gains.kd * derivative;
        // Conditional integration: only keep the new integral while unsaturated
        // or when it pulls the output back from the limit.
        if raw.abs() <= gains.output_limit || candidate.abs() < self.integral.abs() {
            self.integral = candidate;
        }
        raw.clamp(-gains.output_limit, gains.output_limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproachTarget {
    /// Tracker distance (median z-depth in the front camera) to stop at (m).
    pub stop_distance: f64,
    /// How far right of the robot's centerline the object should settle (m).
    pub lateral_offset: f64,
    /// Allowed |distance − stop_distance| for arrival (m).
    pub tolerance: f64,
    /// Allowed pixel error from the lateral setpoint for arrival.
    pub pixel_threshold: f64,
    /// Consecutive in-tolerance ticks before arrival.
    pub arrive_ticks: u32,
}

impl Default for ApproachTarget {
    fn default() -> Self {
        Self {
            stop_distance: 0.28,
            lateral_offset: 0.10,
            tolerance: 0.02,
            pixel_threshold: 10.0,
            arrive_ticks: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavConfig {
    /// Linear channel: m/s from meters of distance error.
    pub linear: PidGains,
    /// Angular channel: rad/s from pixel error normalized by image width.
    pub angular: PidGains,
    pub approach: ApproachTarget,
    /// Seconds per scan revolution.
    pub scan_period: f64,
    pub lookahead: f64,
    pub goal_tolerance: f64,
    pub cruise_speed: f64,
    pub heading_gain: f64,
    pub max_turn_rate: f64,
    /// Obstacle inflation used when planning room-to-room paths (m).
    pub clearance: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            linear: PidGains::new(0.8, 0.05, 0.1, 0.5, 0.3),
            angular: PidGains::new(1.2, 0.0, 0.2, 0.5, 1.0),
            approach: ApproachTarget::default(),
            scan_period: 12.0,
            lookahead: 0.3,
            goal_tolerance: 0.15,
            cruise_speed: 0.4,
            heading_gain: 2.0,
            max_turn_rate: 1.2,
            clearance: 0.2,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.linear.validate("linear")?;
        self.angular.validate("angular")?;
        let a = &self.approach;
        if !(a.stop_distance > 0.0 && a.tolerance > 0.0 && a.pixel_threshold > 0.0) {
            return Err("approach stop_distance, tolerance and pixel_threshold must be positive".into());
        }
        if a.arrive_ticks == 0 {
            return Err("approach.arrive_ticks must be at least 1".into());
        }
        for (name, v) in [
            ("scan_period", self.scan_period),
            ("lookahead", self.lookahead),
            ("goal_tolerance", self.goal_tolerance),
            ("cruise_speed", self.cruise_speed),
            ("heading_gain", self.heading_gain),
            ("max_turn_rate", self.max_turn_rate),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.clearance >= 0.0) {
            return Err("clearance must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: Cell,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, then on g (prefer deeper), then cell for determinism.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&other.g))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Free 8-connected neighbors with step costs. Diagonal moves may not cut a
/// corner: both orthogonally adjacent cells must be free.
pub fn neighbors(grid: &OccupancyGrid, c: Cell) -> Vec<(Cell, f64)> {
    let mut out = Vec::with_capacity(8);
    for dj in -1i64..=1 {
        for di in -1i64..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let (i, j) = (c.0 as i64 + di, c.1 as i64 + dj);
            if i < 0 || j < 0 {
                continue;
            }
            let n = (i as usize, j as usize);
            if !grid.is_free(n) {
                continue;
            }
            if di != 0 && dj != 0 {
                let a = ((c.0 as i64 + di) as usize, c.1);
                let b = (c.0, (c.1 as i64 + dj) as usize);
                if !grid.is_free(a) || !grid.is_free(b) {
                    continue;
                }
                out.push((n, SQRT_2));
            } else {
                out.push((n, 1.0));
            }
        }
    }
    out
}

fn octile(a: Cell, b: Cell) -> f64 {
    let dx = (a.0 as f64 - b.0 as f64).abs();
    let dy = (a.1 as f64 - b.1 as f64).abs();
    (dx * dx + dy * dy).sqrt()
}

/// A* over the grid; cost in cells (1 orthogonal, √2 diagonal).
pub fn plan_path(grid: &OccupancyGrid, start: Cell, goal: Cell) -> Result<Vec<Cell>, NavError> {
    for c in [start, goal] {
        if !grid.is_free(c) {
            return Err(NavError::CellOccupied(c));
        }
    }
    let idx = |c: Cell| c.1 * grid.width + c.0;
    let mut g = vec![f64::INFINITY; grid.width * grid.height];
    let mut parent: Vec<Option<Cell>> = vec![None; grid.width * grid.height];
    let mut closed = vec![false; grid.width * grid.height];
    let mut heap = BinaryHeap::new();
    g[idx(start)] = 0.0;
    heap.push(Open {
        f: octile(start, goal),
        g: 0.0,
        cell: start,
    });
    while let Some(Open { g: gc, cell, .. }) = heap.pop() {
        if closed[idx(cell)] {
            continue;
        }
        closed[idx(cell)] = true;
        if cell == goal {
            let mut path = vec![goal];
            let mut c = goal;
            while let Some(p) = parent[idx(c)] {
                path.push(p);
                c = p;
            }
            path.reverse();
            return Ok(path);
        }
        for (n, cost) in neighbors(grid, cell) {
            let ng = gc + cost;
            if ng < g[idx(n)] {
                g[idx(n)] = ng;
                parent[idx(n)] = Some(cell);
                heap.push(Open {
                    f: ng + octile(n, goal),
                    g: ng,
                    cell: n,
                });
            }
        }
    }
    Err(NavError::NoPath)
}

pub fn path_cost(path: &[Cell]) -> f64 {
    path.windows(2).map(|w| octile(w[0], w[1])).sum()
}

/// Plans between two world points and returns world waypoints. The last
/// waypoint is the exact goal point rather than its cell center.
pub fn plan_world_path(grid: &OccupancyGrid, from: [f64; 2], to: [f64; 2]) -> Result<Vec<[f64; 2]>, NavError> {
    let start = grid.cell_of(from[0], from[1]).ok_or(NavError::CellOccupied((usize::MAX, usize::MAX)))?;
    let goal = grid.cell_of(to[0], to[1]).ok_or(NavError::CellOccupied((usize::MAX, usize::MAX)))?;
    let cells = plan_path(grid, start, goal)?;
    let mut pts: Vec<[f64; 2]> = cells.iter().map(|c| grid.cell_center(*c)).collect();
    *pts.last_mut().expect("path has at least one cell") = to;
    Ok(pts)
}

/// Marks every cell whose center lies within `radius` of an occupied cell
/// center as occupied.
pub fn inflate(grid: &OccupancyGrid, radius: f64) -> OccupancyGrid {
    let r = (radius / grid.resolution).floor() as i64;
    let mut out = grid.clone();
    if r <= 0 {
        return out;
    }
    for j in 0..grid.height {
        for i in 0..grid.width {
            if grid.is_free((i, j)) {
                continue;
            }
            for dj in -r..=r {
                for di in -r..=r {
                    let (x, y) = (i as i64 + di, j as i64 + dj);
                    if di * di + dj * dj > r * r || x < 0 || y < 0 || x >= grid.width as i64 || y >= grid.height as i64 {
                        continue;
                    }
                    out.set_occupied((x as usize, y as usize), true);
                }
            }
        }
    }
    out
}

/// Plans with `clearance` of obstacle inflation, halving it and finally
/// dropping it when the endpoints sit inside the inflated zone.
pub fn plan_clear_path(
    grid: &OccupancyGrid,
    from: [f64; 2],
    to: [f64; 2],
    clearance: f64,
) -> Result<Vec<[f64; 2]>, NavError> {
    for r in [clearance, clearance / 2.0] {
        if r > 0.0 {
            if let Ok(p) = plan_world_path(&inflate(grid, r), from, to) {
                return Ok(p);
            }
        }
    }
    plan_world_path(grid, from, to)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowStatus {
    pub command: BaseCommand,
    pub arrived: bool,
}

/// Pure pursuit toward the furthest waypoint within the lookahead radius.
pub fn follow_path(pose: &Pose2, path: &[[f64; 2]], cfg: &NavConfig) -> FollowStatus {
    let goal = *path.last().expect("path must be non-empty");
    if pose.distance_to(goal) < cfg.goal_tolerance {
        return FollowStatus {
            command: BaseCommand::stop(),
            arrived: true,
        };
    }
    let target = path
        .iter()
        .rposition(|p| pose.distance_to(*p) <= cfg.lookahead)
        .map(|i| path[(i + 1).min(path.len() - 1)])
        .unwrap_or_else(|| {
            *path
                .iter()
                .min_by(|a, b| pose.distance_to(**a).total_cmp(&pose.distance_to(**b)))
                .expect("non-empty")
        });
    let bearing = (target[1] - pose.y).atan2(target[0] - pose.x);
    let alpha = wrap_angle(bearing - pose.heading);
    let omega = (cfg.heading_gain * alpha).clamp(-cfg.max_turn_rate, cfg.max_turn_rate);
    // Turn in place when the target is far off the heading.
    let v = if alpha.abs() > PI / 3.0 {
        0.0
    } else {
        let slow = pose.distance_to(goal).min(1.0).max(0.25);
        cfg.cruise_speed * alpha.cos() * slow
    };
    FollowStatus {
        command: BaseCommand::new(v, omega),
        arrived: false,
    }
}

/// Rotate in place at one revolution per `scan_period`.
pub fn scan_step(cfg: &NavConfig) -> BaseCommand {
    BaseCommand::new(0.0, 2.0 * PI / cfg.scan_period)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApproachStatus {
    Moving(BaseCommand),
    Arrived,
}

/// PID memory and arrival debouncing for the visual-servo approach.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ApproachController {
    pub linear: Pid,
    pub angular: Pid,
    pub settled_ticks: u32,
}

impl ApproachController {
    /// Pixel position (relative to the image center) the object should sit at
    /// so that it ends up `lateral_offset` to the robot's right.
    pub fn pixel_setpoint(target: &ApproachTarget, fx: f64, distance: f64) -> f64 {
        fx * target.lateral_offset / distance.max(1e-3)
    }

    /// One control tick. `x_error` is the tracker's pixel error (positive =
    /// object right of center); `image_width` normalizes it for the angular PID.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        cfg: &NavConfig,
        x_error: f64,
        distance: f64,
        fx: f64,
        image_width: f64,
        dt: f64,
    ) -> ApproachStatus {
        let t = &cfg.approach;
        let pixel_err = x_error - Self::pixel_setpoint(t, fx, distance);
        let dist_err = distance - t.stop_distance;
        if dist_err.abs() < t.tolerance && pixel_err.abs() < t.pixel_threshold {
            self.settled_ticks += 1;
            if self.settled_ticks >= t.arrive_ticks {
                return ApproachStatus::Arrived;
            }
        } else {
            self.settled_ticks = 0;
        }
        let v = self.linear.update(&cfg.linear, dist_err, dt);
        // Object right of the setpoint → turn clockwise (negative ω, z up).
        let omega = -self.angular.update(&cfg.angular, pixel_err / image_width, dt);
        ApproachStatus::Moving(BaseCommand::new(v, omega))
    }
}

/// Sits the robot down and checks that the gripper camera, at the survey
/// pose, sees the object.
pub fn settle_and_sit(
    scene: &WorldScene,
    robot: &RobotState,
    rig: &CameraRig,
    arm_model: &ArmModel,
    object_id: &str,
) -> Result<RobotState, NavError> {
    let mut seated = robot.clone();
    seated.posture = Posture::Sitting;
    let mut probe = seated.clone();
    probe.arm_joints = arm_model.survey;
    let frame = render(scene, &probe, rig, arm_model, CameraId::Gripper, 0.0, 0, 0);
    let visible = frame
        .label_of(object_id)
        .map(|l| frame.visible_pixels(l))
        .unwrap_or(0);
    if visible < MIN_VISIBLE_PIXELS {
        return Err(NavError::ObjectNotVisibleAfterSit(object_id.to_string()));
    }
    Ok(seated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> OccupancyGrid {
        OccupancyGrid::free(10, 10, 0.1)
    }

    #[test]
    fn start_equals_goal() {
        assert_eq!(plan_path(&corridor(), (3, 3), (3, 3)).unwrap(), vec![(3, 3)]);
    }

    #[test]
    fn straight_corridor() {
        let p = plan_path(&corridor(), (0, 0), (0, 9)).unwrap();
        assert_eq!(p.len(), 10);
        assert!((path_cost(&p) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn occupied_endpoints_and_disconnected() {
        let mut g = corridor();
        g.set_occupied((5, 5), true);
        assert_eq!(plan_path(&g, (5, 5), (0, 0)), Err(NavError::CellOccupied((5, 5))));
        for j in 0..10 {
            g.set_occupied((7, j), true);
        }
        assert_eq!(plan_path(&g, (0, 0), (9, 9)), Err(NavError::NoPath));
    }

    #[test]
    fn at_goal_stops() {
        let s = follow_path(&Pose2::new(1.0, 1.0, 0.0), &[[1.05, 1.0]], &NavConfig::default());
        assert!(s.arrived);
        assert!(s.command.is_zero());
    }

    #[test]
    fn goal_ahead_and_abeam() {
        let cfg = NavConfig::default();
        let ahead = follow_path(&Pose2::new(0.0, 0.0, 0.0), &[[0.5, 0.0], [1.0, 0.0]], &cfg);
        assert!(ahead.command.omega.abs() < 1e-12 && ahead.command.v > 0.0);
        let abeam = follow_path(&Pose2::new(0.0, 0.0, 0.0), &[[0.0, 1.0]], &cfg);
        assert_eq!(abeam.command.omega.abs(), cfg.max_turn_rate);
    }

    #[test]
    fn scan_rate_is_one_revolution_per_period() {
        let cfg = NavConfig::default();
        let c = scan_step(&cfg);
        assert_eq!(c.v, 0.0);
        assert!((c.omega - 2.0 * PI / 12.0).abs() < 1e-15);
    }

    #[test]
    fn zero_error_history_gives_zero_command() {
        let cfg = NavConfig::default();
        let mut c = ApproachController::default();
        let d = cfg.approach.stop_distance;
        let setpoint = ApproachController::pixel_setpoint(&cfg.approach, 170.0, d);
        match c.step(&cfg, setpoint, d, 170.0, 320.0, 0.05) {
            ApproachStatus::Moving(cmd) => assert!(cmd.is_zero()),
            ApproachStatus::Arrived => panic!("arrival needs debouncing"),
        }
    }

    #[test]
    fn proportional_linear_command() {
        let mut cfg = NavConfig::default();
        cfg.linear = PidGains::new(0.8, 0.0, 0.0, 1.0, 10.0);
        let mut c = ApproachController::default();
        let ApproachStatus::Moving(cmd) = c.step(&cfg, 0.0, 1.0, 170.0, 320.0, 0.05) else {
            panic!()
        };
        assert!((cmd.v - 0.8 * 0.72).abs() < 1e-12);
        cfg.linear.output_limit = 0.3;
        let mut c = ApproachController::default();
        let ApproachStatus::Moving(cmd) = c.step(&cfg, 0.0, 1.0, 170.0, 320.0, 0.05) else {
            panic!()
        };
        assert_eq!(cmd.v, 0.3);
    }

    #[test]
    fn object_right_turns_clockwise() {
        let cfg = NavConfig::default();
        let mut c = ApproachController::default();
        let ApproachStatus::Moving(cmd) = c.step(&cfg, 80.0 + 60.7, 0.28, 170.0, 320.0, 0.05) else {
            panic!()
        };
        assert!(cmd.omega < 0.0);
    }

    #[test]
    fn arrival_is_debounced() {
        let cfg = NavConfig::default();
        let mut c = ApproachController::default();
        let d = cfg.approach.stop_distance;
        let sp = ApproachController::pixel_setpoint(&cfg.approach, 170.0, d);
        for _ in 0..cfg.approach.arrive_ticks - 1 {
            assert!(matches!(c.step(&cfg, sp, d, 170.0, 320.0, 0.05), ApproachStatus::Moving(_)));
        }
        assert_eq!(c.step(&cfg, sp, d, 170.0, 320.0, 0.05), ApproachStatus::Arrived);
    }
}
