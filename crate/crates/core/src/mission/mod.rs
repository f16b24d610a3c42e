//! Mission state machine: navigate to a room, scan, approach the selected
//! object, sit, raise the arm, plan and execute the operator-selected grasp,
//! carry the object home and place it.
//!
//! Operator events are applied between ticks, one per tick. Each tick returns
//! the actuator commands for the simulator; waiting and terminal states return
//! none.

mod runner;

pub use runner::{pick_script, Action, MissionRunner, RunEnd, ScheduledEvent, Trigger};

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arm::{self, GraspOutcome, GraspStatus, Trajectory};
use crate::geometry::{wrap_angle, PixelRect, Vec3};
use crate::grasp::{plan_grasp, AntipodalSampler, GraspCandidate, GraspProvider};
use crate::metrics::{MetricsRecord, SelectionMethod};
use crate::nav::{self, follow_path, scan_step, ApproachController, ApproachStatus};
use crate::perception::{self, DetectionBox, GraspInput, Selection, SelectionMode};
use crate::world::{BaseCommand, CameraId, Command, Posture, SensorFrame, Simulator};

/// Consecutive recoverable failures before the mission faults.
pub const MAX_CONSECUTIVE_FAILURES: u32 = 3;
/// Heading tolerance when turning to the home heading before placing (rad).
const HOME_HEADING_TOL: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateKind {
    Idle,
    NavigateToRoom,
    Scanning,
    AwaitApproachSelection,
    Approaching,
    Sitting,
    ArmSurvey,
    AwaitGraspSelection,
    AwaitDragConfirm,
    Planning,
    Grasping,
    Returning,
    Placing,
    Done,
    Faulted,
}

impl StateKind {
    pub const ALL: [StateKind; 15] = [
        StateKind::Idle,
        StateKind::NavigateToRoom,
        StateKind::Scanning,
        StateKind::AwaitApproachSelection,
        StateKind::Approaching,
        StateKind::Sitting,
        StateKind::ArmSurvey,
        StateKind::AwaitGraspSelection,
        StateKind::AwaitDragConfirm,
        StateKind::Planning,
        StateKind::Grasping,
        StateKind::Returning,
        StateKind::Placing,
        StateKind::Done,
        StateKind::Faulted,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StateKind::Idle => "Idle",
            StateKind::NavigateToRoom => "NavigateToRoom",
            StateKind::Scanning => "Scanning",
            StateKind::AwaitApproachSelection => "AwaitApproachSelection",
            StateKind::Approaching => "Approaching",
            StateKind::Sitting => "Sitting",
            StateKind::ArmSurvey => "ArmSurvey",
            StateKind::AwaitGraspSelection => "AwaitGraspSelection",
            StateKind::AwaitDragConfirm => "AwaitDragConfirm",
            StateKind::Planning => "Planning",
            StateKind::Grasping => "Grasping",
            StateKind::Returning => "Returning",
            StateKind::Placing => "Placing",
            StateKind::Done => "Done",
            StateKind::Faulted => "Faulted",
        }
    }

    pub fn from_name(name: &str) -> Option<StateKind> {
        StateKind::ALL.into_iter().find(|s| s.name() == name)
    }

    /// States in which the robot waits for the operator or has finished.
    pub fn is_quiescent(&self) -> bool {
        matches!(
            self,
            StateKind::Idle
                | StateKind::Done
                | StateKind::Faulted
                | StateKind::AwaitApproachSelection
                | StateKind::AwaitGraspSelection
                | StateKind::AwaitDragConfirm
        )
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, StateKind::Done | StateKind::Faulted)
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    GoToRoom { room: String },
    BeginScan,
    Stop,
    SelectClick { camera: CameraId, u: f64, v: f64 },
    SelectDrag { camera: CameraId, rect: [f64; 4] },
    ConfirmDrag { accept: bool },
    ToggleDetection { enabled: bool },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::GoToRoom { .. } => "go_to_room",
            EventKind::BeginScan => "begin_scan",
            EventKind::Stop => "stop",
            EventKind::SelectClick { .. } => "select_click",
            EventKind::SelectDrag { .. } => "select_drag",
            EventKind::ConfirmDrag { .. } => "confirm_drag",
            EventKind::ToggleDetection { .. } => "toggle_detection",
        }
    }

    /// One representative of every event kind, for enumeration tests.
    pub fn samples() -> Vec<EventKind> {
        vec![
            EventKind::GoToRoom { room: "Room A".into() },
            EventKind::BeginScan,
            EventKind::Stop,
            EventKind::SelectClick {
                camera: CameraId::Front,
                u: 160.0,
                v: 120.0,
            },
            EventKind::SelectClick {
                camera: CameraId::Gripper,
                u: 160.0,
                v: 120.0,
            },
            EventKind::SelectDrag {
                camera: CameraId::Front,
                rect: [100.0, 80.0, 220.0, 160.0],
            },
            EventKind::SelectDrag {
                camera: CameraId::Gripper,
                rect: [100.0, 80.0, 220.0, 160.0],
            },
            EventKind::ConfirmDrag { accept: true },
            EventKind::ConfirmDrag { accept: false },
            EventKind::ToggleDetection { enabled: true },
            EventKind::ToggleDetection { enabled: false },
        ]
    }
}

/// An operator event that had no effect, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct EventRejected(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorEvent {
    pub seq: u64,
    pub kind: EventKind,
}

/// Nominal target of a legal event, or `None` when the event is illegal in
/// `state`. A legal event can still be rejected at runtime (unknown room,
/// nothing under the selection); the state then stays put.
pub fn next_state(state: StateKind, event: &EventKind) -> Option<StateKind> {
    use StateKind::*;
    match (state, event) {
        (_, EventKind::Stop) => Some(Idle),
        (s, EventKind::ToggleDetection { .. }) => Some(s),
        (Idle | NavigateToRoom | Scanning | AwaitApproachSelection, EventKind::GoToRoom { .. }) => {
            Some(NavigateToRoom)
        }
        (Scanning | AwaitApproachSelection | Approaching, EventKind::BeginScan) => Some(Scanning),
        (
            Scanning | AwaitApproachSelection,
            EventKind::SelectClick {
                camera: CameraId::Front,
                ..
            }
            | EventKind::SelectDrag {
                camera: CameraId::Front,
                ..
            },
        ) => Some(Approaching),
        (
            AwaitGraspSelection,
            EventKind::SelectClick {
                camera: CameraId::Gripper,
                ..
            },
        ) => Some(Planning),
        (
            AwaitGraspSelection,
            EventKind::SelectDrag {
                camera: CameraId::Gripper,
                ..
            },
        ) => Some(AwaitDragConfirm),
        (AwaitDragConfirm, EventKind::ConfirmDrag { accept: true }) => Some(Planning),
        (AwaitDragConfirm, EventKind::ConfirmDrag { accept: false }) => Some(AwaitGraspSelection),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedObject {
    pub object_id: String,
    pub class_name: String,
    pub bbox: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MissionContext {
    pub target_room: Option<String>,
    pub tracked_object: Option<TrackedObject>,
    /// Grasp selection on the gripper camera (pending confirmation while dragging).
    pub selection: Option<Selection>,
    pub grasp_input: Option<GraspInput>,
    pub selected_grasp: Option<GraspCandidate>,
    pub fault_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionState {
    pub state: StateKind,
    pub context: MissionContext,
    pub entered_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub sim_time: f64,
    pub from: StateKind,
    pub to: StateKind,
    pub trigger: String,
}

pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    trace
        .iter()
        .map(|r| serde_json::to_string(r).expect("trace record serializes") + "\n")
        .collect()
}

/// Snapshot published after every tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionStatus {
    pub state: StateKind,
    pub detail: String,
    pub target_room: Option<String>,
    pub current_room: Option<String>,
    pub target_object: Option<String>,
    pub warning: Option<String>,
    pub detection_enabled: bool,
    pub consecutive_failures: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Start,
    Moving,
    Turning,
    Waiting(f64),
}

pub struct Mission {
    pub ms: MissionState,
    provider: Box<dyn GraspProvider + Send + Sync>,
    path: Vec<[f64; 2]>,
    approach: ApproachController,
    scan_turned: f64,
    trajectory: Option<(Trajectory, f64)>,
    phase: Phase,
    failures: u32,
    reapproached: bool,
    detection_enabled: bool,
    current_room: Option<String>,
    selection_frame: Option<SensorFrame>,
    selection_time: f64,
    selection_method: SelectionMethod,
    sit_offset: [f64; 2],
    grasp_attempts: u32,
    warning: Option<String>,
    last_detections: Vec<(CameraId, Vec<DetectionBox>)>,
    pub trace: Vec<TraceRecord>,
    pub metrics: Vec<MetricsRecord>,
}

impl fmt::Debug for Mission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mission")
            .field("state", &self.ms.state)
            .field("provider", &self.provider.id())
            .finish_non_exhaustive()
    }
}

impl Default for Mission {
    fn default() -> Self {
        Self::new(Box::new(AntipodalSampler::default()))
    }
}

impl Mission {
    pub fn new(provider: Box<dyn GraspProvider + Send + Sync>) -> Self {
        Self {
            ms: MissionState {
                state: StateKind::Idle,
                context: MissionContext::default(),
                entered_at: 0.0,
            },
            provider,
            path: Vec::new(),
            approach: ApproachController::default(),
            scan_turned: 0.0,
            trajectory: None,
            phase: Phase::Start,
            failures: 0,
            reapproached: false,
            detection_enabled: true,
            current_room: None,
            selection_frame: None,
            selection_time: 0.0,
            selection_method: SelectionMethod::Click,
            sit_offset: [0.0; 2],
            grasp_attempts: 0,
            warning: None,
            last_detections: Vec::new(),
            trace: Vec::new(),
            metrics: Vec::new(),
        }
    }

    pub fn state(&self) -> StateKind {
        self.ms.state
    }

    pub fn detection_enabled(&self) -> bool {
        self.detection_enabled
    }

    /// Detections computed during the last tick (front camera while scanning).
    pub fn last_detections(&self) -> &[(CameraId, Vec<DetectionBox>)] {
        &self.last_detections
    }

    pub fn sit_offset(&self) -> [f64; 2] {
        self.sit_offset
    }

    pub fn status(&self) -> MissionStatus {
        let ctx = &self.ms.context;
        let room = ctx.target_room.clone().unwrap_or_default();
        let object = ctx
            .tracked_object
            .as_ref()
            .map(|t| t.class_name.clone())
            .unwrap_or_default();
        let detail = match self.ms.state {
            StateKind::Idle => "idle".to_string(),
            StateKind::NavigateToRoom => format!("navigating to {room}"),
            StateKind::Scanning => format!("scanning {room}"),
            StateKind::AwaitApproachSelection => "scan complete, waiting for object selection".into(),
            StateKind::Approaching => format!("tracking and approaching {object}"),
            StateKind::Sitting => "sitting down".into(),
            StateKind::ArmSurvey => "raising arm to survey pose".into(),
            StateKind::AwaitGraspSelection => "waiting for grasp selection on gripper view".into(),
            StateKind::AwaitDragConfirm => {
                let c = ctx
                    .selection
                    .as_ref()
                    .and_then(|s| s.target_class.clone())
                    .unwrap_or_default();
                format!("confirm drag selection: {c}")
            }
            StateKind::Planning => "planning grasp".into(),
            StateKind::Grasping => format!("grasping {object}"),
            StateKind::Returning => format!("returning home with {object}"),
            StateKind::Placing => "placing object".into(),
            StateKind::Done => "done".into(),
            StateKind::Faulted => format!("faulted: {}", ctx.fault_reason.clone().unwrap_or_default()),
        };
        MissionStatus {
            state: self.ms.state,
            detail,
            target_room: ctx.target_room.clone(),
            current_room: self.current_room.clone(),
            target_object: ctx.tracked_object.as_ref().map(|t| t.object_id.clone()),
            warning: self.warning.clone(),
            detection_enabled: self.detection_enabled,
            consecutive_failures: self.failures,
        }
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warning = Some(msg);
    }

    fn fail_count(&mut self, sim: &Simulator, reason: &str) -> bool {
        self.failures += 1;
        if self.failures >= MAX_CONSECUTIVE_FAILURES {
            self.ms.context.fault_reason = Some(format!("{} consecutive failures, last: {reason}", self.failures));
            let _ = sim;
            true
        } else {
            false
        }
    }

    fn reject(&mut self, msg: String) -> EventRejected {
        self.warn(msg.clone());
        EventRejected(msg)
    }

    /// Applies one operator event. Returns commands for the same tick, or the
    /// reason the event had no effect.
    pub fn handle_event(&mut self, sim: &mut Simulator, ev: &OperatorEvent) -> Result<Command, EventRejected> {
        let from = self.ms.state;
        let Some(target) = next_state(from, &ev.kind) else {
            return Err(self.reject(format!("{} ignored in state {from}", ev.kind.name())));
        };
        self.warning = None;
        let cmd = match &ev.kind {
            EventKind::Stop => {
                let m = &sim.scenario.arm;
                let halt = Command {
                    base: Some(BaseCommand::stop()),
                    arm_target: Some(m.home),
                    gripper: Some(m.max_opening),
                    posture: Some(Posture::Standing),
                };
                sim.release();
                self.failures = 0;
                self.reapproached = false;
                self.trajectory = None;
                if from != StateKind::Idle {
                    self.record(sim, StateKind::Idle, "stop");
                }
                self.ms.context = MissionContext::default();
                halt
            }
            EventKind::ToggleDetection { enabled } => {
                self.detection_enabled = *enabled;
                Command::default()
            }
            EventKind::GoToRoom { room } => {
                if sim.scene.room(room).is_none() {
                    return Err(self.reject(format!("unknown room {room}")));
                }
                self.ms.context.target_room = Some(room.clone());
                self.ms.context.tracked_object = None;
                self.transition(sim, target, "go_to_room")
            }
            EventKind::BeginScan => self.transition(sim, target, "begin_scan"),
            EventKind::SelectClick { camera, u, v } => {
                self.select(sim, target, *camera, SelectionMode::Click { u: *u, v: *v }, "select_click")?
            }
            EventKind::SelectDrag { camera, rect } => {
                let [u0, v0, u1, v1] = *rect;
                self.select(sim, target, *camera, SelectionMode::Drag { u0, v0, u1, v1 }, "select_drag")?
            }
            EventKind::ConfirmDrag { accept } => {
                if *accept {
                    if let Some(sel) = self.ms.context.selection.take() {
                        self.ms.context.selection = Some(sel.confirm());
                    }
                    self.transition(sim, target, "confirm_drag")
                } else {
                    self.ms.context.selection = None;
                    self.transition(sim, target, "reject_drag")
                }
            }
        };
        Ok(cmd)
    }

    fn select(
        &mut self,
        sim: &mut Simulator,
        target: StateKind,
        camera: CameraId,
        mode: SelectionMode,
        trigger: &str,
    ) -> Result<Command, EventRejected> {
        let frame = sim.render(camera);
        let detections = perception::detect(&frame, sim.scenario.noise.detection_jitter_px, sim.seed);
        let sel = match perception::resolve_selection(mode, &detections, &frame) {
            Ok(s) => s,
            Err(e) => {
                return Err(self.reject(format!("{trigger}: {e}")));
            }
        };
        match camera {
            CameraId::Front => {
                let id = sel.target_object_id.clone().expect("resolved selections name a target");
                self.ms.context.tracked_object = Some(TrackedObject {
                    object_id: id,
                    class_name: sel.target_class.clone().unwrap_or_default(),
                    bbox: sel.resolved_bbox,
                });
                self.reapproached = false;
            }
            CameraId::Gripper => {
                self.selection_method = match mode {
                    SelectionMode::Click { .. } => SelectionMethod::Click,
                    SelectionMode::Drag { .. } => SelectionMethod::Drag,
                };
                self.selection_time = sim.time;
                self.ms.context.selection = Some(sel);
                self.selection_frame = Some(frame);
            }
        }
        Ok(self.transition(sim, target, trigger))
    }

    fn record(&mut self, sim: &Simulator, to: StateKind, trigger: &str) {
        self.trace.push(TraceRecord {
            tick: sim.tick,
            sim_time: sim.time,
            from: self.ms.state,
            to,
            trigger: trigger.to_string(),
        });
        log::info!("{} -> {} ({trigger})", self.ms.state, to);
        self.ms.state = to;
        self.ms.entered_at = sim.time;
        self.phase = Phase::Start;
    }

    /// Records the transition and runs the entry action of `to`.
    fn transition(&mut self, sim: &mut Simulator, to: StateKind, trigger: &str) -> Command {
        self.record(sim, to, trigger);
        if to != StateKind::Grasping {
            self.ms.context.selected_grasp = None;
        }
        let stop = Command {
            base: Some(BaseCommand::stop()),
            ..Default::default()
        };
        match to {
            StateKind::NavigateToRoom => {
                let room = self
                    .ms
                    .context
                    .target_room
                    .as_ref()
                    .and_then(|r| sim.scene.room(r))
                    .cloned()
                    .expect("target room checked on entry");
                let start = sim.localized_base();
                let grid = &sim.scene.grid;
                let c = sim.scenario.nav.clearance;
                let planned = nav::plan_clear_path(grid, [start.x, start.y], room.entry_waypoint, c).and_then(|mut a| {
                    let b = nav::plan_clear_path(grid, room.entry_waypoint, room.scan_center, c)?;
                    a.extend(b.into_iter().skip(1));
                    Ok(a)
                });
                self.current_room = None;
                match planned {
                    Ok(p) => {
                        self.path = p;
                        Command::default()
                    }
                    Err(e) => self.fault(sim, format!("navigation: {e}")),
                }
            }
            StateKind::Scanning => {
                self.scan_turned = 0.0;
                self.ms.context.tracked_object = None;
                Command::default()
            }
            StateKind::Approaching => {
                self.approach = ApproachController::default();
                stop
            }
            StateKind::Sitting => {
                let id = self
                    .ms
                    .context
                    .tracked_object
                    .as_ref()
                    .map(|t| t.object_id.clone())
                    .expect("sitting requires a tracked object");
                match nav::settle_and_sit(&sim.scene, &sim.robot, &sim.scenario.cameras, &sim.scenario.arm, &id) {
                    Ok(_) => {
                        if let Some((f, r)) = sim.object_offset(&id) {
                            self.sit_offset = [f, r];
                        }
                        Command {
                            base: Some(BaseCommand::stop()),
                            posture: Some(Posture::Sitting),
                            ..Default::default()
                        }
                    }
                    Err(e) if !self.reapproached => {
                        self.reapproached = true;
                        self.warn(e.to_string());
                        self.record(sim, StateKind::Approaching, "object_not_visible");
                        self.approach = ApproachController::default();
                        stop
                    }
                    Err(e) => self.fault(sim, e.to_string()),
                }
            }
            StateKind::ArmSurvey => {
                let traj = arm::raise_to_survey(&sim.scenario.arm, &sim.robot.arm_joints);
                self.trajectory = Some((traj, sim.time));
                Command {
                    gripper: Some(sim.scenario.arm.max_opening),
                    ..Default::default()
                }
            }
            StateKind::AwaitGraspSelection => {
                self.ms.context.selection = None;
                self.ms.context.grasp_input = None;
                Command::default()
            }
            StateKind::Idle | StateKind::Done => stop,
            StateKind::Faulted => stop,
            _ => Command::default(),
        }
    }

    fn fault(&mut self, sim: &Simulator, reason: String) -> Command {
        log::error!("fault: {reason}");
        self.ms.context.fault_reason = Some(reason);
        self.record(sim, StateKind::Faulted, "fault");
        Command {
            base: Some(BaseCommand::stop()),
            ..Default::default()
        }
    }

    /// Follows the active arm trajectory; `true` once it has finished and the
    /// joints have reached its final state.
    fn drive_arm(&mut self, sim: &Simulator, dt: f64, cmd: &mut Command) -> bool {
        let Some((traj, start)) = &self.trajectory else {
            return true;
        };
        let t = sim.time + dt - start;
        let q = traj.sample(t);
        cmd.arm_target = Some(q);
        t >= traj.duration() && sim.robot.arm_joints.max_abs_delta(&traj.final_state()) < 1e-9
    }

    /// One control step. Returns the commands to apply for `dt`.
    pub fn tick(&mut self, sim: &mut Simulator, dt: f64) -> Command {
        self.last_detections.clear();
        let mut cmd = Command::default();
        let noise = sim.scenario.noise;
        let cfg = sim.scenario.nav;
        match self.ms.state {
            StateKind::Idle
            | StateKind::Done
            | StateKind::Faulted
            | StateKind::AwaitApproachSelection
            | StateKind::AwaitGraspSelection
            | StateKind::AwaitDragConfirm => {}
            StateKind::NavigateToRoom => {
                let status = follow_path(&sim.localized_base(), &self.path, &cfg);
                if status.arrived {
                    self.current_room = self.ms.context.target_room.clone();
                    return self.transition(sim, StateKind::Scanning, "arrived");
                }
                cmd.base = Some(status.command);
            }
            StateKind::Scanning => {
                let frame = sim.render(CameraId::Front);
                let dets = perception::detect(&frame, noise.detection_jitter_px, sim.seed);
                self.last_detections.push((CameraId::Front, dets));
                if self.scan_turned >= TAU - 1e-9 {
                    return self.transition(sim, StateKind::AwaitApproachSelection, "scan_complete");
                }
                let c = scan_step(&cfg);
                let remaining = (TAU - self.scan_turned) / dt;
                let omega = c.omega.min(remaining);
                self.scan_turned += omega * dt;
                cmd.base = Some(BaseCommand::new(0.0, omega));
            }
            StateKind::Approaching => {
                let tracked = self
                    .ms
                    .context
                    .tracked_object
                    .clone()
                    .expect("approaching requires a tracked object");
                let frame = sim.render(CameraId::Front);
                match perception::track(&tracked.object_id, &tracked.bbox, &frame, noise.detection_jitter_px, sim.seed) {
                    Err(e) => {
                        self.warn(format!("approach: {e}"));
                        if self.fail_count(sim, "track lost") {
                            return self.fault(sim, "track lost".into());
                        }
                        return self.transition(sim, StateKind::Scanning, "track_lost");
                    }
                    Ok(update) => {
                        if let Some(t) = self.ms.context.tracked_object.as_mut() {
                            t.bbox = update.bbox;
                        }
                        let k = frame.intrinsics;
                        match self.approach.step(&cfg, update.x_error, update.distance, k.fx, k.width as f64, dt) {
                            ApproachStatus::Arrived => return self.transition(sim, StateKind::Sitting, "arrived"),
                            ApproachStatus::Moving(b) => cmd.base = Some(b),
                        }
                    }
                }
            }
            StateKind::Sitting => {
                if sim.time - self.ms.entered_at + 1e-9 >= sim.scenario.robot.posture_time {
                    return self.transition(sim, StateKind::ArmSurvey, "seated");
                }
            }
            StateKind::ArmSurvey => {
                if self.drive_arm(sim, dt, &mut cmd) {
                    self.trajectory = None;
                    return self.transition(sim, StateKind::AwaitGraspSelection, "survey_pose");
                }
            }
            StateKind::Planning => return self.plan(sim),
            StateKind::Grasping => {
                if self.drive_arm(sim, dt, &mut cmd) {
                    self.trajectory = None;
                    return self.close_gripper(sim);
                }
            }
            StateKind::Returning => return self.tick_returning(sim, dt),
            StateKind::Placing => {
                if sim.time - self.ms.entered_at + 1e-9 >= sim.scenario.robot.posture_time {
                    let target = sim.scene.place_target;
                    return match sim.place(&target) {
                        Ok(()) => {
                            self.failures = 0;
                            self.transition(sim, StateKind::Done, "placed")
                        }
                        Err(e) => self.fault(sim, format!("place: {e}")),
                    };
                }
            }
        }
        cmd
    }

    fn plan(&mut self, sim: &mut Simulator) -> Command {
        let Some(sel) = self.ms.context.selection.clone() else {
            return self.transition(sim, StateKind::AwaitGraspSelection, "no_selection");
        };
        let frame = self.selection_frame.clone().expect("selection keeps its frame");
        let arm_model = sim.scenario.arm.clone();
        let gi = match perception::capture_grasp_input(&frame, &sel, &arm_model, &sim.robot.arm_joints) {
            Ok(gi) => gi,
            Err(e) => {
                self.warn(e.to_string());
                return self.transition(sim, StateKind::AwaitGraspSelection, "capture_failed");
            }
        };
        self.grasp_attempts += 1;
        let seed = sim.seed ^ (self.grasp_attempts as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let planned = plan_grasp(&gi, self.provider.as_ref(), &arm_model, &arm_model.mount_sitting, seed);
        self.ms.context.grasp_input = Some(gi);
        match planned {
            Ok(p) => {
                let traj = match arm::plan_grasp_approach(&arm_model, &sim.robot.arm_joints, &p.grasp_base.pose) {
                    Ok(t) => t,
                    Err(e) => return self.grasp_failed(sim, GraspStatus::FailPlan, &e.to_string()),
                };
                self.ms.context.selected_grasp = Some(p.grasp_base);
                self.record(sim, StateKind::Grasping, "grasp_planned");
                self.trajectory = Some((traj, sim.time));
                Command {
                    gripper: Some(arm_model.max_opening),
                    ..Default::default()
                }
            }
            Err(e) => self.grasp_failed(sim, GraspStatus::FailPlan, &e.to_string()),
        }
    }

    fn push_metrics(&mut self, sim: &Simulator, status: GraspStatus) {
        let object_class = self
            .ms
            .context
            .selection
            .as_ref()
            .and_then(|s| s.target_class.clone())
            .or_else(|| self.ms.context.tracked_object.as_ref().map(|t| t.class_name.clone()))
            .unwrap_or_default();
        self.metrics.push(MetricsRecord {
            trial: self.metrics.len() as u32 + 1,
            object_class,
            method: self.selection_method,
            duration: sim.time - self.selection_time,
            status,
            final_position: self.sit_offset,
        });
    }

    fn grasp_failed(&mut self, sim: &mut Simulator, status: GraspStatus, reason: &str) -> Command {
        self.warn(format!("grasp {}: {reason}", status.as_str()));
        self.push_metrics(sim, status);
        if self.fail_count(sim, reason) {
            return self.fault(sim, reason.to_string());
        }
        // Raise back to the survey pose so the operator gets a fresh view.
        self.transition(sim, StateKind::ArmSurvey, "grasp_failed")
    }

    fn close_gripper(&mut self, sim: &mut Simulator) -> Command {
        let grasp = self.ms.context.selected_grasp.expect("grasping has a selected grasp");
        match sim.execute_grasp(&grasp.pose, grasp.width) {
            Ok(GraspOutcome::Success { object_id }) => {
                self.push_metrics(sim, GraspStatus::Success);
                self.failures = 0;
                log::info!("grasped {object_id}");
                self.transition(sim, StateKind::Returning, "grasp_success")
            }
            Ok(outcome) => {
                let status = outcome.status();
                let reason = match outcome {
                    GraspOutcome::Failed { cause, .. } => format!("{cause:?}"),
                    GraspOutcome::Success { .. } => unreachable!(),
                };
                let c = self.grasp_failed(sim, status, &reason);
                Command {
                    gripper: Some(sim.scenario.arm.max_opening),
                    ..c
                }
            }
            Err(e) => self.grasp_failed(sim, GraspStatus::FailPlan, &e.to_string()),
        }
    }

    fn tick_returning(&mut self, sim: &mut Simulator, _dt: f64) -> Command {
        let home = sim.scene.home_pose;
        let arm_home = sim.scenario.arm.home;
        match self.phase {
            Phase::Start => {
                self.phase = Phase::Waiting(sim.time);
                Command {
                    posture: Some(Posture::Standing),
                    arm_target: Some(arm_home),
                    ..Default::default()
                }
            }
            Phase::Waiting(since) => {
                let stood = sim.time - since + 1e-9 >= sim.scenario.robot.posture_time;
                if stood && sim.robot.arm_joints.max_abs_delta(&arm_home) < 1e-9 {
                    let base = sim.localized_base();
                    match nav::plan_clear_path(&sim.scene.grid, [base.x, base.y], [home.x, home.y], sim.scenario.nav.clearance) {
                        Ok(p) => {
                            self.path = p;
                            self.current_room = None;
                            self.phase = Phase::Moving;
                        }
                        Err(e) => return self.fault(sim, format!("return: {e}")),
                    }
                }
                Command::default()
            }
            Phase::Moving => {
                let cfg = sim.scenario.nav;
                let status = follow_path(&sim.localized_base(), &self.path, &cfg);
                if status.arrived {
                    self.phase = Phase::Turning;
                    return Command {
                        base: Some(BaseCommand::stop()),
                        ..Default::default()
                    };
                }
                Command {
                    base: Some(status.command),
                    ..Default::default()
                }
            }
            Phase::Turning => {
                let cfg = sim.scenario.nav;
                let err = wrap_angle(home.heading - sim.robot.base.heading);
                if err.abs() < HOME_HEADING_TOL {
                    let c = self.transition(sim, StateKind::Placing, "home_reached");
                    return Command {
                        posture: Some(Posture::Sitting),
                        ..c
                    };
                }
                Command {
                    base: Some(BaseCommand::new(0.0, (cfg.heading_gain * err).clamp(-cfg.max_turn_rate, cfg.max_turn_rate))),
                    ..Default::default()
                }
            }
        }
    }

    /// Puts the mission directly into `ArmSurvey` with `object_id` as the
    /// tracked object, as if the robot had just sat down beside it.
    pub fn start_at_survey(&mut self, sim: &mut Simulator, object_id: &str) -> Command {
        let class_name = sim
            .scene
            .object(object_id)
            .map(|o| o.class_name.clone())
            .unwrap_or_default();
        self.ms.context.tracked_object = Some(TrackedObject {
            object_id: object_id.to_string(),
            class_name,
            bbox: PixelRect::new(0.0, 0.0, 1.0, 1.0),
        });
        if let Some((f, r)) = sim.object_offset(object_id) {
            self.sit_offset = [f, r];
        }
        self.transition(sim, StateKind::ArmSurvey, "start_at_survey")
    }

    /// World position of the tracked object, if any.
    pub fn tracked_position(&self, sim: &Simulator) -> Option<Vec3> {
        let id = &self.ms.context.tracked_object.as_ref()?.object_id;
        sim.scene.object(id).map(|o| o.pose.translation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_total_and_stop_always_idles() {
        for s in StateKind::ALL {
            for e in EventKind::samples() {
                let n = next_state(s, &e);
                if e == EventKind::Stop {
                    assert_eq!(n, Some(StateKind::Idle));
                }
                if let EventKind::ToggleDetection { .. } = e {
                    assert_eq!(n, Some(s));
                }
            }
        }
    }

    #[test]
    fn begin_scan_illegal_in_idle() {
        assert_eq!(next_state(StateKind::Idle, &EventKind::BeginScan), None);
        assert_eq!(
            next_state(StateKind::Idle, &EventKind::GoToRoom { room: "Room A".into() }),
            Some(StateKind::NavigateToRoom)
        );
    }

    #[test]
    fn drag_confirmation_edges() {
        let drag = EventKind::SelectDrag {
            camera: CameraId::Gripper,
            rect: [0.0, 0.0, 10.0, 10.0],
        };
        assert_eq!(next_state(StateKind::AwaitGraspSelection, &drag), Some(StateKind::AwaitDragConfirm));
        assert_eq!(
            next_state(StateKind::AwaitDragConfirm, &EventKind::ConfirmDrag { accept: true }),
            Some(StateKind::Planning)
        );
        assert_eq!(
            next_state(StateKind::AwaitDragConfirm, &EventKind::ConfirmDrag { accept: false }),
            Some(StateKind::AwaitGraspSelection)
        );
    }

    #[test]
    fn names_round_trip() {
        for s in StateKind::ALL {
            assert_eq!(StateKind::from_name(s.name()), Some(s));
        }
    }
}
