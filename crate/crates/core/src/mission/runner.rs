//! Drives a mission against the simulator from a timed operator script.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{EventKind, Mission, OperatorEvent, StateKind};
use crate::perception::{self, MIN_VISIBLE_PIXELS};
use crate::world::{CameraId, Command, Simulator};

/// Pixels added around an object's visible extent for a scripted drag.
const DRAG_PAD_PX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "when", rename_all = "snake_case")]
pub enum Trigger {
    /// Absolute simulation time (s).
    At { t: f64 },
    /// `delay` seconds after the mission entered `state`.
    AfterState { state: StateKind, delay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Event { event: EventKind },
    /// Click the center of the object's detection box once it is detected.
    ClickObject { camera: CameraId, object: String },
    /// Drag a box around the object's visible pixels once it is visible.
    DragObject { camera: CameraId, object: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    #[serde(flatten)]
    pub trigger: Trigger,
    #[serde(flatten)]
    pub action: Action,
}

impl ScheduledEvent {
    pub fn at(t: f64, event: EventKind) -> Self {
        Self {
            trigger: Trigger::At { t },
            action: Action::Event { event },
        }
    }

    pub fn after(state: StateKind, delay: f64, action: Action) -> Self {
        Self {
            trigger: Trigger::AfterState { state, delay },
            action,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "end", rename_all = "snake_case")]
pub enum RunEnd {
    Done,
    Faulted { reason: String },
    /// Stopped by the operator and nothing left to do.
    Stopped,
    /// Waiting for operator input that the script never provides.
    Stalled { state: StateKind, reason: String },
    TimedOut { state: StateKind },
}

impl RunEnd {
    pub fn is_success(&self) -> bool {
        matches!(self, RunEnd::Done)
    }
}

#[derive(Debug)]
pub struct MissionRunner {
    pub sim: Simulator,
    pub mission: Mission,
    pub dt: f64,
    /// Run limit in simulated seconds.
    pub max_time: f64,
    /// Seconds a quiescent state may wait with no usable script entry left.
    pub stall_timeout: Option<f64>,
    script: VecDeque<ScheduledEvent>,
    inbox: VecDeque<EventKind>,
    seq: u64,
}

/// `b` overrides `a` field by field.
fn merge(a: Command, b: Command) -> Command {
    Command {
        base: b.base.or(a.base),
        arm_target: b.arm_target.or(a.arm_target),
        gripper: b.gripper.or(a.gripper),
        posture: b.posture.or(a.posture),
    }
}

impl MissionRunner {
    pub fn new(sim: Simulator, mission: Mission, script: Vec<ScheduledEvent>) -> Self {
        Self {
            sim,
            mission,
            dt: 0.05,
            max_time: 600.0,
            stall_timeout: Some(10.0),
            script: script.into(),
            inbox: VecDeque::new(),
            seq: 0,
        }
    }

    /// Queues an event for the next tick, ahead of the script.
    pub fn push_event(&mut self, event: EventKind) {
        self.inbox.push_back(event);
    }

    pub fn script_remaining(&self) -> usize {
        self.script.len()
    }

    fn triggered(&self, ev: &ScheduledEvent) -> bool {
        match &ev.trigger {
            Trigger::At { t } => self.sim.time + 1e-9 >= *t,
            Trigger::AfterState { state, delay } => {
                self.mission.state() == *state && self.sim.time - self.mission.ms.entered_at + 1e-9 >= *delay
            }
        }
    }

    /// Turns a scripted action into an event, or `None` while its object is
    /// not yet visible.
    fn realize(&self, action: &Action) -> Option<EventKind> {
        match action {
            Action::Event { event } => Some(event.clone()),
            Action::ClickObject { camera, object } => {
                let frame = self.sim.render(*camera);
                let dets = perception::detect(&frame, self.sim.scenario.noise.detection_jitter_px, self.sim.seed);
                let d = dets.iter().find(|d| d.object_id == *object)?;
                let (u, v) = d.bbox.center();
                Some(EventKind::SelectClick { camera: *camera, u, v })
            }
            Action::DragObject { camera, object } => {
                let frame = self.sim.render(*camera);
                let label = frame.label_of(object)?;
                let (w, h) = (frame.labels.width, frame.labels.height);
                let mut ext: Option<[usize; 4]> = None;
                let mut count = 0;
                for v in 0..h {
                    for u in 0..w {
                        if frame.labels.get(u, v) == label {
                            count += 1;
                            ext = Some(match ext {
                                None => [u, v, u, v],
                                Some([a, b, c, d]) => [a.min(u), b.min(v), c.max(u), d.max(v)],
                            });
                        }
                    }
                }
                let [u0, v0, u1, v1] = ext?;
                if count < MIN_VISIBLE_PIXELS {
                    return None;
                }
                let rect = [
                    (u0 as f64 - DRAG_PAD_PX).max(0.0),
                    (v0 as f64 - DRAG_PAD_PX).max(0.0),
                    (u1 as f64 + 1.0 + DRAG_PAD_PX).min(w as f64),
                    (v1 as f64 + 1.0 + DRAG_PAD_PX).min(h as f64),
                ];
                Some(EventKind::SelectDrag { camera: *camera, rect })
            }
        }
    }

    fn next_event(&mut self) -> Option<EventKind> {
        if let Some(e) = self.inbox.pop_front() {
            return Some(e);
        }
        let head = self.script.front()?;
        if !self.triggered(head) {
            return None;
        }
        let event = self.realize(&head.action)?;
        self.script.pop_front();
        Some(event)
    }

    /// Applies at most one operator event, then one control tick.
    pub fn step(&mut self) -> Option<RunEnd> {
        let mut cmd = Command::default();
        if let Some(kind) = self.next_event() {
            self.seq += 1;
            let ev = OperatorEvent { seq: self.seq, kind };
            // A rejected event is recorded as the mission warning and has no effect.
            cmd = self.mission.handle_event(&mut self.sim, &ev).unwrap_or_default();
        }
        let tick_cmd = self.mission.tick(&mut self.sim, self.dt);
        self.sim.apply(&merge(cmd, tick_cmd), self.dt);
        self.check_end()
    }

    fn check_end(&self) -> Option<RunEnd> {
        let state = self.mission.state();
        match state {
            StateKind::Done => return Some(RunEnd::Done),
            StateKind::Faulted => {
                return Some(RunEnd::Faulted {
                    reason: self.mission.ms.context.fault_reason.clone().unwrap_or_default(),
                })
            }
            StateKind::Idle if self.script.is_empty() && self.inbox.is_empty() && !self.mission.trace.is_empty() => {
                return Some(RunEnd::Stopped)
            }
            _ => {}
        }
        if self.sim.time + 1e-9 >= self.max_time {
            return Some(RunEnd::TimedOut { state });
        }
        if let Some(limit) = self.stall_timeout {
            let waited = self.sim.time - self.mission.ms.entered_at;
            let pending_here = self.script.front().is_some_and(|e| match &e.trigger {
                Trigger::At { .. } => true,
                Trigger::AfterState { state: s, .. } => *s == state,
            });
            if state.is_quiescent() && !pending_here && self.inbox.is_empty() && waited >= limit {
                return Some(RunEnd::Stalled {
                    state,
                    reason: format!("no operator input for {waited:.1} s while in {state}"),
                });
            }
        }
        None
    }

    /// Runs until the mission ends, stalls or hits `max_time`.
    pub fn run(&mut self) -> RunEnd {
        loop {
            if let Some(end) = self.step() {
                return end;
            }
        }
    }

    /// Runs until `pred` holds or the run ends.
    pub fn run_until(&mut self, mut pred: impl FnMut(&Mission) -> bool) -> Option<RunEnd> {
        loop {
            if pred(&self.mission) {
                return None;
            }
            if let Some(end) = self.step() {
                return Some(end);
            }
        }
    }
}

/// Operator script for the full pick-and-return of `object` in `room`,
/// selecting the grasp by click or by confirmed drag.
pub fn pick_script(room: &str, object: &str, drag: bool) -> Vec<ScheduledEvent> {
    let mut s = vec![
        ScheduledEvent::at(0.0, EventKind::GoToRoom { room: room.into() }),
        ScheduledEvent::after(
            StateKind::Scanning,
            0.0,
            Action::ClickObject {
                camera: CameraId::Front,
                object: object.into(),
            },
        ),
    ];
    let grasp = if drag {
        Action::DragObject {
            camera: CameraId::Gripper,
            object: object.into(),
        }
    } else {
        Action::ClickObject {
            camera: CameraId::Gripper,
            object: object.into(),
        }
    };
    s.push(ScheduledEvent::after(StateKind::AwaitGraspSelection, 0.5, grasp));
    if drag {
        s.push(ScheduledEvent::after(
            StateKind::AwaitDragConfirm,
            0.5,
            Action::Event {
                event: EventKind::ConfirmDrag { accept: true },
            },
        ));
    }
    s
}
