//! The single mission loop behind the server. Connection handlers only pass
//! messages in; every outbound message is numbered and queued here, so each
//! client sees one totally ordered stream.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use tokio::sync::mpsc::{self, error::TrySendError};

use quadgrasp::metrics::{MetricsRecord, MetricsSummary};
use quadgrasp::mission::{EventKind, Mission, OperatorEvent, StateKind};
use quadgrasp::perception;
use quadgrasp::world::{CameraId, Command, Scenario, Simulator};

use crate::protocol::{
    ConfirmRequest, Detections, Envelope, Frame, Hello, InboundMessage, Metrics, Outbound, ProtocolError, Status,
};

pub type ClientId = u64;

/// What a connection writer receives.
#[derive(Debug, Clone, PartialEq)]
pub enum Outgoing {
    Text(Arc<str>),
    /// Close the socket with a WebSocket close code and reason.
    Close { code: u16, reason: String },
}

/// Close code for a payload that is not valid JSON.
pub const CLOSE_MALFORMED: u16 = 1007;

#[derive(Debug)]
pub enum LoopMsg {
    Connect { id: ClientId, tx: mpsc::Sender<Outgoing> },
    Inbound { id: ClientId, msg: Result<InboundMessage, ProtocolError> },
    Disconnect { id: ClientId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub seed: u64,
    /// Control period (s of simulated time).
    pub dt: f64,
    pub status_hz: f64,
    pub frame_hz: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: 0.05,
            status_hz: 10.0,
            frame_hz: 5.0,
        }
    }
}

#[derive(Debug)]
struct Client {
    tx: mpsc::Sender<Outgoing>,
    last_seq: Option<u64>,
}

#[derive(Debug)]
pub struct Session {
    pub sim: Simulator,
    pub mission: Mission,
    cfg: SessionConfig,
    clients: BTreeMap<ClientId, Client>,
    pending: VecDeque<(ClientId, EventKind)>,
    seq: u64,
    event_seq: u64,
    status_every: u64,
    frame_every: u64,
    last_state: StateKind,
    metrics_sent: usize,
    records: Vec<MetricsRecord>,
}

fn every(dt: f64, hz: f64) -> u64 {
    ((1.0 / (hz * dt)).round() as u64).max(1)
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

impl Session {
    pub fn new(scenario: Scenario, cfg: SessionConfig) -> Self {
        let sim = Simulator::new(scenario, cfg.seed);
        Self::with_parts(sim, Mission::default(), cfg)
    }

    /// A session over an already prepared simulator and mission.
    pub fn with_parts(sim: Simulator, mission: Mission, cfg: SessionConfig) -> Self {
        let last_state = mission.state();
        Self {
            sim,
            mission,
            status_every: every(cfg.dt, cfg.status_hz),
            frame_every: every(cfg.dt, cfg.frame_hz),
            cfg,
            clients: BTreeMap::new(),
            pending: VecDeque::new(),
            seq: 0,
            event_seq: 0,
            last_state,
            metrics_sent: 0,
            records: Vec::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Session-wide grasp records so far.
    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    fn envelope(&mut self, message: Outbound) -> Arc<str> {
        self.seq += 1;
        Envelope {
            seq: self.seq,
            sim_time: self.sim.time,
            message,
        }
        .to_json()
        .into()
    }

    /// Queues `out` to one client; a full buffer drops the client.
    fn deliver(&mut self, id: ClientId, out: Outgoing) {
        let Some(c) = self.clients.get(&id) else { return };
        match c.tx.try_send(out) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => {
                log::warn!("client {id} dropped: send buffer full");
                self.clients.remove(&id);
            }
            Err(TrySendError::Closed(_)) => {
                self.clients.remove(&id);
            }
        }
    }

    fn send_to(&mut self, id: ClientId, message: Outbound) {
        if self.clients.contains_key(&id) {
            let text = self.envelope(message);
            self.deliver(id, Outgoing::Text(text));
        }
    }

    fn broadcast(&mut self, message: Outbound) {
        if self.clients.is_empty() {
            return;
        }
        let text = self.envelope(message);
        let ids: Vec<ClientId> = self.clients.keys().copied().collect();
        for id in ids {
            self.deliver(id, Outgoing::Text(text.clone()));
        }
    }

    pub fn handle(&mut self, msg: LoopMsg) {
        match msg {
            LoopMsg::Connect { id, tx } => {
                self.clients.insert(id, Client { tx, last_seq: None });
                let hello = Hello::new(&self.sim.scenario, self.cfg.status_hz, self.cfg.frame_hz);
                self.send_to(id, Outbound::Hello(hello));
                let status = Status::snapshot(&self.mission, &self.sim);
                self.send_to(id, Outbound::Status(status));
            }
            LoopMsg::Disconnect { id } => {
                self.clients.remove(&id);
            }
            LoopMsg::Inbound { id, msg: Err(e) } => {
                let malformed = matches!(e, ProtocolError::Malformed(_));
                self.send_to(id, Outbound::error(e.code(), e.to_string()));
                if malformed {
                    self.deliver(
                        id,
                        Outgoing::Close {
                            code: CLOSE_MALFORMED,
                            reason: "malformed json".into(),
                        },
                    );
                    self.clients.remove(&id);
                }
            }
            LoopMsg::Inbound { id, msg: Ok(m) } => {
                let Some(c) = self.clients.get_mut(&id) else { return };
                if c.last_seq.is_some_and(|s| m.seq <= s) {
                    let message = format!("seq {} after {}", m.seq, c.last_seq.unwrap_or_default());
                    self.send_to(id, Outbound::error("out_of_order", message));
                    return;
                }
                c.last_seq = Some(m.seq);
                let event = m.body.to_event();
                if let EventKind::GoToRoom { room } = &event {
                    if self.sim.scene.room(room).is_none() {
                        self.send_to(id, Outbound::error("unknown_room", "unknown room"));
                        return;
                    }
                }
                self.pending.push_back((id, event));
            }
        }
    }

    /// One control tick: at most one operator event, the mission tick, then
    /// the broadcasts due on this tick.
    pub fn step(&mut self) {
        let mut cmd = Command::default();
        let mut applied = false;
        if let Some((id, kind)) = self.pending.pop_front() {
            self.event_seq += 1;
            let ev = OperatorEvent {
                seq: self.event_seq,
                kind,
            };
            match self.mission.handle_event(&mut self.sim, &ev) {
                Ok(c) => {
                    cmd = c;
                    applied = true;
                }
                Err(e) => self.send_to(id, Outbound::error("rejected", e.to_string())),
            }
        }
        let tick_cmd = self.mission.tick(&mut self.sim, self.cfg.dt);
        self.sim.apply(&merge(cmd, tick_cmd), self.cfg.dt);
        self.publish(applied);
    }

    fn publish(&mut self, event_applied: bool) {
        let state = self.mission.state();
        let entered = state != self.last_state;
        self.last_state = state;
        let tick = self.sim.tick;
        if event_applied || entered || tick % self.status_every == 0 {
            let status = Status::snapshot(&self.mission, &self.sim);
            self.broadcast(Outbound::Status(status));
        }
        if entered && state == StateKind::AwaitDragConfirm {
            if let Some(sel) = &self.mission.ms.context.selection {
                let b = sel.resolved_bbox;
                let req = ConfirmRequest {
                    object_id: sel.target_object_id.clone(),
                    class_name: sel.target_class.clone(),
                    rect: [b.u_min, b.v_min, b.u_max, b.v_max],
                };
                self.broadcast(Outbound::ConfirmRequest(req));
            }
        }
        while self.metrics_sent < self.mission.metrics.len() {
            let record = self.mission.metrics[self.metrics_sent].clone();
            self.metrics_sent += 1;
            let record = MetricsRecord {
                trial: self.records.len() as u32 + 1,
                ..record
            };
            self.records.push(record.clone());
            let summary = MetricsSummary::of(&self.records);
            self.broadcast(Outbound::Metrics(Metrics { record, summary }));
        }
        if tick % self.frame_every == 0 && !self.clients.is_empty() {
            for camera in [CameraId::Front, CameraId::Gripper] {
                let frame = self.sim.render(camera);
                self.broadcast(Outbound::Frame(Frame::new(&frame)));
                if self.mission.detection_enabled() {
                    let boxes = perception::detect(&frame, self.sim.scenario.noise.detection_jitter_px, self.sim.seed);
                    self.broadcast(Outbound::Detections(Detections::new(camera, &boxes)));
                }
            }
        }
    }
}
