//! Wire protocol: a flat typed-JSON envelope `{type, seq, sim_time, payload}`
//! carried one message per WebSocket text frame.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use quadgrasp::metrics::{MetricsRecord, MetricsSummary};
use quadgrasp::mission::{EventKind, Mission, StateKind};
use quadgrasp::perception::DetectionBox;
use quadgrasp::world::{CameraId, LabelImage, Posture, Scenario, SensorFrame, Simulator};

use crate::rle::{self, RleError};

pub const PROTOCOL_VERSION: &str = "1.0";

/// Client-to-server message types.
pub const INBOUND_TYPES: [&str; 7] = [
    "go_to_room",
    "begin_scan",
    "stop",
    "select_click",
    "select_drag",
    "confirm_drag",
    "toggle_detection",
];

/// Server-to-client message types.
pub const OUTBOUND_TYPES: [&str; 7] = [
    "hello",
    "status",
    "detections",
    "frame",
    "confirm_request",
    "metrics",
    "error",
];

/// Depth preview range (m): depths map linearly onto 1..=255, 0 means no return.
pub const DEPTH_NEAR: f64 = 0.05;
pub const DEPTH_FAR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Malformed(_) => "malformed_json",
            ProtocolError::UnknownType(_) => "unknown_type",
            ProtocolError::SchemaViolation(_) => "schema_violation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoPayload {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoToRoom {
    pub room: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectClick {
    pub camera: CameraId,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectDrag {
    pub camera: CameraId,
    /// `[u0, v0, u1, v1]` in pixels; corners may come in any order.
    pub rect: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfirmDrag {
    pub accept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleDetection {
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Inbound {
    GoToRoom(GoToRoom),
    BeginScan(NoPayload),
    Stop(NoPayload),
    SelectClick(SelectClick),
    SelectDrag(SelectDrag),
    ConfirmDrag(ConfirmDrag),
    ToggleDetection(ToggleDetection),
}

impl Inbound {
    pub fn to_event(&self) -> EventKind {
        match self {
            Inbound::GoToRoom(p) => EventKind::GoToRoom { room: p.room.clone() },
            Inbound::BeginScan(_) => EventKind::BeginScan,
            Inbound::Stop(_) => EventKind::Stop,
            Inbound::SelectClick(p) => EventKind::SelectClick {
                camera: p.camera,
                u: p.u,
                v: p.v,
            },
            Inbound::SelectDrag(p) => EventKind::SelectDrag {
                camera: p.camera,
                rect: p.rect,
            },
            Inbound::ConfirmDrag(p) => EventKind::ConfirmDrag { accept: p.accept },
            Inbound::ToggleDetection(p) => EventKind::ToggleDetection { enabled: p.enabled },
        }
    }

    pub fn from_event(event: &EventKind) -> Self {
        match event {
            EventKind::GoToRoom { room } => Inbound::GoToRoom(GoToRoom { room: room.clone() }),
            EventKind::BeginScan => Inbound::BeginScan(NoPayload {}),
            EventKind::Stop => Inbound::Stop(NoPayload {}),
            EventKind::SelectClick { camera, u, v } => Inbound::SelectClick(SelectClick {
                camera: *camera,
                u: *u,
                v: *v,
            }),
            EventKind::SelectDrag { camera, rect } => Inbound::SelectDrag(SelectDrag {
                camera: *camera,
                rect: *rect,
            }),
            EventKind::ConfirmDrag { accept } => Inbound::ConfirmDrag(ConfirmDrag { accept: *accept }),
            EventKind::ToggleDetection { enabled } => Inbound::ToggleDetection(ToggleDetection { enabled: *enabled }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InboundMessage {
    pub seq: u64,
    pub body: Inbound,
}

impl InboundMessage {
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(&self.body).expect("inbound serializes");
        v["seq"] = self.seq.into();
        v.to_string()
    }
}

/// Splits a JSON object into its type and payload and decodes the payload.
/// `allowed` lists the extra top-level keys the caller tolerates.
pub(crate) fn decode_inbound_object(obj: &Map<String, Value>, allowed: &[&str]) -> Result<Inbound, ProtocolError> {
    let ty = match obj.get("type") {
        Some(Value::String(t)) => t.as_str(),
        Some(_) => return Err(ProtocolError::SchemaViolation("type must be a string".into())),
        None => return Err(ProtocolError::SchemaViolation("missing type".into())),
    };
    if !INBOUND_TYPES.contains(&ty) {
        return Err(ProtocolError::UnknownType(ty.to_string()));
    }
    if let Some(k) = obj.keys().find(|k| !["type", "payload"].contains(&k.as_str()) && !allowed.contains(&k.as_str())) {
        return Err(ProtocolError::SchemaViolation(format!("unexpected field {k:?}")));
    }
    let payload = match obj.get("payload") {
        None => Value::Object(Map::new()),
        Some(p @ Value::Object(_)) => p.clone(),
        Some(_) => return Err(ProtocolError::SchemaViolation("payload must be an object".into())),
    };
    let tagged = serde_json::json!({ "type": ty, "payload": payload });
    serde_json::from_value(tagged).map_err(|e| ProtocolError::SchemaViolation(format!("{ty}: {e}")))
}

/// Parses one client text frame.
pub fn parse_inbound(text: &str) -> Result<InboundMessage, ProtocolError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ProtocolError::Malformed("message is not a JSON object".into()));
    };
    let body = decode_inbound_object(&obj, &["seq", "sim_time"])?;
    let seq = match obj.get("seq") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ProtocolError::SchemaViolation("seq must be a non-negative integer".into()))?,
        None => return Err(ProtocolError::SchemaViolation("missing seq".into())),
    };
    if obj.get("sim_time").is_some_and(|t| !t.is_number()) {
        return Err(ProtocolError::SchemaViolation("sim_time must be a number".into()));
    }
    Ok(InboundMessage { seq, body })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomInfo {
    pub name: String,
    pub entry_waypoint: [f64; 2],
    pub scan_center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraInfo {
    pub camera: CameraId,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: String,
    pub scenario: String,
    pub rooms: Vec<RoomInfo>,
    pub cameras: Vec<CameraInfo>,
    pub status_hz: f64,
    pub frame_hz: f64,
}

impl Hello {
    pub fn new(scenario: &Scenario, status_hz: f64, frame_hz: f64) -> Self {
        let k_front = scenario.cameras.front.intrinsics;
        let k_grip = scenario.cameras.gripper.intrinsics;
        Self {
            protocol_version: PROTOCOL_VERSION.into(),
            scenario: scenario.name.clone(),
            rooms: scenario
                .scene
                .rooms
                .iter()
                .map(|r| RoomInfo {
                    name: r.name.clone(),
                    entry_waypoint: r.entry_waypoint,
                    scan_center: r.scan_center,
                })
                .collect(),
            cameras: vec![
                CameraInfo {
                    camera: CameraId::Front,
                    width: k_front.width,
                    height: k_front.height,
                },
                CameraInfo {
                    camera: CameraId::Gripper,
                    width: k_grip.width,
                    height: k_grip.height,
                },
            ],
            status_hz,
            frame_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub state: StateKind,
    pub detail: String,
    pub target_room: Option<String>,
    pub current_room: Option<String>,
    pub target_object: Option<String>,
    pub warning: Option<String>,
    pub detection_enabled: bool,
    pub consecutive_failures: u32,
    pub location: Location,
    pub posture: Posture,
    pub holding: Option<String>,
}

impl Status {
    pub fn snapshot(mission: &Mission, sim: &Simulator) -> Self {
        let s = mission.status();
        let b = sim.robot.base;
        Self {
            state: s.state,
            detail: s.detail,
            target_room: s.target_room,
            current_room: s.current_room,
            target_object: s.target_object,
            warning: s.warning,
            detection_enabled: s.detection_enabled,
            consecutive_failures: s.consecutive_failures,
            location: Location {
                x: b.x,
                y: b.y,
                heading: b.heading,
            },
            posture: sim.robot.posture,
            holding: sim.robot.held_object.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxInfo {
    pub object_id: String,
    pub class_name: String,
    /// `[u_min, v_min, u_max, v_max]` in pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub camera: CameraId,
    pub boxes: Vec<BoxInfo>,
}

impl Detections {
    pub fn new(camera: CameraId, boxes: &[DetectionBox]) -> Self {
        Self {
            camera,
            boxes: boxes
                .iter()
                .map(|d| BoxInfo {
                    object_id: d.object_id.clone(),
                    class_name: d.class_name.clone(),
                    bbox: [d.bbox.u_min, d.bbox.v_min, d.bbox.u_max, d.bbox.v_max],
                    confidence: d.confidence,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub label: u16,
    pub object_id: Option<String>,
    pub class_name: Option<String>,
    /// `#rrggbb`.
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPreview {
    pub near: f64,
    pub far: f64,
    /// Run-length encoded 8-bit depth codes.
    pub runs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub camera: CameraId,
    pub tick: u64,
    pub width: usize,
    pub height: usize,
    /// Run-length encoded label image, row-major.
    pub labels: Vec<u32>,
    pub palette: Vec<PaletteEntry>,
    pub depth: DepthPreview,
}

const BACKGROUND_COLOR: &str = "#202020";
const CLASS_COLORS: [&str; 8] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45",
];

/// 8-bit depth code: 0 for no return, else 1..=255 over `[DEPTH_NEAR, DEPTH_FAR]`.
pub fn depth_code(d: f64) -> u16 {
    if d <= 0.0 || !d.is_finite() {
        return 0;
    }
    let t = ((d - DEPTH_NEAR) / (DEPTH_FAR - DEPTH_NEAR)).clamp(0.0, 1.0);
    1 + (t * 254.0).round() as u16
}

impl Frame {
    pub fn new(frame: &SensorFrame) -> Self {
        let mut classes: Vec<&str> = Vec::new();
        let mut palette = vec![PaletteEntry {
            label: 0,
            object_id: None,
            class_name: None,
            color: BACKGROUND_COLOR.into(),
        }];
        for (i, (id, class)) in frame.object_ids.iter().zip(&frame.class_names).enumerate() {
            let c = classes.iter().position(|c| c == class).unwrap_or_else(|| {
                classes.push(class);
                classes.len() - 1
            });
            palette.push(PaletteEntry {
                label: i as u16 + 1,
                object_id: Some(id.clone()),
                class_name: Some(class.clone()),
                color: CLASS_COLORS[c % CLASS_COLORS.len()].into(),
            });
        }
        let depth: Vec<u16> = frame.depth.data.iter().map(|&d| depth_code(d)).collect();
        Self {
            camera: frame.camera,
            tick: frame.tick,
            width: frame.labels.width,
            height: frame.labels.height,
            labels: rle::encode(&frame.labels.data),
            palette,
            depth: DepthPreview {
                near: DEPTH_NEAR,
                far: DEPTH_FAR,
                runs: rle::encode(&depth),
            },
        }
    }

    pub fn decode_labels(&self) -> Result<LabelImage, RleError> {
        Ok(LabelImage {
            width: self.width,
            height: self.height,
            data: rle::decode(&self.labels, self.width * self.height)?,
        })
    }

    pub fn decode_depth(&self) -> Result<Vec<u16>, RleError> {
        rle::decode(&self.depth.runs, self.width * self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmRequest {
    pub object_id: Option<String>,
    pub class_name: Option<String>,
    /// Resolved selection box `[u_min, v_min, u_max, v_max]`.
    pub rect: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub record: MetricsRecord,
    /// Running totals over the session.
    pub summary: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Outbound {
    Hello(Hello),
    Status(Status),
    Detections(Detections),
    Frame(Frame),
    ConfirmRequest(ConfirmRequest),
    Metrics(Metrics),
    Error(ErrorReply),
}

impl Outbound {
    pub fn type_name(&self) -> &'static str {
        match self {
            Outbound::Hello(_) => "hello",
            Outbound::Status(_) => "status",
            Outbound::Detections(_) => "detections",
            Outbound::Frame(_) => "frame",
            Outbound::ConfirmRequest(_) => "confirm_request",
            Outbound::Metrics(_) => "metrics",
            Outbound::Error(_) => "error",
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Outbound::Error(ErrorReply {
            code: code.into(),
            message: message.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub sim_time: f64,
    #[serde(flatten)]
    pub message: Outbound,
}

impl Envelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }
}
