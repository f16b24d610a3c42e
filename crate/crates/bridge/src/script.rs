//! Operator scripts: the wire protocol's inbound messages, one JSON object per
//! line, each with a trigger. `{"t": 2.0, "type": "begin_scan"}` fires at a
//! simulation time; `{"after": {"state": "Scanning", "delay": 1.0}, ...}` fires
//! that long after the mission entered a state. Two script-only types,
//! `click_object` and `drag_object` with payload `{camera, object}`, select an
//! object by id once it is visible, since pixel coordinates are not known in
//! advance.

use serde::Deserialize;
use serde_json::{Map, Value};
use thiserror::Error;

use quadgrasp::mission::{Action, EventKind, ScheduledEvent, StateKind, Trigger};
use quadgrasp::world::CameraId;

use crate::protocol::decode_inbound_object;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("script entry {entry}: {message}")]
pub struct ScriptError {
    /// 1-based entry number.
    pub entry: usize,
    pub message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AfterSpec {
    state: StateKind,
    #[serde(default)]
    delay: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectSelect {
    camera: CameraId,
    object: String,
}

fn parse_entry(obj: &Map<String, Value>, rooms: &[String]) -> Result<ScheduledEvent, String> {
    let trigger = match (obj.get("t"), obj.get("after")) {
        (Some(t), None) => {
            let t = t.as_f64().filter(|t| t.is_finite() && *t >= 0.0).ok_or("t must be a non-negative number")?;
            Trigger::At { t }
        }
        (None, Some(a)) => {
            let a: AfterSpec = serde_json::from_value(a.clone()).map_err(|e| format!("after: {e}"))?;
            if !(a.delay.is_finite() && a.delay >= 0.0) {
                return Err("after.delay must be a non-negative number".into());
            }
            Trigger::AfterState {
                state: a.state,
                delay: a.delay,
            }
        }
        _ => return Err("exactly one of t and after is required".into()),
    };
    let ty = obj.get("type").and_then(Value::as_str).unwrap_or_default();
    let action = if ty == "click_object" || ty == "drag_object" {
        if let Some(k) = obj.keys().find(|k| !["t", "after", "type", "payload"].contains(&k.as_str())) {
            return Err(format!("unexpected field {k:?}"));
        }
        let payload = obj.get("payload").cloned().unwrap_or(Value::Null);
        let sel: ObjectSelect = serde_json::from_value(payload).map_err(|e| format!("{ty}: {e}"))?;
        if ty == "click_object" {
            Action::ClickObject {
                camera: sel.camera,
                object: sel.object,
            }
        } else {
            Action::DragObject {
                camera: sel.camera,
                object: sel.object,
            }
        }
    } else {
        let body = decode_inbound_object(obj, &["t", "after", "seq"]).map_err(|e| e.to_string())?;
        let event = body.to_event();
        if let EventKind::GoToRoom { room } = &event {
            if !rooms.contains(room) {
                return Err(format!("unknown room {room:?}"));
            }
        }
        Action::Event { event }
    };
    Ok(ScheduledEvent { trigger, action })
}

/// Parses a script given as JSON lines or as one JSON array. Blank lines and
/// lines starting with `#` are skipped. `rooms` are the scenario's room names.
pub fn parse_script(text: &str, rooms: &[String]) -> Result<Vec<ScheduledEvent>, ScriptError> {
    let entries: Vec<Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(|e| ScriptError {
            entry: 0,
            message: e.to_string(),
        })?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| ScriptError {
                    entry: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?
    };
    entries
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let err = |message: String| ScriptError { entry: i + 1, message };
            let obj = v.as_object().ok_or_else(|| err("entry is not an object".into()))?;
            parse_entry(obj, rooms).map_err(err)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rooms() -> Vec<String> {
        vec!["Room A".into(), "Room B".into()]
    }

    #[test]
    fn parses_timed_and_state_triggers() {
        let text = r#"
# pick the charger
{"t": 0.0, "type": "go_to_room", "payload": {"room": "Room A"}}
{"after": {"state": "Scanning", "delay": 0.5}, "type": "click_object", "payload": {"camera": "front", "object": "charger"}}
{"after": {"state": "AwaitDragConfirm"}, "type": "confirm_drag", "payload": {"accept": true}}
"#;
        let s = parse_script(text, &rooms()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], ScheduledEvent::at(0.0, EventKind::GoToRoom { room: "Room A".into() }));
        assert_eq!(
            s[1].trigger,
            Trigger::AfterState {
                state: StateKind::Scanning,
                delay: 0.5
            }
        );
        assert_eq!(
            s[2].action,
            Action::Event {
                event: EventKind::ConfirmDrag { accept: true }
            }
        );
    }

    #[test]
    fn array_form_matches_lines() {
        let a = parse_script(r#"[{"t": 1, "type": "stop"}]"#, &rooms()).unwrap();
        let b = parse_script(r#"{"t": 1, "type": "stop"}"#, &rooms()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_entries_name_their_position() {
        for (text, entry) in [
            ("{\"t\": 0, \"type\": \"go_to_room\", \"payload\": {\"room\": \"Nowhere\"}}", 1),
            ("{\"t\": 0, \"type\": \"stop\"}\n{\"type\": \"stop\"}", 2),
            ("{\"t\": 0, \"after\": {\"state\": \"Idle\"}, \"type\": \"stop\"}", 1),
            ("{\"t\": -1, \"type\": \"stop\"}", 1),
            ("{\"t\": 0, \"type\": \"jump\"}", 1),
            ("{\"t\": 0, \"type\": \"click_object\", \"payload\": {\"camera\": \"front\"}}", 1),
            ("{\"t\": 0}\n", 1),
            ("{oops", 1),
        ] {
            let e = parse_script(text, &rooms()).unwrap_err();
            assert_eq!(e.entry, entry, "{text}: {e}");
        }
    }
}
