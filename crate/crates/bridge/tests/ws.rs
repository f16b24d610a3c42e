//! End-to-end tests against a live `/ws` endpoint.

use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::TcpStream;
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use quadgrasp::world::Scenario;
use quadgrasp_bridge::{start, BridgeError, RunningServer, ServeConfig};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn scenario() -> Scenario {
    Scenario::from_path(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/lab_floor9.json")).unwrap()
}

async fn server(speed: f64) -> RunningServer {
    let cfg = ServeConfig {
        port: 0,
        speed,
        ..Default::default()
    };
    start(scenario(), cfg).await.unwrap()
}

async fn connect(s: &RunningServer) -> Ws {
    let (ws, _) = connect_async(format!("ws://{}/ws", s.addr)).await.unwrap();
    ws
}

async fn recv(ws: &mut Ws) -> Option<Value> {
    loop {
        match timeout(Duration::from_secs(10), ws.next()).await.expect("server went silent")? {
            Ok(Message::Text(t)) => return Some(serde_json::from_str(&t).unwrap()),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => continue,
        }
    }
}

async fn recv_until(ws: &mut Ws, pred: impl Fn(&Value) -> bool) -> Value {
    loop {
        let m = recv(ws).await.expect("connection closed");
        if pred(&m) {
            return m;
        }
    }
}

async fn send(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.to_string())).await.unwrap();
}

#[tokio::test]
async fn hello_lists_three_rooms() {
    let s = server(1.0).await;
    let mut ws = connect(&s).await;
    let hello = recv(&mut ws).await.unwrap();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["payload"]["scenario"], "lab_floor9");
    assert_eq!(hello["payload"]["protocol_version"], quadgrasp_bridge::PROTOCOL_VERSION);
    let rooms: Vec<&str> = hello["payload"]["rooms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(rooms, ["Room A", "Room B", "Room C"]);
    s.abort();
}

#[tokio::test]
async fn malformed_json_is_answered_then_closed() {
    let s = server(1.0).await;
    let mut ws = connect(&s).await;
    recv(&mut ws).await.unwrap();
    send(&mut ws, "{this is not json").await;
    let err = recv_until(&mut ws, |m| m["type"] == "error").await;
    assert_eq!(err["payload"]["code"], "malformed_json");
    // Only the close remains.
    while let Some(m) = recv(&mut ws).await {
        assert_ne!(m["type"], "error", "unexpected {m}");
    }
    s.abort();
}

#[tokio::test]
async fn unknown_room_and_type_are_errors() {
    let s = server(1.0).await;
    let mut ws = connect(&s).await;
    send(&mut ws, r#"{"type":"go_to_room","seq":1,"payload":{"room":"Nowhere"}}"#).await;
    let err = recv_until(&mut ws, |m| m["type"] == "error").await;
    assert_eq!(err["payload"]["message"], "unknown room");
    send(&mut ws, r#"{"type":"fly","seq":2,"payload":{}}"#).await;
    let err = recv_until(&mut ws, |m| m["type"] == "error").await;
    assert_eq!(err["payload"]["code"], "unknown_type");
    send(&mut ws, r#"{"type":"confirm_drag","seq":3,"payload":{"accept":"yes"}}"#).await;
    let err = recv_until(&mut ws, |m| m["type"] == "error").await;
    assert_eq!(err["payload"]["code"], "schema_violation");
    // Still connected.
    send(&mut ws, r#"{"type":"stop","seq":4}"#).await;
    recv_until(&mut ws, |m| m["type"] == "status").await;
    s.abort();
}

#[tokio::test]
async fn status_reports_scanning() {
    let s = server(8.0).await;
    let mut ws = connect(&s).await;
    send(&mut ws, r#"{"type":"go_to_room","seq":1,"payload":{"room":"Room A"}}"#).await;
    let st = recv_until(&mut ws, |m| m["type"] == "status" && m["payload"]["state"] == "Scanning").await;
    assert!(st["payload"]["detail"].as_str().unwrap().contains("scanning"));
    assert_eq!(st["payload"]["target_room"], "Room A");
    s.abort();
}

#[tokio::test]
async fn detections_stop_when_toggled_off() {
    let s = server(4.0).await;
    let mut ws = connect(&s).await;
    recv_until(&mut ws, |m| m["type"] == "detections").await;
    send(&mut ws, r#"{"type":"toggle_detection","seq":1,"payload":{"enabled":false}}"#).await;
    let off = recv_until(&mut ws, |m| m["type"] == "status" && m["payload"]["detection_enabled"] == false).await;
    let off_seq = off["seq"].as_u64().unwrap();
    let mut frames = 0;
    while frames < 6 {
        let m = recv(&mut ws).await.unwrap();
        assert!(m["seq"].as_u64().unwrap() > off_seq);
        assert_ne!(m["type"], "detections");
        frames += (m["type"] == "frame") as usize;
    }
    s.abort();
}

async fn collect(ws: &mut Ws, n: usize) -> (u64, Vec<Value>) {
    let hello = recv(ws).await.unwrap();
    assert_eq!(hello["type"], "hello");
    let mut out = Vec::new();
    while out.len() < n {
        out.push(recv(ws).await.unwrap());
    }
    (hello["seq"].as_u64().unwrap(), out)
}

fn seq(m: &Value) -> u64 {
    m["seq"].as_u64().unwrap()
}

#[tokio::test]
async fn two_clients_see_the_same_broadcasts() {
    let s = server(4.0).await;
    let mut a = connect(&s).await;
    let mut b = connect(&s).await;
    let (hello_a, seen_a) = collect(&mut a, 60).await;
    let (hello_b, seen_b) = collect(&mut b, 60).await;
    for w in seen_a.windows(2).chain(seen_b.windows(2)) {
        assert!(seq(&w[0]) < seq(&w[1]));
    }
    // Once both hellos are out, every message is a broadcast to both.
    let lo = hello_a.max(hello_b) + 2;
    let hi = seq(seen_a.last().unwrap()).min(seq(seen_b.last().unwrap()));
    let window = |v: &[Value]| -> Vec<Value> { v.iter().filter(|m| (lo..=hi).contains(&seq(m))).cloned().collect() };
    let (wa, wb) = (window(&seen_a), window(&seen_b));
    assert!(wa.len() > 20, "window too short: {}", wa.len());
    assert_eq!(wa, wb);
    s.abort();
}

#[tokio::test]
async fn occupied_port_is_reported() {
    let s = server(1.0).await;
    let cfg = ServeConfig {
        port: s.addr.port(),
        ..Default::default()
    };
    assert!(matches!(start(scenario(), cfg).await, Err(BridgeError::PortInUse(_))));
    s.abort();
}
