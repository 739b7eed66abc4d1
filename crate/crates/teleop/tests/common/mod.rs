#![allow(dead_code)]

use std::time::Duration;

use futures::{SinkExt, StreamExt};
use limbkit::config::{Config, Fleet};
use limbkit::driver::WorldSource;
use limbkit::scenarios::ScenarioKind;
use limbkit_teleop::protocol::{AckBody, ErrorBody, Event, ServerMessage, TelemetryBody};
use limbkit_teleop::service::Service;
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

const PATIENCE: Duration = Duration::from_secs(20);

/// A pallet carrying a bent and a straight limb, plus one loose limb.
pub const BENCH: &str = r#"
name = "bench"
edges = [["bent.base", "pallet.p0"], ["straight.base", "pallet.p1"]]

[[module]]
id = "pallet"
kind = "pallet"

[[module]]
id = "bent"
kind = "limb"

[[module]]
id = "straight"
kind = "limb"

[[module]]
id = "loose"
kind = "limb"

[joints]
"bent/j2" = -0.6
"bent/j3" = 1.4
"#;

pub fn bench() -> WorldSource {
    WorldSource::Fleet {
        fleet: Fleet::from_toml_str(BENCH).unwrap(),
    }
}

pub fn scenario(kind: ScenarioKind) -> WorldSource {
    WorldSource::Scenario { scenario: kind }
}

/// Loopback service with streams off and an unpaced clock unless changed.
pub fn config(edit: impl FnOnce(&mut Config)) -> Config {
    let mut c = Config::default();
    c.service.bind = "127.0.0.1:0".into();
    c.service.telemetry_hz = 0.0;
    c.service.snapshot_hz = 0.0;
    c.service.realtime_factor = 0.0;
    edit(&mut c);
    c
}

pub async fn start(config: &Config, source: WorldSource) -> Service {
    Service::start(config, source).await.unwrap()
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    next_id: u64,
}

impl Client {
    pub async fn connect(service: &Service) -> Client {
        Client::connect_url(&service.url()).await
    }

    pub async fn connect_url(url: &str) -> Client {
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Client { ws, next_id: 0 }
    }

    pub async fn send_raw(&mut self, text: String) {
        self.ws.send(Message::text(text)).await.unwrap();
    }

    /// Sends a command and returns the id it was given.
    pub async fn send(&mut self, kind: &str, payload: Value) -> Value {
        self.next_id += 1;
        let id = json!(format!("c{}", self.next_id));
        let frame = json!({ "id": id, "type": kind, "payload": payload });
        self.send_raw(frame.to_string()).await;
        id
    }

    pub async fn recv(&mut self) -> ServerMessage {
        loop {
            let frame = tokio::time::timeout(PATIENCE, self.ws.next())
                .await
                .expect("server went quiet")
                .expect("stream ended")
                .unwrap();
            if let Message::Text(text) = frame {
                return serde_json::from_str(&text).unwrap_or_else(|e| panic!("{e}: {text}"));
            }
        }
    }

    /// Next message matching `keep`; others are discarded.
    pub async fn until(&mut self, mut keep: impl FnMut(&ServerMessage) -> bool) -> ServerMessage {
        loop {
            let msg = self.recv().await;
            if keep(&msg) {
                return msg;
            }
        }
    }

    pub async fn reply(&mut self, id: &Value) -> ServerMessage {
        self.until(|m| &m.id == id && m.is_terminal()).await
    }

    pub async fn request(&mut self, kind: &str, payload: Value) -> ServerMessage {
        let id = self.send(kind, payload).await;
        self.reply(&id).await
    }

    pub async fn ack(&mut self, kind: &str, payload: Value) -> AckBody {
        match self.request(kind, payload).await.event {
            Event::Ack(body) => body,
            other => panic!("{kind}: expected ack, got {other:?}"),
        }
    }

    pub async fn error(&mut self, kind: &str, payload: Value) -> ErrorBody {
        match self.request(kind, payload).await.event {
            Event::Error(body) => body,
            other => panic!("{kind}: expected error, got {other:?}"),
        }
    }

    pub async fn snapshot(&mut self) -> limbkit::sim::WorldSnapshot {
        match self.request("query", json!({})).await.event {
            Event::Snapshot(s) => *s,
            other => panic!("query: expected snapshot, got {other:?}"),
        }
    }

    pub async fn telemetry(&mut self) -> TelemetryBody {
        match self
            .until(|m| matches!(m.event, Event::Telemetry(_)))
            .await
            .event
        {
            Event::Telemetry(body) => body,
            _ => unreachable!(),
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

pub fn joint_target(snapshot: &limbkit::sim::WorldSnapshot, joint: &str) -> f64 {
    snapshot
        .joints
        .iter()
        .find(|j| j.joint_id == joint)
        .unwrap_or_else(|| panic!("no joint {joint}"))
        .target_rev
}
