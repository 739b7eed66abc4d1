//! Wire protocol: one JSON document per WebSocket text frame.
//!
//! Client to server:
//!
//! ```json
//! {"id": "c1", "type": "joint", "payload": {"joint_id": "a/j2", "target_rev": 0.1}}
//! ```
//!
//! Server to client:
//!
//! ```json
//! {"kind": "ack", "id": "c1", "body": {"seq": 7, "step": 1200, "time_s": 1.2, "result": "joint", "duration_s": 0.61}}
//! ```
//!
//! Units: joint angles in rev, Cartesian lengths in m, orientations in rad,
//! times in s, speeds in m/s or rev/s, currents in A.

use limbkit::driver::{CommandOutcome, WorldCommand};
use limbkit::sequences::SequenceEvent;
use limbkit::sim::{SimEvent, TelemetryRecord, WorldSnapshot};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Message types a client may send.
pub const REQUEST_TYPES: [&str; 14] = [
    "joint",
    "ik",
    "gripper",
    "attach",
    "detach",
    "run_sequence",
    "set_mode",
    "inchworm",
    "drive",
    "gait",
    "stop_gait",
    "query",
    "subscribe",
    "ping",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    World(WorldCommand),
    /// Telemetry rate for this session, Hz. Zero stops the stream.
    Subscribe {
        rate_hz: f64,
    },
    /// Acked by the session without touching the world.
    Ping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMessage {
    /// Echoed on every reply. Any JSON value except null.
    pub id: Value,
    pub request: Request,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    #[serde(default)]
    id: Value,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    payload: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubscribePayload {
    rate_hz: f64,
}

impl ClientMessage {
    /// Parses a frame. On failure the error still carries the id when one
    /// could be read.
    pub fn parse(text: &str) -> Result<Self, (Value, ErrorBody)> {
        let invalid = |id: Value, message: String| (id, ErrorBody::new("INVALID_REQUEST", message));
        let env: Envelope = serde_json::from_str(text).map_err(|e| {
            let id = serde_json::from_str::<Value>(text)
                .ok()
                .and_then(|v| v.get("id").cloned())
                .unwrap_or(Value::Null);
            invalid(id, format!("malformed message: {e}"))
        })?;
        let id = env.id;
        if id.is_null() {
            return Err(invalid(id, "missing id".into()));
        }
        let payload = match env.payload {
            Value::Null => Value::Object(Default::default()),
            p @ Value::Object(_) => p,
            _ => return Err(invalid(id, "payload must be an object".into())),
        };
        let request = match env.kind.as_str() {
            "subscribe" => {
                let p: SubscribePayload = serde_json::from_value(payload)
                    .map_err(|e| invalid(id.clone(), format!("subscribe: {e}")))?;
                Request::Subscribe { rate_hz: p.rate_hz }
            }
            "ping" => Request::Ping,
            kind if REQUEST_TYPES.contains(&kind) => {
                let mut object = payload;
                object
                    .as_object_mut()
                    .expect("checked above")
                    .insert("type".into(), Value::String(kind.into()));
                let command: WorldCommand = serde_json::from_value(object)
                    .map_err(|e| invalid(id.clone(), format!("{kind}: {e}")))?;
                Request::World(command)
            }
            other => return Err(invalid(id, format!("unknown message type {other:?}"))),
        };
        Ok(ClientMessage { id, request })
    }

    pub fn to_json(&self) -> String {
        let (kind, payload) = match &self.request {
            Request::World(command) => {
                let mut v = serde_json::to_value(command).expect("commands serialize");
                let kind = v
                    .as_object_mut()
                    .and_then(|o| o.remove("type"))
                    .and_then(|t| t.as_str().map(str::to_owned))
                    .expect("commands are tagged");
                (kind, v)
            }
            Request::Subscribe { rate_hz } => (
                "subscribe".into(),
                serde_json::json!({ "rate_hz": rate_hz }),
            ),
            Request::Ping => ("ping".into(), serde_json::json!({})),
        };
        serde_json::json!({ "id": self.id, "type": kind, "payload": payload }).to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ErrorBody {
            code: code.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckBody {
    /// Position of the command in the service-wide mutation order. Absent
    /// for requests answered by the session itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    /// World step the command was applied at.
    pub step: u64,
    pub time_s: f64,
    #[serde(flatten)]
    pub outcome: CommandOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subscription: Option<Subscription>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub rate_hz: f64,
    /// Ticks between batches.
    pub every_ticks: u64,
}

/// Decimated telemetry: the rows of one tick, every `every_ticks` ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryBatch {
    pub step: u64,
    pub time_s: f64,
    pub every_ticks: u64,
    pub records: Vec<TelemetryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryBody {
    /// Batches this session lost since its previous batch.
    pub dropped: u64,
    #[serde(flatten)]
    pub batch: TelemetryBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ProgressBody {
    /// A step of a running sequence started, completed or failed.
    Sequence { event: SequenceEvent },
    /// The sequence ended; `error` is set when it failed and rolled back.
    SequenceEnd {
        script: String,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ErrorBody>,
    },
    /// Completion, timeout or abort of an IK motion, or the end of a gait.
    World { event: SimEvent },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum Event {
    Ack(AckBody),
    Error(ErrorBody),
    Telemetry(TelemetryBody),
    Snapshot(Box<WorldSnapshot>),
    SequenceEvent(ProgressBody),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    /// Id of the client message this answers; null for unsolicited events.
    #[serde(default)]
    pub id: Value,
    #[serde(flatten)]
    pub event: Event,
}

impl ServerMessage {
    pub fn new(id: Value, event: Event) -> Self {
        ServerMessage { id, event }
    }

    pub fn error(id: Value, body: ErrorBody) -> Self {
        ServerMessage::new(id, Event::Error(body))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    /// Whether this is the one terminal reply of a command. A query is
    /// answered by a snapshot carrying its id.
    pub fn is_terminal(&self) -> bool {
        match self.event {
            Event::Ack(_) | Event::Error(_) => true,
            Event::Snapshot(_) => !self.id.is_null(),
            Event::Telemetry(_) | Event::SequenceEvent(_) => false,
        }
    }
}
