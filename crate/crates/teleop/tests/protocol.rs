use limbkit::driver::{CommandOutcome, WorldCommand};
use limbkit::sim::TelemetryRecord;
use limbkit_teleop::protocol::{
    AckBody, ClientMessage, ErrorBody, Event, Request, ServerMessage, TelemetryBatch, TelemetryBody,
    REQUEST_TYPES,
};
use serde_json::{json, Value};

fn frame(kind: &str, payload: Value) -> String {
    json!({"id": "x", "type": kind, "payload": payload}).to_string()
}

#[test]
fn every_request_type_parses_and_round_trips() {
    let payloads = [
        ("joint", json!({"joint_id": "a/j2", "target_rev": 0.1, "mode": "passthrough"})),
        (
            "ik",
            json!({"root": "a.base", "tip": "a.tool",
                   "target": {"kind": "absolute", "position": [0.3, 0.0, 0.2], "rpy": [0.0, 1.0, 0.0]}}),
        ),
        ("gripper", json!({"port": "a.tool", "state": "open"})),
        ("attach", json!({"a": "a.tool", "b": "b.tool"})),
        ("detach", json!({"a": "a.tool", "b": "b.tool"})),
        ("run_sequence", json!({"script": "limb_to_limb", "params": {"g_contact": 0.02}})),
        ("set_mode", json!({"module": "bridge", "mode": "suspension"})),
        ("inchworm", json!({"from": "pallet.p0", "to": "pallet.p1"})),
        ("drive", json!({"module": "bridge", "speed": 0.5})),
        ("gait", json!({"limb": "spin", "cycles": 3})),
        ("stop_gait", json!({})),
        ("query", json!({})),
        ("subscribe", json!({"rate_hz": 10.0})),
        ("ping", json!({})),
    ];
    assert_eq!(payloads.len(), REQUEST_TYPES.len());
    for (kind, payload) in payloads {
        assert!(REQUEST_TYPES.contains(&kind));
        let msg = ClientMessage::parse(&frame(kind, payload)).unwrap_or_else(|e| panic!("{kind}: {e:?}"));
        assert_eq!(msg.id, json!("x"));
        let again = ClientMessage::parse(&msg.to_json()).unwrap();
        assert_eq!(again, msg, "{kind}");
    }
}

#[test]
fn payload_may_be_omitted_when_empty() {
    let msg = ClientMessage::parse(r#"{"id": 3, "type": "query"}"#).unwrap();
    assert_eq!(msg.request, Request::World(WorldCommand::Query));
    assert_eq!(msg.id, json!(3));
}

#[test]
fn rejects_carry_the_id_and_invalid_request() {
    let cases = [
        (r#"{"id": "q", "type": "fly", "payload": {}}"#, json!("q")),
        (r#"{"id": "q", "type": "joint", "payload": {"joint_id": "a/j1"}}"#, json!("q")),
        (r#"{"id": "q", "type": "joint", "payload": [1, 2]}"#, json!("q")),
        (r#"{"id": "q", "type": "query", "extra": 1}"#, json!("q")),
        (r#"{"type": "query"}"#, Value::Null),
        (r#"[1, 2"#, Value::Null),
    ];
    for (text, id) in cases {
        let (got, err) = ClientMessage::parse(text).unwrap_err();
        assert_eq!(got, id, "{text}");
        assert_eq!(err.code, "INVALID_REQUEST", "{text}");
    }
}

#[test]
fn server_messages_have_a_fixed_envelope() {
    let ack = ServerMessage::new(
        json!("c1"),
        Event::Ack(AckBody {
            seq: Some(7),
            step: 1200,
            time_s: 1.2,
            outcome: CommandOutcome::Joint { duration_s: 0.61 },
            subscription: None,
        }),
    );
    let v: Value = serde_json::from_str(&ack.to_json()).unwrap();
    assert_eq!(
        v,
        json!({"id": "c1", "kind": "ack",
               "body": {"seq": 7, "step": 1200, "time_s": 1.2, "result": "joint", "duration_s": 0.61}})
    );

    let err = ServerMessage::error(json!(4), ErrorBody::new("BUSY", "a sequence is running"));
    let v: Value = serde_json::from_str(&err.to_json()).unwrap();
    assert_eq!(v, json!({"id": 4, "kind": "error", "body": {"code": "BUSY", "message": "a sequence is running"}}));

    let tel = ServerMessage::new(
        Value::Null,
        Event::Telemetry(TelemetryBody {
            dropped: 2,
            batch: TelemetryBatch {
                step: 300,
                time_s: 0.3,
                every_ticks: 100,
                records: vec![TelemetryRecord {
                    time_s: 0.3,
                    joint_id: "a/j1".into(),
                    pos_rev: 0.25,
                    vel_rev_s: -0.5,
                    current_a: 1.5,
                }],
            },
        }),
    );
    let v: Value = serde_json::from_str(&tel.to_json()).unwrap();
    assert_eq!(v["kind"], "telemetry");
    assert_eq!(v["body"]["dropped"], 2);
    assert_eq!(v["body"]["every_ticks"], 100);
    assert_eq!(v["body"]["records"][0]["pos_rev"], 0.25);

    for msg in [ack, err, tel] {
        let back: ServerMessage = serde_json::from_str(&msg.to_json()).unwrap();
        assert_eq!(back, msg);
    }
}

#[test]
fn floats_survive_the_wire_bit_for_bit() {
    for x in [13.0 * 0.001, 0.1 + 0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 2.0f64.powi(-40) * 3.0] {
        let body = AckBody {
            seq: None,
            step: 0,
            time_s: x,
            outcome: CommandOutcome::Applied,
            subscription: None,
        };
        let msg = ServerMessage::new(Value::Null, Event::Ack(body));
        let back: ServerMessage = serde_json::from_str(&msg.to_json()).unwrap();
        match back.event {
            Event::Ack(b) => assert_eq!(b.time_s.to_bits(), x.to_bits()),
            _ => unreachable!(),
        }
    }
}
