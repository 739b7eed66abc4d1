//! Oracles shared by the integration tests. Nothing here calls into the
//! library's kinematics or graph code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use limbkit::graph::{ConnectionGraph, GripperState, ModuleKind, ModuleNode, PortKind, PortRef};
use limbkit::kinematics::{KinematicChain, LimbGeometry};
use limbkit::sim::WorldConfig;
use nalgebra::{Isometry3, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M4 = [[f64; 4]; 4];

pub fn mul(a: &M4, b: &M4) -> M4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn trans_z(d: f64) -> M4 {
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn rot_z(q: f64) -> M4 {
    let (s, c) = q.sin_cos();
    [
        [c, -s, 0.0, 0.0],
        [s, c, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn rot_y(q: f64) -> M4 {
    let (s, c) = q.sin_cos();
    [
        [c, 0.0, s, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [-s, 0.0, c, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn flip_x() -> M4 {
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn rigid_inverse(m: &M4) -> M4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
        out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    out[3][3] = 1.0;
    out
}

pub fn oracle_limb(g: &LimbGeometry, q: &[f64]) -> M4 {
    let chain = [
        trans_z(g.base_to_roll),
        rot_z(q[0]),
        trans_z(g.roll_to_pitch),
        rot_y(q[1]),
        trans_z(g.upper_link),
        rot_y(q[2]),
        trans_z(g.lower_link),
        rot_z(q[3]),
        trans_z(g.tool_length),
    ];
    chain.iter().fold(identity(), |acc, m| mul(&acc, m))
}

pub fn identity() -> M4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn to_m4(iso: &Isometry3<f64>) -> M4 {
    let h: Matrix4<f64> = iso.to_homogeneous();
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = h[(i, j)];
        }
    }
    m
}

pub fn max_diff(a: &M4, b: &M4) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            d = d.max((a[i][j] - b[i][j]).abs());
        }
    }
    d
}

pub fn random_angles(rng: &mut ChaCha8Rng, chain: &KinematicChain) -> Vec<f64> {
    chain
        .joints
        .iter()
        .map(|j| rng.random_range(j.position_limits.0..=j.position_limits.1))
        .collect()
}


/// Port layout per module kind, written out independently of the library.
fn shadow_ports(kind: ModuleKind, pallet_fixtures: usize) -> Vec<(String, bool)> {
    let fixtures = |prefix: &str, n: usize| (0..n).map(|i| (format!("{prefix}{i}"), false)).collect();
    match kind {
        ModuleKind::Limb => vec![("base".into(), true), ("tool".into(), true)],
        ModuleKind::SingleWheel => fixtures("f", 1),
        ModuleKind::DualWheel => fixtures("f", 2),
        ModuleKind::CentralBody => fixtures("f", 4),
        ModuleKind::Pallet => fixtures("p", pallet_fixtures),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ShadowPort {
    gripper: bool,
    closed: bool,
    link: Option<(String, String)>,
}

type Key = (String, String);

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub ops: usize,
    /// Outcome code counts; "OK" for accepted operations.
    pub outcomes: BTreeMap<String, usize>,
    /// Operations whose outcome or resulting state disagreed with the model.
    pub mismatches: Vec<String>,
    /// States that broke monogamy or the no-fixture-pair rule.
    pub rule_breaks: usize,
}

/// Random attach, detach and gripper operations checked against a plain
/// port table.
pub fn fuzz_graph(seed: u64, ops: usize) -> FuzzReport {
    let config = WorldConfig::default();
    let pool = [
        ("pallet", ModuleKind::Pallet),
        ("l0", ModuleKind::Limb),
        ("l1", ModuleKind::Limb),
        ("l2", ModuleKind::Limb),
        ("l3", ModuleKind::Limb),
        ("d0", ModuleKind::DualWheel),
        ("d1", ModuleKind::DualWheel),
        ("s0", ModuleKind::SingleWheel),
        ("s1", ModuleKind::SingleWheel),
        ("body", ModuleKind::CentralBody),
    ];
    let mut graph = ConnectionGraph::new();
    let mut shadow: BTreeMap<Key, ShadowPort> = BTreeMap::new();
    for (id, kind) in pool {
        graph = graph
            .add_module(ModuleNode::new(id, kind, &config.limb, &config.modules))
            .unwrap();
        for (port, gripper) in shadow_ports(kind, config.modules.pallet_fixtures) {
            let p = ShadowPort { gripper, closed: false, link: None };
            shadow.insert((id.to_string(), port), p);
        }
    }
    let keys: Vec<Key> = shadow.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    let pref = |k: &Key| PortRef::new(k.0.clone(), k.1.clone());

    for i in 0..ops {
        let roll: f64 = rng.random();
        let a = keys[rng.random_range(0..keys.len())].clone();
        let mut b = keys[rng.random_range(0..keys.len())].clone();
        let (label, expected, result) = if roll < 0.5 {
            let expected = if a.0 == b.0 {
                "SELF_ATTACH"
            } else if shadow[&a].link.is_some() || shadow[&b].link.is_some() {
                "MONOGAMY_VIOLATION"
            } else if !shadow[&a].gripper && !shadow[&b].gripper {
                "INCOMPATIBLE_PORTS"
            } else {
                "OK"
            };
            if expected == "OK" {
                for (x, y) in [(&a, &b), (&b, &a)] {
                    let p = shadow.get_mut(x).unwrap();
                    p.link = Some(y.clone());
                    p.closed = p.gripper;
                }
            }
            ("attach", expected, graph.attach(&pref(&a), &pref(&b)).map(|g| (g, ())))
        } else if roll < 0.8 {
            // Mostly pick a real edge so detach succeeds often enough.
            if rng.random_bool(0.7) {
                if let Some(l) = shadow[&a].link.clone() {
                    b = l;
                }
            }
            let linked = shadow[&a].link.as_ref() == Some(&b);
            let expected = if linked { "OK" } else { "EDGE_NOT_FOUND" };
            if linked {
                for x in [&a, &b] {
                    let p = shadow.get_mut(x).unwrap();
                    p.link = None;
                    p.closed = false;
                }
            }
            let result = graph.detach(&pref(&a), &pref(&b)).map(|(g, _)| (g, ()));
            ("detach", expected, result)
        } else if roll < 0.98 {
            let close = rng.random_bool(0.5);
            let state = if close { GripperState::Closed } else { GripperState::Open };
            let expected = if !shadow[&a].gripper { "INVALID_REQUEST" } else { "OK" };
            if expected == "OK" {
                if close {
                    shadow.get_mut(&a).unwrap().closed = true;
                } else if let Some(other) = shadow[&a].link.clone() {
                    for x in [&a, &other] {
                        let p = shadow.get_mut(x).unwrap();
                        p.link = None;
                        p.closed = false;
                    }
                } else {
                    shadow.get_mut(&a).unwrap().closed = false;
                }
            }
            let result = graph.set_gripper(&pref(&a), state).map(|(g, _)| (g, ()));
            ("gripper", expected, result)
        } else {
            let ghost = PortRef::new(a.0.clone(), "nope");
            ("attach-unknown", "UNKNOWN_TARGET", graph.attach(&ghost, &pref(&b)).map(|g| (g, ())))
        };

        let got = match &result {
            Ok(_) => "OK",
            Err(e) => e.code(),
        };
        *report.outcomes.entry(got.to_string()).or_default() += 1;
        if got != expected {
            report
                .mismatches
                .push(format!("op {i}: {label} {a:?} {b:?}: expected {expected}, got {got}"));
        }
        if let Ok((next, ())) = result {
            graph = next;
        }

        // Full state comparison against the model.
        for (k, s) in &shadow {
            let port = graph.port(&pref(k)).unwrap();
            let link = port.link.as_ref().map(|p| (p.module.as_str().to_string(), p.port.clone()));
            let closed = port.state == Some(GripperState::Closed);
            let gripper = port.kind == PortKind::Gripper;
            if link != s.link || closed != s.closed || gripper != s.gripper {
                report.mismatches.push(format!("op {i}: port {k:?} diverged"));
            }
        }
        let mut seen = BTreeMap::new();
        for e in graph.edges() {
            let fixture_pair = graph.port(&e.a).unwrap().kind == PortKind::Fixture
                && graph.port(&e.b).unwrap().kind == PortKind::Fixture;
            let doubled = [&e.a, &e.b]
                .into_iter()
                .any(|p| seen.insert(p.clone(), ()).is_some());
            if fixture_pair || doubled || e.a.module == e.b.module {
                report.rule_breaks += 1;
            }
        }
        if graph.check_invariants().is_err() {
            report.rule_breaks += 1;
        }
        report.ops += 1;
        if report.mismatches.len() > 20 {
            break;
        }
    }
    report
}
