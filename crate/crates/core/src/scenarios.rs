//! Ready-made worlds for the bundled scripts and the spinbot gait.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{ConnectionGraph, ModuleKind, ModuleNode, PortRef};
use crate::sequences::{Bindings, ScriptRegistry};
use crate::sim::{SimError, WorldConfig, WorldState};
use crate::templates::TemplateRegistry;

/// Arch pitch that spans one pallet spacing with both grippers down, rad.
pub fn arch_pitch() -> f64 {
    0.9f64.acos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Handshake,
    LimbToWheel,
    LimbToDualWheel,
    Dragon,
    Vehicle,
    Inchworm,
    Spinbot,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::Handshake,
        ScenarioKind::LimbToWheel,
        ScenarioKind::LimbToDualWheel,
        ScenarioKind::Dragon,
        ScenarioKind::Vehicle,
        ScenarioKind::Inchworm,
        ScenarioKind::Spinbot,
    ];

    /// Scenario a bundled script runs on by default.
    pub fn for_script(script: &str) -> Option<ScenarioKind> {
        match script {
            "limb_to_limb" => Some(ScenarioKind::Handshake),
            "limb_to_wheel" => Some(ScenarioKind::LimbToWheel),
            "dragon_assembly" => Some(ScenarioKind::Dragon),
            "vehicle_transition" => Some(ScenarioKind::Vehicle),
            "inchworm" => Some(ScenarioKind::Inchworm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub world: WorldState,
    /// Role bindings for the scenario's script.
    pub bindings: Bindings,
}

fn graph(
    config: &WorldConfig,
    modules: &[(&str, ModuleKind)],
    edges: &[(&str, &str)],
) -> Result<ConnectionGraph, SimError> {
    let mut g = ConnectionGraph::new().with_interface_gap(config.modules.interface_gap);
    for (id, kind) in modules {
        g = g.add_module(ModuleNode::new(id, *kind, &config.limb, &config.modules))?;
    }
    for (a, b) in edges {
        g = g.attach(&a.parse::<PortRef>()?, &b.parse::<PortRef>()?)?;
    }
    Ok(g)
}

fn bindings(pairs: &[(&str, &str)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn angles(limb: &str, q: &[f64]) -> BTreeMap<String, f64> {
    q.iter()
        .enumerate()
        .map(|(i, a)| (format!("{limb}/j{}", i + 1), *a))
        .collect()
}

fn preset(scripts: &ScriptRegistry, script: &str, name: &str) -> Result<Vec<f64>, SimError> {
    scripts
        .get(script)
        .ok()
        .and_then(|s| s.presets.get(name).cloned())
        .ok_or_else(|| SimError::Config(format!("script {script} has no preset {name}")))
}

/// Places `target`'s component where the limb's tool reaches it at the
/// script's `grasp` preset, then returns the limb to zero.
fn place_at_grasp(
    world: &mut WorldState,
    scripts: &ScriptRegistry,
    script: &str,
    limb: &str,
    target: &PortRef,
) -> Result<(), SimError> {
    let grasp = preset(scripts, script, "grasp")?;
    world.set_joint_angles(&angles(limb, &grasp))?;
    world.place_mated(target, &PortRef::new(limb, "tool"))?;
    world.set_joint_angles(&angles(limb, &[0.0; 4]))
}

pub fn build(
    kind: ScenarioKind,
    config: &WorldConfig,
    scripts: &ScriptRegistry,
    templates: &TemplateRegistry,
) -> Result<Scenario, SimError> {
    let (world, bindings) = match kind {
        ScenarioKind::Handshake => {
            let g = graph(
                config,
                &[
                    ("pallet", ModuleKind::Pallet),
                    ("a", ModuleKind::Limb),
                    ("b", ModuleKind::Limb),
                ],
                &[("a.base", "pallet.p0"), ("b.base", "pallet.p8")],
            )?;
            (
                WorldState::new(config.clone(), g)?,
                bindings(&[("a", "a"), ("b", "b")]),
            )
        }
        ScenarioKind::LimbToWheel | ScenarioKind::LimbToDualWheel => {
            let (wheel, target) = if kind == ScenarioKind::LimbToWheel {
                (ModuleKind::SingleWheel, "wheel.f0")
            } else {
                (ModuleKind::DualWheel, "wheel.f1")
            };
            let g = graph(
                config,
                &[
                    ("pallet", ModuleKind::Pallet),
                    ("limb", ModuleKind::Limb),
                    ("wheel", wheel),
                ],
                &[("limb.base", "pallet.p0")],
            )?;
            let mut w = WorldState::new(config.clone(), g)?;
            place_at_grasp(&mut w, scripts, "limb_to_wheel", "limb", &target.parse()?)?;
            (w, bindings(&[("limb", "limb"), ("target", target)]))
        }
        ScenarioKind::Dragon => {
            let mut g = templates
                .get("vehicle")?
                .instantiate("", &config.limb, &config.modules)?;
            for (id, k) in [("pallet", ModuleKind::Pallet), ("arm", ModuleKind::Limb)] {
                g = g.add_module(ModuleNode::new(id, k, &config.limb, &config.modules))?;
            }
            g = g.attach(&"arm.base".parse()?, &"pallet.p0".parse()?)?;
            let mut w = WorldState::new(config.clone(), g)?;
            place_at_grasp(&mut w, scripts, "dragon_assembly", "arm", &"rear.f1".parse()?)?;
            (w, bindings(&[("limb", "arm"), ("target", "rear.f1")]))
        }
        ScenarioKind::Vehicle => {
            let g = templates
                .get("vehicle")?
                .instantiate("", &config.limb, &config.modules)?;
            (WorldState::new(config.clone(), g)?, bindings(&[("bridge", "bridge")]))
        }
        ScenarioKind::Inchworm => {
            let g = graph(
                config,
                &[("pallet", ModuleKind::Pallet), ("limb", ModuleKind::Limb)],
                &[("limb.base", "pallet.p0")],
            )?;
            (
                WorldState::new(config.clone(), g)?,
                bindings(&[
                    ("held", "limb.base"),
                    ("free", "limb.tool"),
                    ("from", "pallet.p0"),
                    ("to", "pallet.p1"),
                ]),
            )
        }
        ScenarioKind::Spinbot => {
            let g = templates
                .get("spinbot")?
                .instantiate("", &config.limb, &config.modules)?;
            let mut w = WorldState::new(config.clone(), g)?;
            let a = arch_pitch();
            w.set_joint_angles(&angles("body", &[0.0, a, std::f64::consts::PI - a, 0.0]))?;
            (w, bindings(&[("body", "body")]))
        }
    };
    Ok(Scenario {
        kind,
        world,
        bindings,
    })
}
