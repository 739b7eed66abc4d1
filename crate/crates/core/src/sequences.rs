//! Scripted reconfiguration sequences.
//!
//! A [`SequenceScript`] is data: roles, named parameters, joint-angle presets,
//! graph predicates and an ordered list of steps. Roles are bound to module
//! ids (or to whole ports) when the script runs; ports inside a script are
//! written `role.port`, or just `role` when the role names a port.
//!
//! [`SequenceRunner`] executes one step at a time on the world it is handed,
//! so a simulation loop can keep ticking between steps. Any failure restores
//! the world's physical state to what it was before the script started.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Isometry3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::InputMode;
use crate::graph::{GraphError, GripperState, ModuleId, ModuleKind, PortKind, PortRef};
use crate::sim::{ChainSelector, IkTarget, SimError, SimEventKind, VehicleMode, WorldState};
use crate::templates::{validate_configuration, TemplateRegistry};

pub const BUILTIN_SCRIPTS: [(&str, &str); 5] = [
    ("limb_to_limb", include_str!("../data/scripts/limb_to_limb.toml")),
    ("limb_to_wheel", include_str!("../data/scripts/limb_to_wheel.toml")),
    ("vehicle_transition", include_str!("../data/scripts/vehicle_transition.toml")),
    ("dragon_assembly", include_str!("../data/scripts/dragon_assembly.toml")),
    ("inchworm", include_str!("../data/scripts/inchworm.toml")),
];

/// Role name to module id, or to a `module.port` reference.
pub type Bindings = BTreeMap<String, String>;

/// Per-limb travel for the handshake approach, m.
///
/// ```
/// use limbkit::sequences::handshake_approach_distance;
/// let d1 = handshake_approach_distance(0.6, 0.2).unwrap();
/// assert!((d1 - 0.2).abs() < 1e-15);
/// assert!(handshake_approach_distance(0.1, 0.2).is_err());
/// ```
pub fn handshake_approach_distance(d0: f64, g_contact: f64) -> Result<f64, SequenceError> {
    if !(d0.is_finite() && g_contact.is_finite() && g_contact >= 0.0) {
        return Err(SequenceError::InvalidParameter(format!(
            "d0 = {d0} m, g_contact = {g_contact} m"
        )));
    }
    if d0 < g_contact {
        return Err(SequenceError::AlreadyOverlapping { d0, g_contact });
    }
    Ok((d0 - g_contact) / 2.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("unknown script {0}")]
    UnknownScript(String),
    #[error("script {script}: {message}")]
    Script { script: String, message: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grippers already overlap: d0 = {d0} m < g_contact = {g_contact} m")]
    AlreadyOverlapping { d0: f64, g_contact: f64 },
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),
    #[error("step {index} ({label}) failed: {reason}")]
    StepFailed {
        index: usize,
        label: String,
        reason: String,
        /// Code of the underlying error.
        cause: String,
    },
    #[error("postcondition failed: {0}")]
    PostconditionFailed(String),
    #[error("{0} is not a vehicle")]
    NotAVehicle(String),
}

impl SequenceError {
    pub fn code(&self) -> &'static str {
        match self {
            SequenceError::UnknownScript(_) => "UNKNOWN_TARGET",
            SequenceError::Script { .. } | SequenceError::InvalidParameter(_) => "INVALID_REQUEST",
            SequenceError::AlreadyOverlapping { .. } => "ALREADY_OVERLAPPING",
            SequenceError::PreconditionFailed(_) => "PRECONDITION_FAILED",
            SequenceError::StepFailed { .. } => "STEP_FAILED",
            SequenceError::PostconditionFailed(_) => "POSTCONDITION_FAILED",
            SequenceError::NotAVehicle(_) => "NOT_A_VEHICLE",
        }
    }
}

/// A number, or the name of a numeric parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Value(f64),
    Param(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

/// Decidable predicate over the connection graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    /// Port has a link.
    Linked(String),
    /// Port has no link.
    Free(String),
    Edge([String; 2]),
    NoEdge([String; 2]),
    /// The component holding `module` is an instance of `template`.
    Matches { template: String, module: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTarget {
    pub limb: String,
    /// Preset name, or `$param` naming a text parameter.
    #[serde(default)]
    pub preset: Option<String>,
    /// All four angles, rad.
    #[serde(default)]
    pub angles: Option<Vec<Scalar>>,
    /// Selected joints by local name (`j1`..`j4`), rad.
    #[serde(default)]
    pub joints: Option<BTreeMap<String, Scalar>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IkMove {
    /// Shorthand for root `limb.base`, tip `limb.tool`.
    #[serde(default)]
    pub limb: Option<String>,
    #[serde(default)]
    pub root: Option<String>,
    #[serde(default)]
    pub tip: Option<String>,
    /// World-frame tool translation, m.
    #[serde(default)]
    pub delta: Option<[Scalar; 3]>,
    /// Move the tip this far (m) toward a port's current position.
    #[serde(default)]
    pub toward: Option<String>,
    #[serde(default)]
    pub distance: Option<Scalar>,
    /// Bring the tip onto the mating frame of a port.
    #[serde(default)]
    pub mate: Option<String>,
}

fn trapezoidal() -> InputMode {
    InputMode::TrapezoidalTrajectory
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Synchronized joint targets; does not wait.
    JointMove {
        targets: Vec<JointTarget>,
        #[serde(default = "trapezoidal")]
        mode: InputMode,
    },
    /// Concurrent IK motions; waits until all complete.
    IkMove { moves: Vec<IkMove> },
    /// Joint move to a hover pose `height` m off a fixture's mating frame,
    /// planned by IK from several seeds; waits until settled.
    Approach {
        mover: String,
        fixture: String,
        height: Scalar,
    },
    Gripper { port: String, state: GripperState },
    /// Checks alignment, closes the grippers and links the ports in one step.
    Attach {
        a: String,
        b: String,
        /// m.
        #[serde(default)]
        position_tolerance: Option<f64>,
        /// rad.
        #[serde(default)]
        angle_tolerance: Option<f64>,
    },
    Detach { a: String, b: String },
    WaitSettle {
        /// rev.
        #[serde(default)]
        tolerance: Option<f64>,
        /// s.
        #[serde(default)]
        timeout: Option<f64>,
    },
    /// Stores the distance between two ports, m.
    MeasureGap { a: String, b: String, into: String },
    /// Stores [`handshake_approach_distance`].
    ApproachDistance {
        d0: Scalar,
        g_contact: Scalar,
        into: String,
    },
    SetVehicleMode { limb: String, mode: String },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::JointMove { .. } => "joint_move",
            Action::IkMove { .. } => "ik_move",
            Action::Approach { .. } => "approach",
            Action::Gripper { .. } => "gripper",
            Action::Attach { .. } => "attach",
            Action::Detach { .. } => "detach",
            Action::WaitSettle { .. } => "wait_settle",
            Action::MeasureGap { .. } => "measure_gap",
            Action::ApproachDistance { .. } => "approach_distance",
            Action::SetVehicleMode { .. } => "set_vehicle_mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub label: String,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Script whose roles, steps and conditions are inherited; parameters
    /// and presets given here override the base ones.
    #[serde(default)]
    pub extends: Option<String>,
    #[serde(default)]
    pub roles: Vec<String>,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    /// Joint-angle presets for one limb, rad.
    #[serde(default)]
    pub presets: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub preconditions: Vec<Predicate>,
    #[serde(default)]
    pub postconditions: Vec<Predicate>,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
}

impl SequenceScript {
    pub fn from_toml_str(text: &str) -> Result<Self, SequenceError> {
        toml::from_str(text).map_err(|e| SequenceError::Script {
            script: "<toml>".into(),
            message: e.to_string(),
        })
    }

    fn err(&self, message: impl Into<String>) -> SequenceError {
        SequenceError::Script {
            script: self.name.clone(),
            message: message.into(),
        }
    }

    fn merged_over(&self, base: &SequenceScript) -> SequenceScript {
        let mut out = base.clone();
        out.name = self.name.clone();
        out.extends = None;
        if !self.description.is_empty() {
            out.description = self.description.clone();
        }
        if !self.roles.is_empty() {
            out.roles = self.roles.clone();
        }
        out.params.extend(self.params.clone());
        out.presets.extend(self.presets.clone());
        if !self.preconditions.is_empty() {
            out.preconditions = self.preconditions.clone();
        }
        if !self.postconditions.is_empty() {
            out.postconditions = self.postconditions.clone();
        }
        if !self.steps.is_empty() {
            out.steps = self.steps.clone();
        }
        out
    }

    /// Static checks: presets have four finite angles, referenced roles,
    /// presets and parameters exist, and each step is well formed.
    pub fn check(&self) -> Result<(), SequenceError> {
        if self.steps.is_empty() {
            return Err(self.err("no steps"));
        }
        for (name, angles) in &self.presets {
            if angles.len() != 4 || angles.iter().any(|a| !a.is_finite()) {
                return Err(self.err(format!("preset {name} needs four finite angles")));
            }
        }
        let role = |s: &str| -> Result<(), SequenceError> {
            let head = s.split('.').next().unwrap_or(s);
            if self.roles.iter().any(|r| r == head) {
                Ok(())
            } else {
                Err(self.err(format!("{s:?} does not name a role")))
            }
        };
        let scalar = |s: &Scalar, produced: &[String]| -> Result<(), SequenceError> {
            match s {
                Scalar::Value(v) if v.is_finite() => Ok(()),
                Scalar::Value(_) => Err(self.err("non-finite value")),
                Scalar::Param(p) if self.params.contains_key(p) || produced.contains(p) => Ok(()),
                Scalar::Param(p) => Err(self.err(format!("unknown parameter {p}"))),
            }
        };
        let preset = |p: &str| -> Result<(), SequenceError> {
            match p.strip_prefix('$') {
                Some(param) => match self.params.get(param) {
                    Some(ParamValue::Text(_)) => Ok(()),
                    _ => Err(self.err(format!("{param} is not a text parameter"))),
                },
                None if self.presets.contains_key(p) => Ok(()),
                None => Err(self.err(format!("unknown preset {p}"))),
            }
        };
        for predicate in self.preconditions.iter().chain(&self.postconditions) {
            match predicate {
                Predicate::Linked(p) | Predicate::Free(p) => role(p)?,
                Predicate::Edge([a, b]) | Predicate::NoEdge([a, b]) => {
                    role(a)?;
                    role(b)?;
                }
                Predicate::Matches { module, .. } => role(module)?,
            }
        }
        let mut produced: Vec<String> = Vec::new();
        for step in &self.steps {
            match &step.action {
                Action::JointMove { targets, .. } => {
                    if targets.is_empty() {
                        return Err(self.err(format!("{}: no targets", step.label)));
                    }
                    for t in targets {
                        role(&t.limb)?;
                        let given = [t.preset.is_some(), t.angles.is_some(), t.joints.is_some()];
                        if given.iter().filter(|g| **g).count() != 1 {
                            return Err(self.err(format!(
                                "{}: give exactly one of preset, angles, joints",
                                step.label
                            )));
                        }
                        if let Some(p) = &t.preset {
                            preset(p)?;
                        }
                        if let Some(a) = &t.angles {
                            if a.len() != 4 {
                                return Err(self.err(format!("{}: four angles", step.label)));
                            }
                            for s in a {
                                scalar(s, &produced)?;
                            }
                        }
                        for (name, s) in t.joints.iter().flatten() {
                            if !matches!(name.as_str(), "j1" | "j2" | "j3" | "j4") {
                                return Err(self.err(format!("unknown joint {name}")));
                            }
                            scalar(s, &produced)?;
                        }
                    }
                }
                Action::IkMove { moves } => {
                    if moves.is_empty() {
                        return Err(self.err(format!("{}: no moves", step.label)));
                    }
                    for m in moves {
                        match (&m.limb, &m.root, &m.tip) {
                            (Some(l), None, None) => role(l)?,
                            (None, Some(r), Some(t)) => {
                                role(r)?;
                                role(t)?;
                            }
                            _ => {
                                return Err(self.err(format!(
                                    "{}: give limb, or root and tip",
                                    step.label
                                )))
                            }
                        }
                        match (&m.delta, &m.toward, &m.distance, &m.mate) {
                            (Some(d), None, None, None) => {
                                for s in d {
                                    scalar(s, &produced)?;
                                }
                            }
                            (None, Some(p), Some(d), None) => {
                                role(p)?;
                                scalar(d, &produced)?;
                            }
                            (None, None, None, Some(p)) => role(p)?,
                            _ => {
                                return Err(self.err(format!(
                                    "{}: give delta, toward with distance, or mate",
                                    step.label
                                )))
                            }
                        }
                    }
                }
                Action::Approach {
                    mover,
                    fixture,
                    height,
                } => {
                    role(mover)?;
                    role(fixture)?;
                    scalar(height, &produced)?;
                }
                Action::Gripper { port, .. } => role(port)?,
                Action::Attach { a, b, .. } | Action::Detach { a, b } => {
                    role(a)?;
                    role(b)?;
                }
                Action::WaitSettle { tolerance, timeout } => {
                    if tolerance.is_some_and(|t| !(t > 0.0)) || timeout.is_some_and(|t| !(t > 0.0)) {
                        return Err(self.err(format!("{}: bounds must be positive", step.label)));
                    }
                }
                Action::MeasureGap { a, b, into } => {
                    role(a)?;
                    role(b)?;
                    produced.push(into.clone());
                }
                Action::ApproachDistance { d0, g_contact, into } => {
                    scalar(d0, &produced)?;
                    scalar(g_contact, &produced)?;
                    produced.push(into.clone());
                }
                Action::SetVehicleMode { limb, mode } => {
                    role(limb)?;
                    let resolved = match mode.strip_prefix('$') {
                        Some(p) => match self.params.get(p) {
                            Some(ParamValue::Text(t)) => t.clone(),
                            _ => return Err(self.err(format!("{p} is not a text parameter"))),
                        },
                        None => mode.clone(),
                    };
                    parse_mode(&resolved).map_err(|m| self.err(m))?;
                }
            }
        }
        Ok(())
    }
}

fn parse_mode(s: &str) -> Result<VehicleMode, String> {
    match s {
        "suspension" => Ok(VehicleMode::Suspension),
        "steering" => Ok(VehicleMode::Steering),
        other => Err(format!("unknown vehicle mode {other}")),
    }
}

pub fn mode_name(mode: VehicleMode) -> &'static str {
    match mode {
        VehicleMode::Suspension => "suspension",
        VehicleMode::Steering => "steering",
    }
}

/// Named scripts, with `extends` already resolved.
#[derive(Debug, Clone, Default)]
pub struct ScriptRegistry {
    scripts: BTreeMap<String, SequenceScript>,
}

/// Parses every `*.toml` file in `dir`, in file name order, without
/// resolving `extends`.
pub fn read_script_dir(dir: &Path) -> Result<Vec<SequenceScript>, SequenceError> {
        let io = |e: std::io::Error| SequenceError::Script {
            script: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let mut raw = Vec::new();
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(io)?;
            raw.push(SequenceScript::from_toml_str(&text).map_err(|e| SequenceError::Script {
                script: p.display().to_string(),
                message: e.to_string(),
            })?);
        }
        Ok(raw)
}

impl ScriptRegistry {
    pub fn builtin() -> Self {
        let mut reg = ScriptRegistry::default();
        let raw: Vec<SequenceScript> = BUILTIN_SCRIPTS
            .iter()
            .map(|(_, text)| SequenceScript::from_toml_str(text).expect("bundled script parses"))
            .collect();
        reg.insert_all(raw).expect("bundled scripts are valid");
        reg
    }

    /// Adds every `*.toml` script in `dir`, in file-name order.
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), SequenceError> {
        self.insert_all(read_script_dir(dir)?)
    }

    /// Adds scripts, resolving `extends` against each other and the registry.
    pub fn insert_all(&mut self, scripts: Vec<SequenceScript>) -> Result<(), SequenceError> {
        let mut pending = scripts;
        while !pending.is_empty() {
            let before = pending.len();
            let mut waiting = Vec::new();
            for s in pending {
                let resolved = match &s.extends {
                    None => s.clone(),
                    Some(base) => match self.scripts.get(base) {
                        Some(b) => s.merged_over(b),
                        None => {
                            waiting.push(s);
                            continue;
                        }
                    },
                };
                self.insert(resolved)?;
            }
            if waiting.len() == before {
                let s = &waiting[0];
                return Err(s.err(format!(
                    "extends unknown script {}",
                    s.extends.as_deref().unwrap_or_default()
                )));
            }
            pending = waiting;
        }
        Ok(())
    }

    fn insert(&mut self, script: SequenceScript) -> Result<(), SequenceError> {
        if script.extends.is_some() {
            return Err(script.err("unresolved extends"));
        }
        script.check()?;
        self.scripts.insert(script.name.clone(), script);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&SequenceScript, SequenceError> {
        self.scripts
            .get(name)
            .ok_or_else(|| SequenceError::UnknownScript(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.scripts.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Started,
    Completed,
    Failed,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEvent {
    pub script: String,
    /// None for whole-script events.
    pub step: Option<usize>,
    pub label: String,
    pub action: String,
    pub status: StepStatus,
    pub sim_step: u64,
    pub time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct SequenceFailure {
    pub error: SequenceError,
    pub events: Vec<SequenceEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunnerStatus {
    /// The world must advance before the runner can make progress.
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
enum Wait {
    Settle { tolerance: f64, deadline: u64 },
    Goals(Vec<u64>),
}

const SETTLE_TOLERANCE: f64 = 1e-5;
const SETTLE_TIMEOUT: f64 = 10.0;
const ATTACH_POSITION_TOLERANCE: f64 = 1e-4;
const ATTACH_ANGLE_TOLERANCE: f64 = 1e-3;

/// Incremental script execution against a world owned by the caller.
#[derive(Debug, Clone)]
pub struct SequenceRunner {
    script: SequenceScript,
    bindings: Bindings,
    params: BTreeMap<String, ParamValue>,
    next: usize,
    waiting: Option<Wait>,
    snapshot: WorldState,
    events: Vec<SequenceEvent>,
    templates: TemplateRegistry,
}

struct StepError {
    reason: String,
    cause: &'static str,
}

impl From<SimError> for StepError {
    fn from(e: SimError) -> Self {
        StepError {
            reason: e.to_string(),
            cause: e.code(),
        }
    }
}

impl From<GraphError> for StepError {
    fn from(e: GraphError) -> Self {
        StepError {
            reason: e.to_string(),
            cause: e.code(),
        }
    }
}

impl From<SequenceError> for StepError {
    fn from(e: SequenceError) -> Self {
        StepError {
            reason: e.to_string(),
            cause: e.code(),
        }
    }
}

fn step_err(reason: impl Into<String>, cause: &'static str) -> StepError {
    StepError {
        reason: reason.into(),
        cause,
    }
}

impl SequenceRunner {
    /// Binds roles, applies parameter overrides and checks preconditions.
    /// Takes the rollback snapshot.
    pub fn start(
        world: &WorldState,
        script: &SequenceScript,
        bindings: &Bindings,
        overrides: &BTreeMap<String, ParamValue>,
        templates: &TemplateRegistry,
    ) -> Result<Self, SequenceFailure> {
        let fail = |error| SequenceFailure {
            error,
            events: Vec::new(),
        };
        for role in &script.roles {
            if !bindings.contains_key(role) {
                return Err(fail(script.err(format!("role {role} is not bound"))));
            }
        }
        let mut params = script.params.clone();
        for (k, v) in overrides {
            match (params.get(k), v) {
                (Some(ParamValue::Number(_)), ParamValue::Number(_))
                | (Some(ParamValue::Text(_)), ParamValue::Text(_)) => {
                    params.insert(k.clone(), v.clone());
                }
                _ => {
                    return Err(fail(SequenceError::InvalidParameter(format!(
                        "{k} is not a {} parameter of {}",
                        match v {
                            ParamValue::Number(_) => "numeric",
                            ParamValue::Text(_) => "text",
                        },
                        script.name
                    ))))
                }
            }
        }
        let runner = SequenceRunner {
            script: script.clone(),
            bindings: bindings.clone(),
            params,
            next: 0,
            waiting: None,
            snapshot: world.clone(),
            events: Vec::new(),
            templates: templates.clone(),
        };
        for p in &script.preconditions {
            match runner.holds(world, p) {
                Ok(true) => {}
                Ok(false) => return Err(fail(SequenceError::PreconditionFailed(describe(p)))),
                Err(e) => {
                    return Err(fail(SequenceError::PreconditionFailed(format!(
                        "{}: {}",
                        describe(p),
                        e.reason
                    ))))
                }
            }
        }
        Ok(runner)
    }

    pub fn script(&self) -> &SequenceScript {
        &self.script
    }

    pub fn events(&self) -> &[SequenceEvent] {
        &self.events
    }

    /// Numeric parameter, including ones produced by earlier steps.
    pub fn param(&self, name: &str) -> Option<f64> {
        match self.params.get(name) {
            Some(ParamValue::Number(v)) => Some(*v),
            _ => None,
        }
    }

    fn log(&mut self, world: &WorldState, step: Option<usize>, status: StepStatus, detail: Option<String>) {
        let (label, action) = match step {
            Some(i) => {
                let s = &self.script.steps[i];
                (s.label.clone(), s.action.name().to_owned())
            }
            None => (self.script.name.clone(), "script".to_owned()),
        };
        self.events.push(SequenceEvent {
            script: self.script.name.clone(),
            step,
            label,
            action,
            status,
            sim_step: world.steps(),
            time_s: world.time(),
            detail,
        });
    }

    /// Rolls the world back and reports `error`.
    pub fn abort(&mut self, world: &mut WorldState, error: SequenceError) -> SequenceFailure {
        world.restore_physical(&self.snapshot);
        let step = (self.next < self.script.steps.len()).then_some(self.next);
        self.log(world, step, StepStatus::Failed, Some(error.to_string()));
        SequenceFailure {
            error,
            events: std::mem::take(&mut self.events),
        }
    }

    fn fail_step(&mut self, world: &mut WorldState, e: StepError) -> SequenceFailure {
        let error = SequenceError::StepFailed {
            index: self.next,
            label: self.script.steps[self.next].label.clone(),
            reason: e.reason,
            cause: e.cause.to_owned(),
        };
        self.abort(world, error)
    }

    /// Runs steps until one needs the world to advance or the script ends.
    pub fn poll(&mut self, world: &mut WorldState) -> Result<RunnerStatus, SequenceFailure> {
        loop {
            if let Some(wait) = self.waiting.clone() {
                match self.check_wait(world, &wait) {
                    Ok(false) => return Ok(RunnerStatus::Running),
                    Ok(true) => {
                        self.waiting = None;
                        if let Err(e) = world.graph().check_invariants() {
                            return Err(self.fail_step(world, e.into()));
                        }
                        self.log(world, Some(self.next), StepStatus::Completed, None);
                        self.next += 1;
                    }
                    Err(e) => return Err(self.fail_step(world, e)),
                }
            }
            if self.next == self.script.steps.len() {
                for p in self.script.postconditions.clone() {
                    let ok = self.holds(world, &p).unwrap_or(false);
                    if !ok {
                        let error = SequenceError::PostconditionFailed(describe(&p));
                        return Err(self.abort(world, error));
                    }
                }
                self.log(world, None, StepStatus::Finished, None);
                return Ok(RunnerStatus::Done);
            }
            self.log(world, Some(self.next), StepStatus::Started, None);
            let action = self.script.steps[self.next].action.clone();
            match self.execute(world, &action) {
                Ok(Some(wait)) => self.waiting = Some(wait),
                Ok(None) => {
                    if let Err(e) = world.graph().check_invariants() {
                        return Err(self.fail_step(world, e.into()));
                    }
                    self.log(world, Some(self.next), StepStatus::Completed, None);
                    self.next += 1;
                }
                Err(e) => return Err(self.fail_step(world, e)),
            }
        }
    }

    fn check_wait(&self, world: &WorldState, wait: &Wait) -> Result<bool, StepError> {
        match wait {
            Wait::Settle {
                tolerance,
                deadline,
            } => {
                if world.is_settled(*tolerance) {
                    Ok(true)
                } else if world.steps() >= *deadline {
                    Err(step_err("joints did not settle in time", "TIMEOUT"))
                } else {
                    Ok(false)
                }
            }
            Wait::Goals(ids) => {
                let mut done = true;
                for id in ids {
                    match world.goal_outcome(*id) {
                        None => done = false,
                        Some(SimEventKind::IkCompleted { .. }) => {}
                        Some(SimEventKind::IkTimedOut { residual_m, .. }) => {
                            return Err(step_err(
                                format!("IK goal {id} timed out {residual_m} m from target"),
                                "TIMEOUT",
                            ))
                        }
                        Some(SimEventKind::IkAborted { reason, .. }) => {
                            return Err(step_err(format!("IK goal {id} aborted: {reason}"), "ABORTED"))
                        }
                        Some(SimEventKind::GaitFinished { .. }) => {}
                    }
                }
                Ok(done)
            }
        }
    }

    fn number(&self, s: &Scalar) -> Result<f64, StepError> {
        match s {
            Scalar::Value(v) => Ok(*v),
            Scalar::Param(p) => self.param(p).ok_or_else(|| {
                step_err(format!("parameter {p} has no numeric value"), "INVALID_REQUEST")
            }),
        }
    }

    fn text<'a>(&'a self, s: &'a str) -> Result<&'a str, StepError> {
        match s.strip_prefix('$') {
            None => Ok(s),
            Some(p) => match self.params.get(p) {
                Some(ParamValue::Text(t)) => Ok(t),
                _ => Err(step_err(format!("parameter {p} has no text value"), "INVALID_REQUEST")),
            },
        }
    }

    fn module(&self, role: &str) -> Result<ModuleId, StepError> {
        match self.bindings.get(role) {
            Some(id) if !id.contains('.') => Ok(ModuleId::new(id.clone())),
            Some(id) => Err(step_err(format!("role {role} is bound to port {id}"), "INVALID_REQUEST")),
            None => Err(step_err(format!("role {role} is not bound"), "INVALID_REQUEST")),
        }
    }

    fn port(&self, s: &str) -> Result<PortRef, StepError> {
        match s.split_once('.') {
            Some((role, port)) => Ok(PortRef::new(self.module(role)?.0, port)),
            None => {
                let bound = self
                    .bindings
                    .get(s)
                    .ok_or_else(|| step_err(format!("role {s} is not bound"), "INVALID_REQUEST"))?;
                bound.parse::<PortRef>().map_err(StepError::from)
            }
        }
    }

    fn holds(&self, world: &WorldState, p: &Predicate) -> Result<bool, StepError> {
        let g = world.graph();
        Ok(match p {
            Predicate::Linked(port) => g.port(&self.port(port)?)?.link.is_some(),
            Predicate::Free(port) => g.port(&self.port(port)?)?.link.is_none(),
            Predicate::Edge([a, b]) => g.edge_between(&self.port(a)?, &self.port(b)?).is_some(),
            Predicate::NoEdge([a, b]) => g.edge_between(&self.port(a)?, &self.port(b)?).is_none(),
            Predicate::Matches { template, module } => {
                let t = self.templates.get(template)?;
                let sub = g.component_graph(&self.module(module)?)?;
                validate_configuration(&sub, t).valid
            }
        })
    }

    fn preset(&self, name: &str) -> Result<Vec<f64>, StepError> {
        let name = self.text(name)?;
        self.script
            .presets
            .get(name)
            .cloned()
            .ok_or_else(|| step_err(format!("unknown preset {name}"), "INVALID_REQUEST"))
    }

    fn selector(&self, m: &IkMove) -> Result<ChainSelector, StepError> {
        match (&m.limb, &m.root, &m.tip) {
            (Some(l), _, _) => Ok(ChainSelector::limb(self.module(l)?.as_str())),
            (None, Some(r), Some(t)) => Ok(ChainSelector {
                root: self.port(r)?,
                tip: self.port(t)?,
            }),
            _ => Err(step_err("move needs limb, or root and tip", "INVALID_REQUEST")),
        }
    }

    fn settle_wait(&self, world: &WorldState, tolerance: Option<f64>, timeout: Option<f64>) -> Wait {
        let tick = world.config().sim.tick;
        let ticks = (timeout.unwrap_or(SETTLE_TIMEOUT) / tick).ceil() as u64;
        Wait::Settle {
            tolerance: tolerance.unwrap_or(SETTLE_TOLERANCE),
            deadline: world.steps() + ticks,
        }
    }

    fn execute(&mut self, world: &mut WorldState, action: &Action) -> Result<Option<Wait>, StepError> {
        match action {
            Action::JointMove { targets, mode } => {
                let mut all = Vec::new();
                for t in targets {
                    let limb = self.module(&t.limb)?;
                    let mut angles: Vec<(usize, f64)> = Vec::new();
                    if let Some(p) = &t.preset {
                        angles.extend(self.preset(p)?.into_iter().enumerate());
                    }
                    if let Some(list) = &t.angles {
                        for (i, s) in list.iter().enumerate() {
                            angles.push((i, self.number(s)?));
                        }
                    }
                    for (name, s) in t.joints.iter().flatten() {
                        let i: usize = name
                            .strip_prefix('j')
                            .and_then(|n| n.parse().ok())
                            .filter(|n| (1..=4).contains(n))
                            .ok_or_else(|| step_err(format!("unknown joint {name}"), "INVALID_REQUEST"))?;
                        angles.push((i - 1, self.number(s)?));
                    }
                    for (i, q) in angles {
                        all.push((format!("{limb}/j{}", i + 1), q / TAU));
                    }
                }
                world.apply_joint_targets(&all, *mode)?;
                Ok(None)
            }
            Action::IkMove { moves } => {
                let mut planned = Vec::new();
                for m in moves {
                    let selector = self.selector(m)?;
                    let target = if let Some(d) = &m.delta {
                        IkTarget::Delta {
                            dx: self.number(&d[0])?,
                            dy: self.number(&d[1])?,
                            dz: self.number(&d[2])?,
                        }
                    } else if let (Some(p), Some(d)) = (&m.toward, &m.distance) {
                        let from = world.port_world(&selector.tip)?.translation.vector;
                        let to = world.port_world(&self.port(p)?)?.translation.vector;
                        let dist = self.number(d)?;
                        let dir = to - from;
                        let delta = if dist == 0.0 {
                            Vector3::zeros()
                        } else if dir.norm() < 1e-12 {
                            return Err(step_err("ports coincide; no direction", "INVALID_REQUEST"));
                        } else {
                            dir.normalize() * dist
                        };
                        IkTarget::Delta {
                            dx: delta.x,
                            dy: delta.y,
                            dz: delta.z,
                        }
                    } else if let Some(p) = &m.mate {
                        IkTarget::Mate { port: self.port(p)? }
                    } else {
                        return Err(step_err("move has no target", "INVALID_REQUEST"));
                    };
                    planned.push((selector, target));
                }
                let mut goals = Vec::new();
                for (selector, target) in planned {
                    goals.push(world.apply_ik_command(&selector, &target, None)?.goal);
                }
                Ok(Some(Wait::Goals(goals)))
            }
            Action::Approach {
                mover,
                fixture,
                height,
            } => {
                let tip = self.port(mover)?;
                let node = world.graph().module(&tip.module)?;
                if node.kind != ModuleKind::Limb {
                    return Err(step_err(format!("{tip} is not on a limb"), "INVALID_REQUEST"));
                }
                let root = PortRef::new(
                    tip.module.0.clone(),
                    if tip.port == "tool" { "base" } else { "tool" },
                );
                let selector = ChainSelector { root, tip };
                let h = self.number(height)?;
                let target = world.mating_frame(&self.port(fixture)?)? * Isometry3::translation(0.0, 0.0, -h);
                let (ids, angles) = plan_hover(world, &selector, &target)?;
                let targets: Vec<(String, f64)> =
                    ids.into_iter().zip(angles.into_iter().map(|q| q / TAU)).collect();
                world.apply_joint_targets(&targets, InputMode::TrapezoidalTrajectory)?;
                Ok(Some(self.settle_wait(world, None, None)))
            }
            Action::Gripper { port, state } => {
                world.set_gripper(&self.port(port)?, *state)?;
                Ok(None)
            }
            Action::Attach {
                a,
                b,
                position_tolerance,
                angle_tolerance,
            } => {
                let (a, b) = (self.port(a)?, self.port(b)?);
                let (dp, dr) = world.alignment(&a, &b)?;
                let (pt, at) = (
                    position_tolerance.unwrap_or(ATTACH_POSITION_TOLERANCE),
                    angle_tolerance.unwrap_or(ATTACH_ANGLE_TOLERANCE),
                );
                if dp > pt || dr > at {
                    return Err(step_err(
                        format!("{a} is {dp:.3e} m and {dr:.3e} rad off {b}"),
                        "MISALIGNED",
                    ));
                }
                for p in [&a, &b] {
                    if world.graph().port(p)?.kind == PortKind::Gripper {
                        world.set_gripper(p, GripperState::Closed)?;
                    }
                }
                world.attach(&a, &b)?;
                Ok(None)
            }
            Action::Detach { a, b } => {
                world.detach(&self.port(a)?, &self.port(b)?)?;
                Ok(None)
            }
            Action::WaitSettle { tolerance, timeout } => {
                Ok(Some(self.settle_wait(world, *tolerance, *timeout)))
            }
            Action::MeasureGap { a, b, into } => {
                let pa = world.port_world(&self.port(a)?)?.translation.vector;
                let pb = world.port_world(&self.port(b)?)?.translation.vector;
                self.params.insert(into.clone(), ParamValue::Number((pa - pb).norm()));
                Ok(None)
            }
            Action::ApproachDistance { d0, g_contact, into } => {
                let d1 = handshake_approach_distance(self.number(d0)?, self.number(g_contact)?)?;
                self.params.insert(into.clone(), ParamValue::Number(d1));
                Ok(None)
            }
            Action::SetVehicleMode { limb, mode } => {
                let mode = parse_mode(self.text(mode)?).map_err(|m| step_err(m, "INVALID_REQUEST"))?;
                world.set_vehicle_mode(&self.module(limb)?, mode)?;
                Ok(None)
            }
        }
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// IK toward `target` from a spread of seeds; keeps the solution whose tool
/// orientation is closest to the target's.
fn plan_hover(
    world: &WorldState,
    selector: &ChainSelector,
    target: &Isometry3<f64>,
) -> Result<(Vec<String>, Vec<f64>), StepError> {
    let base = world.chain_base_world(&selector.root)?;
    let local = base.inverse() * target;
    let h = local.translation.vector.y.atan2(local.translation.vector.x);
    let mut seeds: Vec<Vec<f64>> = Vec::new();
    if let Ok(current) = world.limb_angles(&selector.tip.module) {
        seeds.push(if selector.root.port == "base" {
            current
        } else {
            current.into_iter().rev().collect()
        });
    }
    for heading in [h, -h, h + PI, PI - h] {
        for elbow in [1.0, -1.0] {
            seeds.push(vec![wrap(heading), 0.5 * elbow, 2.0 * elbow, 0.0]);
        }
    }
    let mut best: Option<(f64, Vec<String>, Vec<f64>)> = None;
    let mut last_err = None;
    for seed in &seeds {
        match world.plan_ik(selector, target, None, Some(seed)) {
            Ok((ids, angles)) => {
                let tip = world.chain_tip_world(selector, &angles)?;
                let score = tip.rotation.angle_to(&target.rotation);
                if best.as_ref().is_none_or(|(s, _, _)| score < *s - 1e-12) {
                    best = Some((score, ids, angles));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, ids, angles)), _) => Ok((ids, angles)),
        (None, Some(e)) => Err(e.into()),
        (None, None) => Err(step_err("no IK seeds", "IK_FAILURE")),
    }
}

fn describe(p: &Predicate) -> String {
    match p {
        Predicate::Linked(port) => format!("linked {port}"),
        Predicate::Free(port) => format!("free {port}"),
        Predicate::Edge([a, b]) => format!("edge {a} - {b}"),
        Predicate::NoEdge([a, b]) => format!("no edge {a} - {b}"),
        Predicate::Matches { template, module } => format!("{module} matches {template}"),
    }
}

/// Runs a script to completion, stepping the world between steps. On any
/// failure the world's physical state is rolled back to the start.
pub fn run_sequence(
    world: &mut WorldState,
    script: &SequenceScript,
    bindings: &Bindings,
    overrides: &BTreeMap<String, ParamValue>,
    templates: &TemplateRegistry,
) -> Result<Vec<SequenceEvent>, SequenceFailure> {
    let mut runner = SequenceRunner::start(world, script, bindings, overrides, templates)?;
    loop {
        match runner.poll(world)? {
            RunnerStatus::Done => return Ok(runner.events),
            RunnerStatus::Running => {
                if let Err(e) = world.step_ticks(1) {
                    let error = SequenceError::StepFailed {
                        index: runner.next,
                        label: runner.script.steps[runner.next].label.clone(),
                        reason: e.to_string(),
                        cause: e.code().to_owned(),
                    };
                    return Err(runner.abort(world, error));
                }
            }
        }
    }
}

/// Finds the bridge limb of the vehicle that `module` belongs to.
pub fn vehicle_bridge(
    world: &WorldState,
    module: &ModuleId,
    templates: &TemplateRegistry,
) -> Result<ModuleId, SequenceError> {
    let not = || SequenceError::NotAVehicle(module.to_string());
    let sub = world.graph().component_graph(module).map_err(|_| not())?;
    let template = templates.get("vehicle").map_err(|_| not())?;
    let report = validate_configuration(&sub, template);
    if !report.valid {
        return Err(not());
    }
    report.mapping.get("bridge").cloned().ok_or_else(not)
}

/// Reposes a vehicle for `target` mode through the `vehicle_transition`
/// script. The edge set is left exactly as it was.
pub fn vehicle_mode_transition(
    world: &mut WorldState,
    module: &ModuleId,
    target: VehicleMode,
    scripts: &ScriptRegistry,
    templates: &TemplateRegistry,
) -> Result<Vec<SequenceEvent>, SequenceFailure> {
    let fail = |error| SequenceFailure {
        error,
        events: Vec::new(),
    };
    let bridge = vehicle_bridge(world, module, templates).map_err(fail)?;
    let script = scripts.get("vehicle_transition").map_err(fail)?;
    let bindings = Bindings::from([("bridge".to_owned(), bridge.0.clone())]);
    let overrides = BTreeMap::from([("mode".to_owned(), ParamValue::Text(mode_name(target).into()))]);
    let before: Vec<_> = world.graph().edges().cloned().collect();
    let snapshot = world.clone();
    let events = run_sequence(world, script, &bindings, &overrides, templates)?;
    let after: Vec<_> = world.graph().edges().cloned().collect();
    if before != after {
        world.restore_physical(&snapshot);
        return Err(fail(SequenceError::PostconditionFailed("edge set unchanged".into())));
    }
    Ok(events)
}

/// Moves the limb grasping `from` over to `to`: the free gripper takes `to`,
/// then the gripper on `from` lets go.
pub fn inchworm_step(
    world: &mut WorldState,
    from: &PortRef,
    to: &PortRef,
    scripts: &ScriptRegistry,
    templates: &TemplateRegistry,
) -> Result<Vec<SequenceEvent>, SequenceFailure> {
    let fail = |error| SequenceFailure {
        error,
        events: Vec::new(),
    };
    let pre = |m: String| fail(SequenceError::PreconditionFailed(m));
    let held = world
        .graph()
        .port(from)
        .map_err(|e| pre(e.to_string()))?
        .link
        .clone()
        .ok_or_else(|| pre(format!("{from} is not grasped")))?;
    let limb = world.graph().module(&held.module).map_err(|e| pre(e.to_string()))?;
    if limb.kind != ModuleKind::Limb {
        return Err(pre(format!("{from} is held by {}, not a limb", held.module)));
    }
    let free = PortRef::new(
        held.module.0.clone(),
        if held.port == "base" { "tool" } else { "base" },
    );
    let bindings = Bindings::from([
        ("held".to_owned(), held.to_string()),
        ("free".to_owned(), free.to_string()),
        ("from".to_owned(), from.to_string()),
        ("to".to_owned(), to.to_string()),
    ]);
    let script = scripts.get("inchworm").map_err(fail)?;
    run_sequence(world, script, &bindings, &BTreeMap::new(), templates)
}
