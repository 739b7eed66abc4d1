//! Fixed-step world simulation.
//!
//! A [`WorldState`] owns the connection graph, one [`ActuatorState`] per limb
//! joint, wheel drive speeds and the world pose of every module. Each tick
//! steps every actuator, integrates planar base motion of wheeled components
//! and re-derives module poses from one anchor module per component.
//!
//! World time is always `tick * steps`; nothing is integrated with a
//! variable step.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{
    step_actuator, ActuatorError, ActuatorParams, ActuatorState, InputMode, TrapezoidalProfile,
};
use crate::graph::{
    ConnectionGraph, DetachReport, GraphError, GripperState, ModuleGeometry, ModuleId, ModuleKind,
    ModuleNode, PortRef,
};
use crate::kinematics::{
    gripper_flip, IkOptions, KinematicChain, KinematicsError, LimbGeometry, Pose, TaskMask,
    TaskRow,
};

const MAX_GOAL_OUTCOMES: usize = 1024;

pub const TELEMETRY_HEADER: &str = "time_s,joint_id,pos_rev,vel_rev_s,current_a";

/// Scripted centre-of-gravity shift cycle for the spinbot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitParams {
    /// s per cycle.
    pub period: f64,
    /// Base travel per cycle, m.
    pub step_length: f64,
    /// Roll swing used to shift the centre of gravity, rad.
    pub shift_angle: f64,
}

impl Default for GaitParams {
    fn default() -> Self {
        GaitParams {
            period: 4.0,
            step_length: 1.0 / 30.0,
            shift_angle: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// s.
    pub tick: f64,
    /// Ticks between telemetry samples.
    pub telemetry_decimation: u64,
    pub record_telemetry: bool,
    /// m.
    pub wheel_radius: f64,
    /// Vehicle speed cap, m/s.
    pub speed_cap: f64,
    /// m/s².
    pub gravity: f64,
    /// Mass of each main limb link, kg. Zero disables the gravity model.
    pub link_mass: f64,
    /// Mass of the tool gripper, kg.
    pub gripper_mass: f64,
    /// Gripper centre of mass in the tool frame, m.
    pub gripper_com_offset: [f64; 3],
    /// IK commands are rejected below this masked singular value.
    pub singularity_threshold: f64,
    /// An IK motion completes once the tool is this close to its target, m.
    pub ik_tolerance: f64,
    /// Joint speed below which a joint counts as stationary, rev/s.
    pub settle_velocity: f64,
    /// s.
    pub ik_timeout: f64,
    pub gait: GaitParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick: 1e-3,
            telemetry_decimation: 1,
            record_telemetry: true,
            wheel_radius: 0.1,
            speed_cap: 1.0,
            gravity: 9.81,
            link_mass: 0.0,
            gripper_mass: 0.0,
            gripper_com_offset: [0.0; 3],
            singularity_threshold: 1e-3,
            ik_tolerance: 1e-6,
            settle_velocity: 1e-4,
            ik_timeout: 5.0,
            gait: GaitParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_owned()));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.tick) {
            return bad("tick must be positive");
        }
        if !positive(self.speed_cap) {
            return bad("speed_cap must be positive");
        }
        if self.telemetry_decimation == 0 {
            return bad("telemetry_decimation must be at least 1");
        }
        if !positive(self.wheel_radius) {
            return bad("wheel_radius must be positive");
        }
        if !(self.link_mass >= 0.0 && self.gripper_mass >= 0.0 && self.gravity >= 0.0) {
            return bad("masses and gravity must be non-negative");
        }
        if !(self.singularity_threshold >= 0.0) || !positive(self.ik_tolerance) {
            return bad("IK thresholds must be non-negative");
        }
        if !positive(self.ik_timeout) || !positive(self.settle_velocity) {
            return bad("ik_timeout and settle_velocity must be positive");
        }
        if !(self.gait.period >= 2.0 * self.tick) || !(self.gait.step_length >= 0.0) {
            return bad("gait period must span at least two ticks");
        }
        Ok(())
    }
}

/// Everything needed to build a world besides its topology.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub sim: SimConfig,
    pub actuator: ActuatorParams,
    pub limb: LimbGeometry,
    pub modules: ModuleGeometry,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.sim.validate()?;
        self.actuator.validate()?;
        if self.sim.tick > self.actuator.max_step() * (1.0 + 1e-9) {
            return Err(SimError::Config(format!(
                "tick {} s is longer than the actuator loop period",
                self.sim.tick
            )));
        }
        KinematicChain::limb(&self.limb, "check").validate()?;
        Ok(())
    }
}

/// Per-joint state snapshot, also one telemetry row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub time_s: f64,
    pub joint_id: String,
    pub pos_rev: f64,
    pub vel_rev_s: f64,
    pub current_a: f64,
}

impl TelemetryRecord {
    pub fn csv_line(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{:.9},{},{:.9},{:.9},{:.9}",
            self.time_s, self.joint_id, self.pos_rev, self.vel_rev_s, self.current_a
        );
    }
}

/// CSV document for a batch of records, header first.
pub fn telemetry_csv(records: &[TelemetryRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(TELEMETRY_HEADER);
    out.push('\n');
    for r in records {
        r.csv_line(&mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: u64,
    pub time_s: f64,
    pub message: String,
    pub joints: Vec<TelemetryRecord>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown joint {0}")]
    UnknownJoint(String),
    #[error("target {target} rad for {joint_id} outside [{lo}, {hi}]")]
    OutOfLimits {
        joint_id: String,
        target: f64,
        lo: f64,
        hi: f64,
    },
    #[error("step {dt} s is not a positive multiple of the {tick} s tick")]
    InvalidStep { dt: f64, tick: f64 },
    #[error("configuration is {sigma:.3e} from singular (threshold {threshold:.1e})")]
    NearSingular { sigma: f64, threshold: f64 },
    #[error("{0} is not a wheel module")]
    NotAWheel(ModuleId),
    #[error("limb {0} is not part of a vehicle")]
    NotAVehicle(ModuleId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant breach at t={:.3} s: {}", .0.time_s, .0.message)]
    InvariantBreach(Box<Diagnostic>),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::UnknownJoint(_) => "UNKNOWN_TARGET",
            SimError::OutOfLimits { .. } => "OUT_OF_LIMITS",
            SimError::Kinematics(KinematicsError::LimitViolation { .. }) => "OUT_OF_LIMITS",
            SimError::NearSingular { .. } | SimError::Kinematics(_) => "IK_FAILURE",
            SimError::Graph(e) => e.code(),
            SimError::NotAWheel(_) | SimError::NotAVehicle(_) | SimError::InvalidStep { .. } => {
                "INVALID_REQUEST"
            }
            SimError::Actuator(ActuatorError::Overload { .. }) => "INVARIANT_BREACH",
            SimError::Actuator(_) => "INVALID_REQUEST",
            SimError::Config(_) => "CONFIG_ERROR",
            SimError::InvariantBreach(_) => "INVARIANT_BREACH",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleMode {
    /// Pitch plane vertical.
    Suspension,
    /// Pitch plane horizontal; the middle pitches steer.
    Steering,
}

/// Where an IK motion should take the tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IkTarget {
    /// Offset of the tip position in world axes, m. Orientation is held.
    Delta { dx: f64, dy: f64, dz: f64 },
    /// World position in m, optional roll-pitch-yaw in rad.
    Absolute {
        position: [f64; 3],
        #[serde(default)]
        rpy: Option<[f64; 3]>,
    },
    /// The frame at which the tip mates with this port.
    Mate { port: PortRef },
}

/// The serial chain an IK command drives, named by its two end ports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSelector {
    pub root: PortRef,
    pub tip: PortRef,
}

impl ChainSelector {
    pub fn limb(module: &str) -> Self {
        ChainSelector {
            root: PortRef::new(module, "base"),
            tip: PortRef::new(module, "tool"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkPlan {
    pub goal: u64,
    /// Joint id and target angle in rad.
    pub targets: Vec<(String, f64)>,
    /// Synchronized profile duration, s.
    pub duration: f64,
    pub sigma: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct IkGoal {
    id: u64,
    selector: ChainSelector,
    chain: KinematicChain,
    joints: Vec<String>,
    target: Pose,
    mask: TaskMask,
    started: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEventKind {
    IkCompleted { goal: u64, elapsed_s: f64, residual_m: f64 },
    IkTimedOut { goal: u64, residual_m: f64 },
    IkAborted { goal: u64, reason: String },
    GaitFinished { cycles: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub step: u64,
    pub time_s: f64,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, PartialEq)]
struct GaitState {
    limb: ModuleId,
    start: u64,
    base_roll: (f64, f64),
    cycles: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulePose {
    pub id: ModuleId,
    pub kind: ModuleKind,
    /// m.
    pub position: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub orientation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSnapshot {
    pub joint_id: String,
    pub pos_rev: f64,
    pub vel_rev_s: f64,
    pub current_a: f64,
    pub target_rev: f64,
    pub input_mode: InputMode,
}

/// Read-only view published after each tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub step: u64,
    pub time_s: f64,
    pub graph: serde_json::Value,
    pub joints: Vec<JointSnapshot>,
    pub modules: Vec<ModulePose>,
    pub wheel_speeds: BTreeMap<ModuleId, Vec<f64>>,
    /// Base speed of each moving component, keyed by its anchor, m/s.
    pub base_speeds: BTreeMap<ModuleId, f64>,
    pub vehicle_modes: BTreeMap<ModuleId, VehicleMode>,
    pub pending_ik: Vec<u64>,
    pub gait_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    config: WorldConfig,
    graph: ConnectionGraph,
    actuators: BTreeMap<String, ActuatorState>,
    /// Joint id to owning limb and index within it.
    joint_index: BTreeMap<String, (ModuleId, usize)>,
    wheel_speeds: BTreeMap<ModuleId, Vec<f64>>,
    poses: BTreeMap<ModuleId, Isometry3<f64>>,
    anchors: BTreeMap<ModuleId, ModuleId>,
    /// Port through which each non-anchor module was reached.
    entry: BTreeMap<ModuleId, String>,
    base_speeds: BTreeMap<ModuleId, f64>,
    vehicle_modes: BTreeMap<ModuleId, VehicleMode>,
    gait: Option<GaitState>,
    ik_goals: Vec<IkGoal>,
    /// Final event of recently finished IK goals, by goal id.
    goal_outcomes: BTreeMap<u64, SimEventKind>,
    next_goal: u64,
    steps: u64,
    telemetry: Vec<TelemetryRecord>,
    events: Vec<SimEvent>,
}

fn priority(node: &ModuleNode) -> u8 {
    match node.kind {
        ModuleKind::Pallet => 0,
        ModuleKind::SingleWheel | ModuleKind::DualWheel => 1,
        ModuleKind::CentralBody => 2,
        ModuleKind::Limb => 3,
    }
}

impl WorldState {
    /// A world with every joint at rest at zero and every module at the origin.
    pub fn new(config: WorldConfig, graph: ConnectionGraph) -> Result<Self, SimError> {
        config.validate()?;
        graph.check_invariants()?;
        let mut world = WorldState {
            config,
            graph,
            actuators: BTreeMap::new(),
            joint_index: BTreeMap::new(),
            wheel_speeds: BTreeMap::new(),
            poses: BTreeMap::new(),
            anchors: BTreeMap::new(),
            entry: BTreeMap::new(),
            base_speeds: BTreeMap::new(),
            vehicle_modes: BTreeMap::new(),
            gait: None,
            ik_goals: Vec::new(),
            goal_outcomes: BTreeMap::new(),
            next_goal: 1,
            steps: 0,
            telemetry: Vec::new(),
            events: Vec::new(),
        };
        for node in world.graph.modules() {
            if let Some(chain) = &node.chain {
                for (i, id) in chain.joint_ids().into_iter().enumerate() {
                    world
                        .actuators
                        .insert(id.to_owned(), ActuatorState::at_rest(0.0, InputMode::TrapezoidalTrajectory));
                    world.joint_index.insert(id.to_owned(), (node.id.clone(), i));
                }
            }
            if node.drive_axes > 0 {
                world
                    .wheel_speeds
                    .insert(node.id.clone(), vec![0.0; node.drive_axes as usize]);
            }
            world.poses.insert(node.id.clone(), Isometry3::identity());
        }
        world.refresh_poses();
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn graph(&self) -> &ConnectionGraph {
        &self.graph
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.config.sim.tick
    }

    pub fn actuator(&self, joint_id: &str) -> Result<&ActuatorState, SimError> {
        self.actuators
            .get(joint_id)
            .ok_or_else(|| SimError::UnknownJoint(joint_id.to_owned()))
    }

    pub fn actuators(&self) -> impl Iterator<Item = (&str, &ActuatorState)> {
        self.actuators.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn joint_ids(&self) -> impl Iterator<Item = &str> {
        self.actuators.keys().map(String::as_str)
    }

    pub fn telemetry(&self) -> &[TelemetryRecord] {
        &self.telemetry
    }

    pub fn drain_telemetry(&mut self) -> Vec<TelemetryRecord> {
        std::mem::take(&mut self.telemetry)
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn pending_ik(&self) -> Vec<u64> {
        self.ik_goals.iter().map(|g| g.id).collect()
    }

    pub fn gait_active(&self) -> bool {
        self.gait.is_some()
    }

    pub fn vehicle_mode(&self, limb: &ModuleId) -> Option<VehicleMode> {
        self.vehicle_modes.get(limb).copied()
    }

    pub fn set_vehicle_mode(&mut self, limb: &ModuleId, mode: VehicleMode) -> Result<(), SimError> {
        if self.graph.module(limb)?.kind != ModuleKind::Limb {
            return Err(SimError::NotAVehicle(limb.clone()));
        }
        self.vehicle_modes.insert(limb.clone(), mode);
        Ok(())
    }

    fn limb_of(&self, joint_id: &str) -> Result<&(ModuleId, usize), SimError> {
        self.joint_index
            .get(joint_id)
            .ok_or_else(|| SimError::UnknownJoint(joint_id.to_owned()))
    }

    fn joint_limits(&self, joint_id: &str) -> Result<(f64, f64), SimError> {
        let (limb, i) = self.limb_of(joint_id)?;
        let chain = self.graph.module(limb)?.chain.as_ref().expect("limb has a chain");
        Ok(chain.joints[*i].position_limits)
    }

    /// Current joint angles of a limb, rad.
    pub fn limb_angles(&self, limb: &ModuleId) -> Result<Vec<f64>, SimError> {
        let node = self.graph.module(limb)?;
        let chain = node
            .chain
            .as_ref()
            .ok_or_else(|| GraphError::InvariantBreach(format!("{limb} has no joints")))?;
        Ok(chain
            .joint_ids()
            .iter()
            .map(|id| self.actuators[*id].position * TAU)
            .collect())
    }

    /// Places joints at rest at the given angles in rad. Cancels motion on them.
    pub fn set_joint_angles(&mut self, angles: &BTreeMap<String, f64>) -> Result<(), SimError> {
        for (id, &q) in angles {
            self.check_target(id, q)?;
        }
        for (id, &q) in angles {
            let mode = self.actuators[id].input_mode;
            self.actuators.insert(id.clone(), ActuatorState::at_rest(q / TAU, mode));
        }
        self.abort_goals_touching(angles.keys(), "joints reset");
        self.refresh_poses();
        Ok(())
    }

    fn check_target(&self, joint_id: &str, target: f64) -> Result<(), SimError> {
        let (lo, hi) = self.joint_limits(joint_id)?;
        if !(target >= lo && target <= hi) {
            return Err(SimError::OutOfLimits {
                joint_id: joint_id.to_owned(),
                target,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// World pose of a module's frame.
    pub fn module_pose(&self, module: &ModuleId) -> Result<Isometry3<f64>, SimError> {
        self.poses
            .get(module)
            .copied()
            .ok_or_else(|| GraphError::UnknownModule(module.clone()).into())
    }

    /// Sets the world pose of a component anchor. Other modules follow on
    /// the next pose refresh; setting a non-anchor has no lasting effect.
    pub fn set_module_pose(&mut self, module: &ModuleId, pose: Isometry3<f64>) -> Result<(), SimError> {
        self.graph.module(module)?;
        self.poses.insert(module.clone(), pose);
        self.refresh_poses();
        Ok(())
    }

    pub fn anchor_of(&self, module: &ModuleId) -> Result<&ModuleId, SimError> {
        self.anchors
            .get(module)
            .ok_or_else(|| GraphError::UnknownModule(module.clone()).into())
    }

    /// Outward port frame in its module's frame at the current joint angles.
    fn port_local(&self, port: &PortRef) -> Result<Isometry3<f64>, SimError> {
        let node = self.graph.module(&port.module)?;
        let connector = self.graph.port(port)?;
        match (&node.chain, port.port.as_str()) {
            (Some(chain), "tool") => {
                let q = self.limb_angles(&node.id)?;
                Ok(chain.frames_unchecked(&q).1)
            }
            _ => Ok(connector.mount),
        }
    }

    /// Outward frame of a port in world coordinates.
    pub fn port_world(&self, port: &PortRef) -> Result<Isometry3<f64>, SimError> {
        Ok(self.module_pose(&port.module)? * self.port_local(port)?)
    }

    /// World frame a partner port's outward frame must reach to mate with `port`.
    pub fn mating_frame(&self, port: &PortRef) -> Result<Isometry3<f64>, SimError> {
        Ok(self.port_world(port)? * self.graph.interface_offset * gripper_flip())
    }

    /// Position (m) and rotation (rad) error between `mover`'s outward frame
    /// and the frame at which it would mate with `target`.
    pub fn alignment(&self, mover: &PortRef, target: &PortRef) -> Result<(f64, f64), SimError> {
        let have = self.port_world(mover)?;
        let want = self.mating_frame(target)?;
        let dp = (have.translation.vector - want.translation.vector).norm();
        let dr = have.rotation.angle_to(&want.rotation);
        Ok((dp, dr))
    }

    /// Moves the component holding `port` rigidly so that `port` mates with
    /// `partner` as it currently stands. `partner` must be in another component.
    pub fn place_mated(&mut self, port: &PortRef, partner: &PortRef) -> Result<(), SimError> {
        let anchor = self.anchor_of(&port.module)?.clone();
        if self.anchor_of(&partner.module)? == &anchor {
            return Err(SimError::Config(format!("{port} and {partner} are already connected")));
        }
        let frame = self.mating_frame(partner)?;
        // The port's outward frame must coincide with the mating frame.
        let want = frame * self.port_local(port)?.inverse();
        let have = self.module_pose(&port.module)?;
        let pose = want * have.inverse() * self.module_pose(&anchor)?;
        self.set_module_pose(&anchor, pose)
    }

    /// Re-derives every module pose from its component anchor.
    pub fn refresh_poses(&mut self) {
        let flip = gripper_flip();
        let offset = self.graph.interface_offset;
        self.anchors.clear();
        self.entry.clear();
        for component in self.graph.components() {
            let anchor = component
                .iter()
                .min_by_key(|id| {
                    let node = self.graph.module(id).expect("component member exists");
                    (priority(node), (*id).clone())
                })
                .expect("components are non-empty")
                .clone();
            for m in &component {
                self.anchors.insert(m.clone(), anchor.clone());
            }
            let mut seen = BTreeSet::from([anchor.clone()]);
            let mut queue = VecDeque::from([anchor]);
            while let Some(u) = queue.pop_front() {
                let node = self.graph.module(&u).expect("queued module exists");
                let links: Vec<(String, PortRef)> = node
                    .ports
                    .iter()
                    .filter_map(|(name, p)| p.link.clone().map(|l| (name.clone(), l)))
                    .collect();
                for (name, peer) in links {
                    if !seen.insert(peer.module.clone()) {
                        continue;
                    }
                    let out_u = self
                        .port_local(&PortRef {
                            module: u.clone(),
                            port: name,
                        })
                        .expect("linked port exists");
                    let out_v = self.port_local(&peer).expect("linked port exists");
                    let w = self.poses[&u] * out_u * offset * flip * out_v.inverse();
                    self.poses.insert(peer.module.clone(), w);
                    self.entry.insert(peer.module.clone(), peer.port.clone());
                    queue.push_back(peer.module);
                }
            }
        }
    }

    /// Solves IK for the selected chain toward a world pose without moving
    /// anything. Returns joint ids and angles in rad.
    pub fn plan_ik(
        &self,
        selector: &ChainSelector,
        target: &Isometry3<f64>,
        mask: Option<TaskMask>,
        seed: Option<&[f64]>,
    ) -> Result<(Vec<String>, Vec<f64>), SimError> {
        let chain = self.graph.extract_chain(&selector.root, &selector.tip)?.chain;
        let mask = mask.unwrap_or_else(|| TaskMask::default_for(chain.dof()));
        let seed = match seed {
            Some(s) if s.len() == chain.dof() => s.to_vec(),
            Some(s) => {
                return Err(KinematicsError::InvalidChain(format!(
                    "seed has {} angles for {} joints",
                    s.len(),
                    chain.dof()
                ))
                .into())
            }
            None => self.chain_angles(&chain),
        };
        let base = self.chain_base_world(&selector.root)?;
        let local = Pose::from_isometry(&(base.inverse() * target));
        let options = IkOptions {
            mask,
            ..IkOptions::for_dof(chain.dof())
        };
        let solution = chain.solve_ik(&local, &seed, &options)?;
        let ids = chain.joint_ids().iter().map(|s| s.to_string()).collect();
        Ok((ids, solution.angles))
    }

    /// World pose of a chain tip at the given chain angles, rad.
    pub fn chain_tip_world(&self, selector: &ChainSelector, angles: &[f64]) -> Result<Isometry3<f64>, SimError> {
        let chain = self.graph.extract_chain(&selector.root, &selector.tip)?.chain;
        if angles.len() != chain.dof() {
            return Err(KinematicsError::InvalidChain("angle count".into()).into());
        }
        Ok(self.chain_base_world(&selector.root)? * chain.frames_unchecked(angles).1)
    }

    /// Restores everything but the clock, telemetry and event log from `from`.
    pub fn restore_physical(&mut self, from: &WorldState) {
        let steps = self.steps;
        let telemetry = std::mem::take(&mut self.telemetry);
        let events = std::mem::take(&mut self.events);
        let next_goal = self.next_goal.max(from.next_goal);
        let shift = steps.saturating_sub(from.steps);
        *self = from.clone();
        self.steps = steps;
        self.telemetry = telemetry;
        self.events = events;
        self.next_goal = next_goal;
        for g in &mut self.ik_goals {
            g.started += shift;
        }
        if let Some(gait) = &mut self.gait {
            gait.start += shift;
        }
    }

    /// Equality of graph, joints, wheels, poses, modes and motion goals;
    /// ignores the clock, telemetry and events.
    pub fn physical_eq(&self, other: &WorldState) -> bool {
        self.graph == other.graph
            && self.actuators == other.actuators
            && self.wheel_speeds == other.wheel_speeds
            && self.poses == other.poses
            && self.base_speeds == other.base_speeds
            && self.vehicle_modes == other.vehicle_modes
            && self.ik_goals.len() == other.ik_goals.len()
            && self.gait.is_some() == other.gait.is_some()
    }

    /// Installs a single joint target in rev.
    pub fn apply_joint_command(
        &mut self,
        joint_id: &str,
        target_rev: f64,
        mode: InputMode,
    ) -> Result<f64, SimError> {
        self.apply_joint_targets(&[(joint_id.to_owned(), target_rev)], mode)
    }

    /// Installs targets in rev. In trapezoidal mode all profiles are
    /// stretched to the slowest so the joints arrive together. Returns that
    /// duration, s (zero for the other modes).
    pub fn apply_joint_targets(
        &mut self,
        targets: &[(String, f64)],
        mode: InputMode,
    ) -> Result<f64, SimError> {
        for (id, rev) in targets {
            if !rev.is_finite() {
                return Err(ActuatorError::StateCorruption("target").into());
            }
            self.check_target(id, rev * TAU)?;
        }
        let p = self.config.actuator;
        let mut duration = 0.0;
        if mode == InputMode::TrapezoidalTrajectory {
            let mut profiles = Vec::with_capacity(targets.len());
            for (id, rev) in targets {
                let a = &self.actuators[id];
                let profile =
                    TrapezoidalProfile::new(a.setpoint, *rev, p.output_speed_limit, p.accel_limit)?;
                duration = f64::max(duration, profile.duration());
                profiles.push((id, profile));
            }
            for (id, profile) in profiles {
                self.actuators
                    .get_mut(id)
                    .expect("checked above")
                    .command_profile(profile.stretched_to(duration));
            }
        } else {
            for (id, rev) in targets {
                self.actuators
                    .get_mut(id)
                    .expect("checked above")
                    .command(*rev, mode, &p)?;
            }
        }
        self.abort_goals_touching(targets.iter().map(|(id, _)| id), "superseded by joint command");
        Ok(duration)
    }

    fn abort_goals_touching<'a>(&mut self, joints: impl IntoIterator<Item = &'a String>, reason: &str) {
        let touched: BTreeSet<&String> = joints.into_iter().collect();
        let (keep, drop): (Vec<IkGoal>, Vec<IkGoal>) = std::mem::take(&mut self.ik_goals)
            .into_iter()
            .partition(|g| !g.joints.iter().any(|j| touched.contains(j)));
        self.ik_goals = keep;
        for g in drop {
            self.push_event(SimEventKind::IkAborted {
                goal: g.id,
                reason: reason.to_owned(),
            });
        }
    }

    /// Completion, timeout or abort event of a finished IK goal. Only the
    /// most recent outcomes are kept.
    pub fn goal_outcome(&self, goal: u64) -> Option<&SimEventKind> {
        self.goal_outcomes.get(&goal)
    }

    fn push_event(&mut self, kind: SimEventKind) {
        let goal = match &kind {
            SimEventKind::IkCompleted { goal, .. }
            | SimEventKind::IkTimedOut { goal, .. }
            | SimEventKind::IkAborted { goal, .. } => Some(*goal),
            SimEventKind::GaitFinished { .. } => None,
        };
        if let Some(goal) = goal {
            self.goal_outcomes.insert(goal, kind.clone());
            while self.goal_outcomes.len() > MAX_GOAL_OUTCOMES {
                self.goal_outcomes.pop_first();
            }
        }
        self.events.push(SimEvent {
            step: self.steps,
            time_s: self.time(),
            kind,
        });
    }

    /// World frame of the chain base when `root` is the held port.
    pub fn chain_base_world(&self, root: &PortRef) -> Result<Isometry3<f64>, SimError> {
        Ok(self.port_world(root)? * gripper_flip())
    }

    fn chain_angles(&self, chain: &KinematicChain) -> Vec<f64> {
        chain
            .joint_ids()
            .iter()
            .map(|id| self.actuators[*id].position * TAU)
            .collect()
    }

    /// Solves IK for the selected chain and installs synchronized trapezoids
    /// toward the solution. Completion is reported as an event.
    pub fn apply_ik_command(
        &mut self,
        selector: &ChainSelector,
        target: &IkTarget,
        mask: Option<TaskMask>,
    ) -> Result<IkPlan, SimError> {
        let extracted = self.graph.extract_chain(&selector.root, &selector.tip)?;
        let chain = extracted.chain;
        if chain.dof() == 0 {
            return Err(KinematicsError::InvalidChain("chain has no joints".into()).into());
        }
        let mask = mask.unwrap_or_else(|| TaskMask::default_for(chain.dof()));
        let seed: Vec<f64> = self
            .chain_angles(&chain)
            .iter()
            .zip(&chain.joints)
            .map(|(q, j)| q.clamp(j.position_limits.0, j.position_limits.1))
            .collect();
        let threshold = self.config.sim.singularity_threshold;
        let (flagged, sigma) = chain.is_near_singular(&seed, &mask, threshold)?;
        if flagged {
            return Err(SimError::NearSingular { sigma, threshold });
        }
        let base = self.chain_base_world(&selector.root)?;
        let current = base * chain.frames_unchecked(&seed).1;
        let world_target = match target {
            IkTarget::Delta { dx, dy, dz } => Isometry3::from_parts(
                Translation3::from(current.translation.vector + Vector3::new(*dx, *dy, *dz)),
                current.rotation,
            ),
            IkTarget::Absolute { position, rpy } => Isometry3::from_parts(
                Translation3::new(position[0], position[1], position[2]),
                match rpy {
                    Some([r, p, y]) => UnitQuaternion::from_euler_angles(*r, *p, *y),
                    None => current.rotation,
                },
            ),
            IkTarget::Mate { port } => self.mating_frame(port)?,
        };
        let local = Pose::from_isometry(&(base.inverse() * world_target));
        let options = IkOptions {
            mask: mask.clone(),
            ..IkOptions::for_dof(chain.dof())
        };
        let solution = chain.solve_ik(&local, &seed, &options)?;

        let joints: Vec<String> = chain.joint_ids().iter().map(|s| s.to_string()).collect();
        let targets: Vec<(String, f64)> = joints
            .iter()
            .cloned()
            .zip(solution.angles.iter().map(|q| q / TAU))
            .collect();
        let duration = self.apply_joint_targets(&targets, InputMode::TrapezoidalTrajectory)?;
        let id = self.next_goal;
        self.next_goal += 1;
        self.ik_goals.push(IkGoal {
            id,
            selector: selector.clone(),
            chain,
            joints: joints.clone(),
            target: Pose::from_isometry(&world_target),
            mask,
            started: self.steps,
        });
        Ok(IkPlan {
            goal: id,
            targets: joints.into_iter().zip(solution.angles).collect(),
            duration,
            sigma,
            iterations: solution.iterations,
        })
    }

    /// Masked position error of an IK goal in its chain base frame, m.
    fn goal_residual(&self, goal: &IkGoal) -> Result<f64, SimError> {
        let base = self.chain_base_world(&goal.selector.root)?;
        let q = self.chain_angles(&goal.chain);
        let tool = base * goal.chain.frames_unchecked(&q).1;
        let err = base.rotation.inverse() * (goal.target.position - tool.translation.vector);
        let mut sum = 0.0;
        for row in goal.mask.rows() {
            sum += match row {
                TaskRow::Px => err.x * err.x,
                TaskRow::Py => err.y * err.y,
                TaskRow::Pz => err.z * err.z,
                _ => 0.0,
            };
        }
        Ok(sum.sqrt())
    }

    fn check_goals(&mut self) -> Result<(), SimError> {
        if self.ik_goals.is_empty() {
            return Ok(());
        }
        let tick = self.config.sim.tick;
        let timeout = (self.config.sim.ik_timeout / tick).round() as u64;
        let mut keep = Vec::new();
        let mut finished = Vec::new();
        for goal in std::mem::take(&mut self.ik_goals) {
            let residual = self.goal_residual(&goal)?;
            let still = goal.joints.iter().all(|j| {
                let a = &self.actuators[j];
                a.active_profile
                    .map_or(true, |p| a.elapsed_in_profile >= p.duration())
                    && a.velocity.abs() <= self.config.sim.settle_velocity
            });
            if still && residual < self.config.sim.ik_tolerance {
                finished.push(SimEventKind::IkCompleted {
                    goal: goal.id,
                    elapsed_s: (self.steps - goal.started) as f64 * tick,
                    residual_m: residual,
                });
            } else if self.steps - goal.started >= timeout {
                finished.push(SimEventKind::IkTimedOut {
                    goal: goal.id,
                    residual_m: residual,
                });
            } else {
                keep.push(goal);
            }
        }
        self.ik_goals = keep;
        for e in finished {
            self.push_event(e);
        }
        Ok(())
    }

    /// Sets drive speeds of a wheel module, rad/s per axis.
    pub fn set_wheel_speeds(&mut self, module: &ModuleId, speeds: &[f64]) -> Result<(), SimError> {
        let slot = self
            .wheel_speeds
            .get_mut(module)
            .ok_or_else(|| SimError::NotAWheel(module.clone()))?;
        if speeds.len() != slot.len() || speeds.iter().any(|s| !s.is_finite()) {
            return Err(SimError::Config(format!(
                "{module} takes {} finite drive speeds",
                slot.len()
            )));
        }
        slot.copy_from_slice(speeds);
        Ok(())
    }

    /// Drives every axis of every wheel in `module`'s component at the speed
    /// that would give `speed` m/s.
    pub fn drive_component(&mut self, module: &ModuleId, speed: f64) -> Result<(), SimError> {
        let component = self.graph.component_of(module)?;
        let omega = speed / self.config.sim.wheel_radius;
        let mut any = false;
        for m in component {
            if let Some(slot) = self.wheel_speeds.get_mut(&m) {
                slot.iter_mut().for_each(|s| *s = omega);
                any = true;
            }
        }
        if any {
            Ok(())
        } else {
            Err(SimError::NotAWheel(module.clone()))
        }
    }

    /// Current base speed of `module`'s component, m/s.
    pub fn base_speed(&self, module: &ModuleId) -> Result<f64, SimError> {
        let anchor = self.anchor_of(module)?;
        Ok(self.base_speeds.get(anchor).copied().unwrap_or(0.0))
    }

    /// Starts the spinbot gait on `limb`, optionally for a fixed number of cycles.
    pub fn start_gait(&mut self, limb: &ModuleId, cycles: Option<u64>) -> Result<(), SimError> {
        let q = self.limb_angles(limb)?;
        let component = self.graph.component_of(limb)?;
        if !component
            .iter()
            .any(|m| self.wheel_speeds.contains_key(m))
        {
            return Err(SimError::NotAWheel(limb.clone()));
        }
        self.gait = Some(GaitState {
            limb: limb.clone(),
            start: self.steps,
            base_roll: (q[0], q[3]),
            cycles,
        });
        Ok(())
    }

    pub fn stop_gait(&mut self) {
        if let Some(g) = self.gait.take() {
            let _ = self.drive_component(&g.limb, 0.0);
        }
    }

    fn gait_tick(&mut self) -> Result<(), SimError> {
        let Some(g) = self.gait.clone() else {
            return Ok(());
        };
        let params = self.config.sim.gait;
        let period = (params.period / self.config.sim.tick).round() as u64;
        let half = period / 2;
        let elapsed = self.steps - g.start;
        let cycle = elapsed / period;
        if g.cycles.is_some_and(|n| cycle >= n) {
            self.stop_gait();
            self.push_event(SimEventKind::GaitFinished { cycles: cycle });
            return Ok(());
        }
        let phase = elapsed % period;
        let j1 = format!("{}/j1", g.limb);
        let j4 = format!("{}/j4", g.limb);
        let (r1, r4) = g.base_roll;
        if phase == 0 {
            let s = params.shift_angle;
            self.apply_joint_targets(
                &[(j1, (r1 + s) / TAU), (j4, (r4 - s) / TAU)],
                InputMode::TrapezoidalTrajectory,
            )?;
            self.drive_component(&g.limb, 0.0)?;
        } else if phase == half {
            self.apply_joint_targets(
                &[(j1, r1 / TAU), (j4, r4 / TAU)],
                InputMode::TrapezoidalTrajectory,
            )?;
            let moving_time = (period - half) as f64 * self.config.sim.tick;
            self.drive_component(&g.limb, params.step_length / moving_time)?;
        }
        Ok(())
    }

    /// Static gravity torque about each joint from the limb's own masses, Nm.
    fn gravity_loads(&self) -> BTreeMap<String, f64> {
        let sim = &self.config.sim;
        let mut loads = BTreeMap::new();
        if sim.link_mass == 0.0 && sim.gripper_mass == 0.0 {
            return loads;
        }
        let g = Vector3::new(0.0, 0.0, -sim.gravity);
        for node in self.graph.modules() {
            let Some(chain) = &node.chain else { continue };
            let q = self.limb_angles(&node.id).expect("limb angles");
            let world = self.poses[&node.id];
            let (frames, tool) = chain.frames_unchecked(&q);
            let frames: Vec<Isometry3<f64>> = frames.iter().map(|f| world * f).collect();
            let tool = world * tool;
            let at = |f: &Isometry3<f64>| f.translation.vector;
            let com = tool.rotation * Vector3::from(sim.gripper_com_offset) + at(&tool);
            // (position, mass, index of the last joint on the base side)
            let masses = [
                ((at(&frames[1]) + at(&frames[2])) / 2.0, sim.link_mass, 1),
                ((at(&frames[2]) + at(&frames[3])) / 2.0, sim.link_mass, 2),
                (com, sim.gripper_mass, 3),
            ];
            let held_at_tool = self.entry.get(&node.id).is_some_and(|p| p == "tool");
            for (i, (frame, joint)) in frames.iter().zip(&chain.joints).enumerate() {
                let axis = frame.rotation * joint.axis.into_inner();
                let mut torque = 0.0;
                for (r, m, last_base_side) in &masses {
                    let moves_with_child = *last_base_side >= i;
                    if moves_with_child != held_at_tool {
                        torque += axis.dot(&(r - at(frame)).cross(&(g * *m)));
                    }
                }
                let signed = if held_at_tool { -torque } else { torque };
                loads.insert(joint.joint_id.clone(), signed);
            }
        }
        loads
    }

    fn integrate_base(&mut self, dt: f64) {
        let sim = self.config.sim;
        self.base_speeds.clear();
        for component in self.graph.components() {
            let anchor = self.anchors[&component[0]].clone();
            let grounded = component.iter().any(|m| {
                let node = self.graph.module(m).expect("member");
                node.kind == ModuleKind::Pallet && node.ports.values().any(|p| p.link.is_some())
            });
            let wheels: Vec<&ModuleId> = component
                .iter()
                .filter(|m| self.wheel_speeds.contains_key(*m))
                .collect();
            if grounded || wheels.is_empty() {
                continue;
            }
            let axes: Vec<f64> = wheels
                .iter()
                .flat_map(|m| self.wheel_speeds[*m].iter().copied())
                .collect();
            let omega = axes.iter().sum::<f64>() / axes.len() as f64;
            let v = (omega * sim.wheel_radius).clamp(-sim.speed_cap, sim.speed_cap);
            self.base_speeds.insert(anchor.clone(), v);
            if v == 0.0 {
                continue;
            }
            let mut yaw_rate = 0.0;
            if wheels.len() >= 2 {
                let a = self.poses[wheels[0]].translation.vector;
                let b = self.poses[wheels[1]].translation.vector;
                let wheelbase = (a - b).xy().norm();
                let steer: f64 = component
                    .iter()
                    .filter(|m| self.vehicle_modes.get(*m) == Some(&VehicleMode::Steering))
                    .filter_map(|m| self.limb_angles(m).ok())
                    .map(|q| q[1] + q[2])
                    .sum();
                if wheelbase > 1e-9 {
                    yaw_rate = v * steer.sin() / wheelbase;
                }
            }
            let pose = self.poses.get_mut(&anchor).expect("anchor pose");
            let heading = pose.rotation * Vector3::x();
            let flat = Vector3::new(heading.x, heading.y, 0.0);
            if flat.norm() > 1e-9 {
                pose.translation.vector += flat.normalize() * v * dt;
            }
            let turn = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_rate * dt);
            pose.rotation = turn * pose.rotation;
        }
    }

    fn sample(&self, id: &str, a: &ActuatorState) -> TelemetryRecord {
        TelemetryRecord {
            time_s: self.time(),
            joint_id: id.to_owned(),
            pos_rev: a.position,
            vel_rev_s: a.velocity,
            current_a: a.current,
        }
    }

    fn breach(&self, message: String) -> SimError {
        SimError::InvariantBreach(Box::new(Diagnostic {
            step: self.steps,
            time_s: self.time(),
            message,
            joints: self
                .actuators
                .iter()
                .map(|(id, a)| self.sample(id, a))
                .collect(),
        }))
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        if let Err(e) = self.graph.check_invariants() {
            return Err(self.breach(e.to_string()));
        }
        let limit = self.config.actuator.output_speed_limit * (1.0 + 1e-12);
        for (id, a) in &self.actuators {
            if a.velocity.abs() > limit {
                return Err(self.breach(format!("{id} at {} rev/s exceeds the speed cap", a.velocity)));
            }
        }
        let cap = self.config.sim.speed_cap * (1.0 + 1e-12);
        for (id, v) in &self.base_speeds {
            if v.abs() > cap {
                return Err(self.breach(format!("base of {id} at {v} m/s exceeds the cap")));
            }
        }
        if self.actuators.len() != self.joint_index.len() {
            return Err(self.breach("joint without actuator".into()));
        }
        Ok(())
    }

    fn tick(&mut self) -> Result<(), SimError> {
        let dt = self.config.sim.tick;
        self.gait_tick()?;
        let loads = self.gravity_loads();
        let params = self.config.actuator;
        for (id, state) in self.actuators.iter_mut() {
            let load = loads.get(id).copied().unwrap_or(0.0);
            match step_actuator(state, &params, dt, load) {
                Ok(next) => *state = next,
                Err(e) => {
                    let message = format!("{id}: {e}");
                    return Err(self.breach(message));
                }
            }
        }
        self.steps += 1;
        self.integrate_base(dt);
        self.refresh_poses();
        self.check_goals()?;
        if self.config.sim.record_telemetry && self.steps % self.config.sim.telemetry_decimation == 0 {
            let rows: Vec<TelemetryRecord> = self
                .actuators
                .iter()
                .map(|(id, a)| self.sample(id, a))
                .collect();
            self.telemetry.extend(rows);
        }
        self.check_invariants()
    }

    /// Advances by `dt`, which must be a whole number of ticks.
    pub fn step_world(&mut self, dt: f64) -> Result<(), SimError> {
        let tick = self.config.sim.tick;
        let n = (dt / tick).round();
        if !(n >= 1.0) || (n * tick - dt).abs() > 1e-9 * dt.max(tick) {
            return Err(SimError::InvalidStep { dt, tick });
        }
        for _ in 0..n as u64 {
            self.tick()?;
        }
        Ok(())
    }

    /// Advances `n` ticks.
    pub fn step_ticks(&mut self, n: u64) -> Result<(), SimError> {
        for _ in 0..n {
            self.tick()?;
        }
        Ok(())
    }

    /// True when no profile is running and every joint is below the settle speed.
    pub fn is_settled(&self, tolerance_rev: f64) -> bool {
        self.ik_goals.is_empty()
            && self.actuators.values().all(|a| a.is_settled(tolerance_rev))
    }

    pub fn attach(&mut self, a: &PortRef, b: &PortRef) -> Result<(), SimError> {
        self.graph = self.graph.attach(a, b)?;
        self.graph.time = self.time();
        self.after_graph_change();
        Ok(())
    }

    pub fn detach(&mut self, a: &PortRef, b: &PortRef) -> Result<DetachReport, SimError> {
        let (graph, report) = self.graph.detach(a, b)?;
        self.graph = graph;
        self.graph.time = self.time();
        self.after_graph_change();
        Ok(report)
    }

    pub fn set_gripper(
        &mut self,
        port: &PortRef,
        state: GripperState,
    ) -> Result<Option<DetachReport>, SimError> {
        let (graph, report) = self.graph.set_gripper(port, state)?;
        self.graph = graph;
        self.graph.time = self.time();
        self.after_graph_change();
        Ok(report)
    }

    fn after_graph_change(&mut self) {
        self.refresh_poses();
        let stale: Vec<String> = self
            .ik_goals
            .iter()
            .filter(|g| self.graph.extract_chain(&g.selector.root, &g.selector.tip).is_err())
            .flat_map(|g| g.joints.clone())
            .collect();
        self.abort_goals_touching(stale.iter(), "chain changed");
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            step: self.steps,
            time_s: self.time(),
            graph: serde_json::from_str(&self.graph.to_canonical_json())
                .expect("canonical graph is JSON"),
            joints: self
                .actuators
                .iter()
                .map(|(id, a)| JointSnapshot {
                    joint_id: id.clone(),
                    pos_rev: a.position,
                    vel_rev_s: a.velocity,
                    current_a: a.current,
                    target_rev: a.target,
                    input_mode: a.input_mode,
                })
                .collect(),
            modules: self
                .graph
                .modules()
                .map(|n| {
                    let p = self.poses[&n.id];
                    let q = p.rotation.quaternion();
                    let t = p.translation.vector;
                    ModulePose {
                        id: n.id.clone(),
                        kind: n.kind,
                        position: [t.x, t.y, t.z],
                        orientation: [q.w, q.i, q.j, q.k],
                    }
                })
                .collect(),
            wheel_speeds: self.wheel_speeds.clone(),
            base_speeds: self.base_speeds.clone(),
            vehicle_modes: self.vehicle_modes.clone(),
            pending_ik: self.pending_ik(),
            gait_active: self.gait.is_some(),
        }
    }

    /// Writes the recorded telemetry as CSV and returns the row count.
    pub fn export_telemetry(&self, path: &Path) -> std::io::Result<usize> {
        std::fs::write(path, telemetry_csv(&self.telemetry))?;
        Ok(self.telemetry.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::TemplateRegistry;

    fn world(template: &str) -> WorldState {
        let cfg = WorldConfig::default();
        let g = TemplateRegistry::builtin()
            .get(template)
            .unwrap()
            .instantiate("", &cfg.limb, &cfg.modules)
            .unwrap();
        WorldState::new(cfg, g).unwrap()
    }

    #[test]
    fn idle_world_only_advances_time() {
        let mut w = world("limb4");
        let before = w.clone();
        w.step_world(0.01).unwrap();
        assert_eq!(w.steps(), 10);
        assert!((w.time() - 0.01).abs() < 1e-15);
        for (id, a) in w.actuators() {
            let b = before.actuator(id).unwrap();
            assert_eq!(a.position, b.position);
            assert_eq!(a.velocity, 0.0);
            assert_eq!(a.current, 0.0);
        }
        assert_eq!(w.telemetry().len(), 40);
    }

    #[test]
    fn step_must_be_whole_ticks() {
        let mut w = world("limb4");
        assert!(matches!(w.step_world(0.0015), Err(SimError::InvalidStep { .. })));
        assert!(matches!(w.step_world(0.0), Err(SimError::InvalidStep { .. })));
        assert!(matches!(w.step_world(-1.0), Err(SimError::InvalidStep { .. })));
    }

    #[test]
    fn one_step_equals_two_half_steps() {
        let mut a = world("limb4");
        a.apply_joint_command("limb/j2", 0.1, InputMode::TrapezoidalTrajectory)
            .unwrap();
        let mut b = a.clone();
        a.step_world(0.2).unwrap();
        b.step_world(0.1).unwrap();
        b.step_world(0.1).unwrap();
        for (id, x) in a.actuators() {
            let y = b.actuator(id).unwrap();
            assert!((x.position - y.position).abs() <= 1e-9);
        }
        assert_eq!(a.telemetry(), b.telemetry());
    }

    #[test]
    fn joint_command_errors() {
        let mut w = world("limb4");
        assert_eq!(
            w.apply_joint_command("nope/j1", 0.1, InputMode::Passthrough)
                .unwrap_err()
                .code(),
            "UNKNOWN_TARGET"
        );
        assert_eq!(
            w.apply_joint_command("limb/j2", 0.5, InputMode::Passthrough)
                .unwrap_err()
                .code(),
            "OUT_OF_LIMITS"
        );
    }

    #[test]
    fn target_at_current_position_settles_immediately() {
        let mut w = world("limb4");
        w.apply_joint_command("limb/j1", 0.0, InputMode::TrapezoidalTrajectory)
            .unwrap();
        w.step_ticks(1).unwrap();
        assert!(w.is_settled(1e-12));
    }

    #[test]
    fn telemetry_csv_layout() {
        let mut w = world("limb4");
        assert_eq!(telemetry_csv(w.telemetry()), format!("{TELEMETRY_HEADER}\n"));
        w.step_ticks(3).unwrap();
        let csv = telemetry_csv(w.telemetry());
        assert_eq!(csv.lines().count(), 1 + 12);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.001000000,limb/j1,"));
    }

    #[test]
    fn ik_zero_delta_completes_without_motion() {
        let mut w = world("limb4");
        let bent: BTreeMap<String, f64> = [("limb/j2", -0.6), ("limb/j3", 1.4)]
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        w.set_joint_angles(&bent).unwrap();
        let plan = w
            .apply_ik_command(
                &ChainSelector::limb("limb"),
                &IkTarget::Delta { dx: 0.0, dy: 0.0, dz: 0.0 },
                None,
            )
            .unwrap();
        assert_eq!(plan.duration, 0.0);
        w.step_ticks(1).unwrap();
        assert!(matches!(
            w.events()[0].kind,
            SimEventKind::IkCompleted { goal, .. } if goal == plan.goal
        ));
    }

    #[test]
    fn ik_from_stretched_pose_is_rejected() {
        let mut w = world("limb4");
        let err = w
            .apply_ik_command(
                &ChainSelector::limb("limb"),
                &IkTarget::Delta { dx: 0.01, dy: 0.0, dz: 0.0 },
                None,
            )
            .unwrap_err();
        assert!(matches!(err, SimError::NearSingular { .. }));
        assert_eq!(err.code(), "IK_FAILURE");
    }

    #[test]
    fn mated_ports_line_up() {
        let w = world("limb8");
        let (dp, dr) = w
            .alignment(&"upper.tool".parse().unwrap(), &"lower.tool".parse().unwrap())
            .unwrap();
        assert!(dp < 1e-12 && dr < 1e-9, "{dp} {dr}");
    }

    #[test]
    fn extracted_chain_matches_world_poses() {
        let mut w = world("dragon");
        let angles: BTreeMap<String, f64> = [
            ("arm/j1", 0.3),
            ("arm/j2", -0.5),
            ("arm/j3", 1.1),
            ("bridge/j2", 0.2),
            ("bridge/j4", -0.4),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        w.set_joint_angles(&angles).unwrap();
        let root: PortRef = "front.f1".parse().unwrap();
        let tip: PortRef = "arm.base".parse().unwrap();
        let ex = w.graph().extract_chain(&root, &tip).unwrap();
        assert_eq!(ex.chain.dof(), 8);
        let q = w.chain_angles(&ex.chain);
        let via_chain = w.chain_base_world(&root).unwrap() * ex.chain.frames_unchecked(&q).1;
        let direct = w.port_world(&tip).unwrap();
        assert!((via_chain.translation.vector - direct.translation.vector).norm() < 1e-12);
        assert!(via_chain.rotation.angle_to(&direct.rotation) < 1e-9);
    }

    #[test]
    fn base_speed_is_capped() {
        let mut w = world("vehicle");
        let front = ModuleId::new("front");
        w.drive_component(&front, 2.0).unwrap();
        let start = w.module_pose(&front).unwrap().translation.vector;
        w.step_world(1.0).unwrap();
        assert_eq!(w.base_speed(&front).unwrap(), 1.0);
        let moved = (w.module_pose(&front).unwrap().translation.vector - start).norm();
        assert!((moved - 1.0).abs() < 1e-9, "{moved}");
        w.drive_component(&front, 0.0).unwrap();
        w.step_world(0.1).unwrap();
        assert_eq!(w.base_speed(&front).unwrap(), 0.0);
    }

    #[test]
    fn gripper_mass_loads_the_wrist() {
        let mut cfg = WorldConfig::default();
        cfg.sim.link_mass = 2.0;
        cfg.sim.gripper_mass = 1.0;
        cfg.sim.gripper_com_offset = [0.0, 0.05, 0.0];
        let g = TemplateRegistry::builtin()
            .get("limb4")
            .unwrap()
            .instantiate("", &cfg.limb, &cfg.modules)
            .unwrap();
        let mut w = WorldState::new(cfg, g).unwrap();
        let pose: BTreeMap<String, f64> = [("limb/j2".to_owned(), std::f64::consts::FRAC_PI_2)]
            .into_iter()
            .collect();
        w.set_joint_angles(&pose).unwrap();
        w.step_world(0.5).unwrap();
        let j2 = w.actuator("limb/j2").unwrap().current.abs();
        let j4 = w.actuator("limb/j4").unwrap().current.abs();
        assert!(j2 > j4 && j4 > 0.0, "{j2} {j4}");
    }
}
