//! Connection graph: modules, connector ports and the monogamous links
//! between them.
//!
//! Every port has an *outward* frame on its module whose z axis points out of
//! the connector. Two mated connectors face each other, so the partner's
//! *inward* frame (outward frame turned by [`gripper_flip`]) coincides with
//! this port's outward frame, up to the configured interface offset.
//!
//! Graph values are snapshots: every mutation returns a new graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::kinematics::{gripper_flip, KinematicChain, LimbGeometry, Pose};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModuleId(pub String);

impl ModuleId {
    pub fn new(id: impl Into<String>) -> Self {
        ModuleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModuleId {
    fn from(s: &str) -> Self {
        ModuleId(s.to_owned())
    }
}

/// `module.port`, e.g. `limb1.tool`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRef {
    pub module: ModuleId,
    pub port: String,
}

impl PortRef {
    pub fn new(module: impl Into<String>, port: impl Into<String>) -> Self {
        PortRef {
            module: ModuleId(module.into()),
            port: port.into(),
        }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.module, self.port)
    }
}

impl FromStr for PortRef {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('.') {
            Some((m, p)) if !m.is_empty() && !p.is_empty() && !p.contains('.') => {
                Ok(PortRef::new(m, p))
            }
            _ => Err(GraphError::MalformedPort(s.to_owned())),
        }
    }
}

impl Serialize for PortRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("port {port} is already linked to {linked_to}")]
    MonogamyViolation { port: PortRef, linked_to: PortRef },
    #[error("ports {a} and {b} are both fixtures")]
    IncompatiblePorts { a: PortRef, b: PortRef },
    #[error("module {0} cannot link to itself")]
    SelfAttach(ModuleId),
    #[error("unknown module {0}")]
    UnknownModule(ModuleId),
    #[error("unknown port {0}")]
    UnknownPort(PortRef),
    #[error("malformed port reference {0:?}, expected module.port")]
    MalformedPort(String),
    #[error("no edge between {a} and {b}")]
    EdgeNotFound { a: PortRef, b: PortRef },
    #[error("{0} is not a gripper")]
    NotAGripper(PortRef),
    #[error("no path from {from} to {to}")]
    NoPath { from: PortRef, to: PortRef },
    #[error("{count} distinct paths from {from} to {to}")]
    AmbiguousPath {
        from: PortRef,
        to: PortRef,
        count: usize,
    },
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("module {0} already exists")]
    DuplicateModule(ModuleId),
    #[error("template error: {0}")]
    Template(String),
    #[error("graph invariant violated: {0}")]
    InvariantBreach(String),
}

impl GraphError {
    /// Stable error code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            GraphError::MonogamyViolation { .. } => "MONOGAMY_VIOLATION",
            GraphError::IncompatiblePorts { .. } => "INCOMPATIBLE_PORTS",
            GraphError::SelfAttach(_) => "SELF_ATTACH",
            GraphError::UnknownModule(_)
            | GraphError::UnknownPort(_)
            | GraphError::UnknownTemplate(_) => "UNKNOWN_TARGET",
            GraphError::EdgeNotFound { .. } => "EDGE_NOT_FOUND",
            GraphError::NoPath { .. } => "NO_PATH",
            GraphError::AmbiguousPath { .. } => "AMBIGUOUS_PATH",
            GraphError::MalformedPort(_)
            | GraphError::NotAGripper(_)
            | GraphError::DuplicateModule(_)
            | GraphError::Template(_) => "INVALID_REQUEST",
            GraphError::InvariantBreach(_) => "INVARIANT_BREACH",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Limb,
    SingleWheel,
    DualWheel,
    CentralBody,
    Pallet,
}

impl ModuleKind {
    pub fn is_wheel(self) -> bool {
        matches!(self, ModuleKind::SingleWheel | ModuleKind::DualWheel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortKind {
    Gripper,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorPort {
    pub port_id: String,
    pub kind: PortKind,
    /// `None` for fixtures.
    pub state: Option<GripperState>,
    pub link: Option<PortRef>,
    /// Outward frame on the module. For a limb tool gripper the real frame
    /// follows the joints; this field then holds the identity.
    pub mount: Isometry3<f64>,
}

impl ConnectorPort {
    fn gripper(id: &str, mount: Isometry3<f64>) -> Self {
        ConnectorPort {
            port_id: id.to_owned(),
            kind: PortKind::Gripper,
            state: Some(GripperState::Open),
            link: None,
            mount,
        }
    }

    fn fixture(id: &str, mount: Isometry3<f64>) -> Self {
        ConnectorPort {
            port_id: id.to_owned(),
            kind: PortKind::Fixture,
            state: None,
            link: None,
            mount,
        }
    }
}

/// Dimensions of the passive modules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleGeometry {
    /// Height of wheel-module fixtures above the module origin, m.
    pub wheel_fixture_height: f64,
    /// Forward offset of a dual-wheel module's side fixture, m.
    pub dual_wheel_side_offset: f64,
    /// Distance from a central body's origin to each side fixture, m.
    pub body_half_width: f64,
    pub pallet_fixtures: usize,
    /// Fixture pitch on a pallet, m. Defaults to the spacing a limb can span
    /// with its gripper pointing straight down.
    pub pallet_spacing: Option<f64>,
    /// Gap between two closed connector faces, m.
    pub interface_gap: f64,
}

impl Default for ModuleGeometry {
    fn default() -> Self {
        ModuleGeometry {
            wheel_fixture_height: 0.25,
            dual_wheel_side_offset: 0.20,
            body_half_width: 0.25,
            pallet_fixtures: 12,
            pallet_spacing: None,
            interface_gap: 0.0,
        }
    }
}

impl ModuleGeometry {
    pub fn pallet_spacing(&self, limb: &LimbGeometry) -> f64 {
        self.pallet_spacing.unwrap_or_else(|| inchworm_spacing(limb))
    }
}

/// Horizontal distance between two level fixtures that a limb standing on
/// one can grasp with its tool pointing straight down onto the other.
pub fn inchworm_spacing(limb: &LimbGeometry) -> f64 {
    let shoulder = limb.base_to_roll + limb.roll_to_pitch;
    let drop = limb.lower_link + limb.tool_length - shoulder;
    (limb.upper_link.powi(2) - drop.powi(2)).max(0.0).sqrt()
}

fn facing(position: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::from(position), rotation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleNode {
    pub id: ModuleId,
    pub kind: ModuleKind,
    pub ports: BTreeMap<String, ConnectorPort>,
    /// Limbs only: the chain from the base gripper face to the tool face.
    pub chain: Option<KinematicChain>,
    pub base_pose: Pose,
    /// Wheel drive axes; not manipulator DOF.
    pub drive_axes: u32,
}

impl ModuleNode {
    pub fn new(id: &str, kind: ModuleKind, limb: &LimbGeometry, geometry: &ModuleGeometry) -> Self {
        let up = UnitQuaternion::identity();
        let side = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
        let h = geometry.wheel_fixture_height;
        let mut ports = Vec::new();
        let mut chain = None;
        let mut drive_axes = 0;
        match kind {
            ModuleKind::Limb => {
                ports.push(ConnectorPort::gripper("base", gripper_flip()));
                ports.push(ConnectorPort::gripper("tool", Isometry3::identity()));
                chain = Some(KinematicChain::limb(limb, id));
            }
            ModuleKind::SingleWheel => {
                ports.push(ConnectorPort::fixture("f0", facing(Vector3::new(0.0, 0.0, h), up)));
                drive_axes = 1;
            }
            ModuleKind::DualWheel => {
                let x = geometry.dual_wheel_side_offset;
                ports.push(ConnectorPort::fixture("f0", facing(Vector3::new(x, 0.0, h), side)));
                ports.push(ConnectorPort::fixture("f1", facing(Vector3::new(0.0, 0.0, h), up)));
                drive_axes = 2;
            }
            ModuleKind::CentralBody => {
                for i in 0..4 {
                    let yaw = UnitQuaternion::from_axis_angle(
                        &Vector3::z_axis(),
                        i as f64 * std::f64::consts::FRAC_PI_2,
                    );
                    let at = yaw * Vector3::new(geometry.body_half_width, 0.0, 0.0);
                    ports.push(ConnectorPort::fixture(&format!("f{i}"), facing(at, yaw * side)));
                }
            }
            ModuleKind::Pallet => {
                let spacing = geometry.pallet_spacing(limb);
                for i in 0..geometry.pallet_fixtures {
                    let at = Vector3::new(0.0, i as f64 * spacing, 0.0);
                    ports.push(ConnectorPort::fixture(&format!("p{i}"), facing(at, up)));
                }
            }
        }
        ModuleNode {
            id: ModuleId::new(id),
            kind,
            ports: ports.into_iter().map(|p| (p.port_id.clone(), p)).collect(),
            chain,
            base_pose: Pose::identity(),
            drive_axes,
        }
    }

    pub fn dof(&self) -> usize {
        self.chain.as_ref().map_or(0, KinematicChain::dof)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    GenderlessGrip,
    MaleIntoFixture,
}

/// A link between two ports, stored with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub a: PortRef,
    pub b: PortRef,
    pub kind: EdgeKind,
}

impl Edge {
    fn new(x: PortRef, y: PortRef, kind: EdgeKind) -> Self {
        if x <= y {
            Edge { a: x, b: y, kind }
        } else {
            Edge { a: y, b: x, kind }
        }
    }

    pub fn touches(&self, port: &PortRef) -> bool {
        &self.a == port || &self.b == port
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetachReport {
    pub removed: Edge,
    /// Connected components after the detach, each sorted.
    pub components: Vec<Vec<ModuleId>>,
    /// True when the detach disconnected the two former endpoints.
    pub split: bool,
}

/// One step along a path between two ports.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Hop {
    /// Through a module from one of its ports to another.
    Internal {
        module: ModuleId,
        from: String,
        to: String,
    },
    /// Across a link.
    Link { from: PortRef, to: PortRef },
}

/// A chain pulled out of the graph, plus what it passed through.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedChain {
    pub chain: KinematicChain,
    /// Modules in traversal order.
    pub modules: Vec<ModuleId>,
    /// Wheel modules on the path and their drive-axis counts.
    pub drive_axes: Vec<(ModuleId, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DofCount {
    pub joints: usize,
    pub drive_axes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionGraph {
    nodes: BTreeMap<ModuleId, ModuleNode>,
    edges: BTreeSet<Edge>,
    /// World time of this snapshot, s.
    pub time: f64,
    /// Transform from a port's outward frame to its partner's inward frame.
    pub interface_offset: Isometry3<f64>,
}

impl Default for ConnectionGraph {
    fn default() -> Self {
        ConnectionGraph::new()
    }
}

impl ConnectionGraph {
    pub fn new() -> Self {
        ConnectionGraph {
            nodes: BTreeMap::new(),
            edges: BTreeSet::new(),
            time: 0.0,
            interface_offset: Isometry3::identity(),
        }
    }

    pub fn with_interface_gap(mut self, gap: f64) -> Self {
        self.interface_offset = Isometry3::translation(0.0, 0.0, gap);
        self
    }

    pub fn add_module(&self, node: ModuleNode) -> Result<Self, GraphError> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateModule(node.id));
        }
        let mut next = self.clone();
        next.nodes.insert(node.id.clone(), node);
        Ok(next)
    }

    pub fn modules(&self) -> impl Iterator<Item = &ModuleNode> {
        self.nodes.values()
    }

    pub fn module(&self, id: &ModuleId) -> Result<&ModuleNode, GraphError> {
        self.nodes
            .get(id)
            .ok_or_else(|| GraphError::UnknownModule(id.clone()))
    }

    pub fn module_mut(&mut self, id: &ModuleId) -> Result<&mut ModuleNode, GraphError> {
        self.nodes
            .get_mut(id)
            .ok_or_else(|| GraphError::UnknownModule(id.clone()))
    }

    pub fn port(&self, port: &PortRef) -> Result<&ConnectorPort, GraphError> {
        self.module(&port.module)?
            .ports
            .get(&port.port)
            .ok_or_else(|| GraphError::UnknownPort(port.clone()))
    }

    fn port_mut(&mut self, port: &PortRef) -> Result<&mut ConnectorPort, GraphError> {
        self.nodes
            .get_mut(&port.module)
            .ok_or_else(|| GraphError::UnknownModule(port.module.clone()))?
            .ports
            .get_mut(&port.port)
            .ok_or_else(|| GraphError::UnknownPort(port.clone()))
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_between(&self, a: &PortRef, b: &PortRef) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| (e.a == *a && e.b == *b) || (e.a == *b && e.b == *a))
    }

    /// Links two free ports. Gripper to gripper is a genderless grip; gripper
    /// to fixture is a male insertion. Both grippers end up closed.
    pub fn attach(&self, a: &PortRef, b: &PortRef) -> Result<Self, GraphError> {
        let pa = self.port(a)?;
        let pb = self.port(b)?;
        if a.module == b.module {
            return Err(GraphError::SelfAttach(a.module.clone()));
        }
        for (port, state) in [(a, pa), (b, pb)] {
            if let Some(other) = &state.link {
                return Err(GraphError::MonogamyViolation {
                    port: port.clone(),
                    linked_to: other.clone(),
                });
            }
        }
        let kind = match (pa.kind, pb.kind) {
            (PortKind::Gripper, PortKind::Gripper) => EdgeKind::GenderlessGrip,
            (PortKind::Fixture, PortKind::Fixture) => {
                return Err(GraphError::IncompatiblePorts {
                    a: a.clone(),
                    b: b.clone(),
                })
            }
            _ => EdgeKind::MaleIntoFixture,
        };
        let mut next = self.clone();
        for (port, other) in [(a, b), (b, a)] {
            let p = next.port_mut(port)?;
            p.link = Some(other.clone());
            if p.kind == PortKind::Gripper {
                p.state = Some(GripperState::Closed);
            }
        }
        next.edges.insert(Edge::new(a.clone(), b.clone(), kind));
        Ok(next)
    }

    /// Removes the link between `a` and `b` and opens their grippers.
    pub fn detach(&self, a: &PortRef, b: &PortRef) -> Result<(Self, DetachReport), GraphError> {
        let edge = self
            .edge_between(a, b)
            .cloned()
            .ok_or_else(|| GraphError::EdgeNotFound {
                a: a.clone(),
                b: b.clone(),
            })?;
        let mut next = self.clone();
        next.edges.remove(&edge);
        for port in [&edge.a, &edge.b] {
            let p = next.port_mut(port)?;
            p.link = None;
            if p.kind == PortKind::Gripper {
                p.state = Some(GripperState::Open);
            }
        }
        let components = next.components();
        let split = !components
            .iter()
            .any(|c| c.contains(&edge.a.module) && c.contains(&edge.b.module));
        let report = DetachReport {
            removed: edge,
            components,
            split,
        };
        Ok((next, report))
    }

    /// Opens or closes a gripper. Opening a linked gripper releases the link.
    pub fn set_gripper(
        &self,
        port: &PortRef,
        state: GripperState,
    ) -> Result<(Self, Option<DetachReport>), GraphError> {
        let p = self.port(port)?;
        if p.kind != PortKind::Gripper {
            return Err(GraphError::NotAGripper(port.clone()));
        }
        match (state, &p.link) {
            (GripperState::Open, Some(other)) => {
                let (next, report) = self.detach(port, &other.clone())?;
                Ok((next, Some(report)))
            }
            (GripperState::Closed, Some(_)) => Ok((self.clone(), None)),
            (_, None) => {
                let mut next = self.clone();
                next.port_mut(port)?.state = Some(state);
                Ok((next, None))
            }
        }
    }

    /// Connected components, each sorted, in order of their first module.
    pub fn components(&self) -> Vec<Vec<ModuleId>> {
        let mut adjacency: BTreeMap<&ModuleId, Vec<&ModuleId>> =
            self.nodes.keys().map(|k| (k, Vec::new())).collect();
        for e in &self.edges {
            adjacency.entry(&e.a.module).or_default().push(&e.b.module);
            adjacency.entry(&e.b.module).or_default().push(&e.a.module);
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for start in self.nodes.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut component = vec![start.clone()];
            let mut stack = vec![start];
            while let Some(m) = stack.pop() {
                for n in &adjacency[m] {
                    if seen.insert(*n) {
                        component.push((*n).clone());
                        stack.push(n);
                    }
                }
            }
            component.sort();
            out.push(component);
        }
        out
    }

    pub fn component_of(&self, module: &ModuleId) -> Result<Vec<ModuleId>, GraphError> {
        self.module(module)?;
        Ok(self
            .components()
            .into_iter()
            .find(|c| c.contains(module))
            .unwrap_or_default())
    }

    /// The component containing `module` as a graph of its own.
    pub fn component_graph(&self, module: &ModuleId) -> Result<Self, GraphError> {
        let members: BTreeSet<ModuleId> = self.component_of(module)?.into_iter().collect();
        Ok(ConnectionGraph {
            nodes: self
                .nodes
                .iter()
                .filter(|(k, _)| members.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|e| members.contains(&e.a.module))
                .cloned()
                .collect(),
            time: self.time,
            interface_offset: self.interface_offset,
        })
    }

    /// Joint DOF and wheel drive axes of the component containing `root`.
    pub fn total_dof(&self, root: &ModuleId) -> Result<DofCount, GraphError> {
        let mut count = DofCount {
            joints: 0,
            drive_axes: 0,
        };
        for id in self.component_of(root)? {
            let node = &self.nodes[&id];
            count.joints += node.dof();
            count.drive_axes += node.drive_axes;
        }
        Ok(count)
    }

    /// Checks monogamy, gender rules, gripper states and link symmetry.
    pub fn check_invariants(&self) -> Result<(), GraphError> {
        let breach = |m: String| Err(GraphError::InvariantBreach(m));
        let mut linked = BTreeSet::new();
        for e in &self.edges {
            if e.a.module == e.b.module {
                return breach(format!("self edge on {}", e.a.module));
            }
            let pa = self.port(&e.a)?;
            let pb = self.port(&e.b)?;
            for p in [&e.a, &e.b] {
                if !linked.insert(p.clone()) {
                    return breach(format!("{p} carries more than one edge"));
                }
            }
            let expected = match (pa.kind, pb.kind) {
                (PortKind::Gripper, PortKind::Gripper) => EdgeKind::GenderlessGrip,
                (PortKind::Fixture, PortKind::Fixture) => {
                    return breach(format!("fixture-to-fixture edge {}-{}", e.a, e.b))
                }
                _ => EdgeKind::MaleIntoFixture,
            };
            if e.kind != expected {
                return breach(format!("edge {}-{} has kind {:?}", e.a, e.b, e.kind));
            }
            if pa.link.as_ref() != Some(&e.b) || pb.link.as_ref() != Some(&e.a) {
                return breach(format!("edge {}-{} not mirrored in port links", e.a, e.b));
            }
        }
        for node in self.nodes.values() {
            for (name, port) in &node.ports {
                let here = PortRef {
                    module: node.id.clone(),
                    port: name.clone(),
                };
                match port.kind {
                    PortKind::Fixture if port.state.is_some() => {
                        return breach(format!("fixture {here} has a gripper state"))
                    }
                    PortKind::Gripper if port.state.is_none() => {
                        return breach(format!("gripper {here} has no state"))
                    }
                    _ => {}
                }
                if port.link.is_some() != linked.contains(&here) {
                    return breach(format!("{here} link disagrees with edge set"));
                }
                if port.link.is_some()
                    && port.kind == PortKind::Gripper
                    && port.state != Some(GripperState::Closed)
                {
                    return breach(format!("linked gripper {here} is open"));
                }
            }
        }
        Ok(())
    }

    fn all_paths(&self, root: &PortRef, tip: &PortRef) -> Result<Vec<Vec<Hop>>, GraphError> {
        self.port(root)?;
        self.port(tip)?;
        let mut paths = Vec::new();
        if root == tip {
            paths.push(Vec::new());
            return Ok(paths);
        }
        let mut visited = BTreeSet::from([root.module.clone()]);
        let mut hops = Vec::new();
        self.walk(root, tip, true, true, &mut visited, &mut hops, &mut paths);
        Ok(paths)
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(
        &self,
        at: &PortRef,
        tip: &PortRef,
        may_link: bool,
        may_cross: bool,
        visited: &mut BTreeSet<ModuleId>,
        hops: &mut Vec<Hop>,
        paths: &mut Vec<Vec<Hop>>,
    ) {
        if may_link {
            if let Some(peer) = &self.nodes[&at.module].ports[&at.port].link {
                if !visited.contains(&peer.module) {
                    hops.push(Hop::Link {
                        from: at.clone(),
                        to: peer.clone(),
                    });
                    if peer == tip {
                        paths.push(hops.clone());
                    } else {
                        visited.insert(peer.module.clone());
                        self.walk(peer, tip, false, true, visited, hops, paths);
                        visited.remove(&peer.module);
                    }
                    hops.pop();
                }
            }
        }
        if may_cross {
            let node = &self.nodes[&at.module];
            for name in node.ports.keys().filter(|n| **n != at.port) {
                let next = PortRef {
                    module: at.module.clone(),
                    port: name.clone(),
                };
                hops.push(Hop::Internal {
                    module: at.module.clone(),
                    from: at.port.clone(),
                    to: name.clone(),
                });
                if &next == tip {
                    paths.push(hops.clone());
                } else {
                    self.walk(&next, tip, true, false, visited, hops, paths);
                }
                hops.pop();
            }
        }
    }

    /// Serial chain from `root` to `tip`, expressed in the root port's inward
    /// frame and ending at the tip port's outward frame.
    ///
    /// Limbs crossed base to tool contribute their joints forward, tool to
    /// base in reverse. Rigid modules contribute a fixed transform; wheels
    /// also report their drive axes.
    pub fn extract_chain(&self, root: &PortRef, tip: &PortRef) -> Result<ExtractedChain, GraphError> {
        let paths = self.all_paths(root, tip)?;
        let path = match paths.len() {
            0 => {
                return Err(GraphError::NoPath {
                    from: root.clone(),
                    to: tip.clone(),
                })
            }
            1 => &paths[0],
            count => {
                return Err(GraphError::AmbiguousPath {
                    from: root.clone(),
                    to: tip.clone(),
                    count,
                })
            }
        };
        let flip = gripper_flip();
        let mut chain = KinematicChain::empty();
        let mut modules = vec![root.module.clone()];
        if let Some(Hop::Link { .. }) = path.first() {
            chain = chain.append(&KinematicChain::empty(), &flip);
        }
        for hop in path {
            match hop {
                Hop::Link { to, .. } => {
                    chain = chain.append(&KinematicChain::empty(), &self.interface_offset);
                    modules.push(to.module.clone());
                }
                Hop::Internal { module, from, to } => {
                    let node = &self.nodes[module];
                    let segment = match (&node.chain, from.as_str(), to.as_str()) {
                        (Some(limb), "base", "tool") => limb.clone(),
                        (Some(limb), "tool", "base") => limb.reversed(),
                        (Some(_), _, _) => {
                            return Err(GraphError::InvariantBreach(format!(
                                "limb {module} has unexpected ports {from}/{to}"
                            )))
                        }
                        (None, _, _) => {
                            let out_from = node.ports[from].mount;
                            let out_to = node.ports[to].mount;
                            let mut rigid = KinematicChain::empty();
                            rigid.tool_offset = flip * out_from.inverse() * out_to;
                            rigid
                        }
                    };
                    chain = chain.append(&segment, &Isometry3::identity());
                }
            }
        }
        if let Some(Hop::Link { .. }) = path.last() {
            chain = chain.append(&KinematicChain::empty(), &flip);
        }
        let drive_axes = modules
            .iter()
            .filter_map(|m| {
                let node = &self.nodes[m];
                (node.drive_axes > 0).then(|| (m.clone(), node.drive_axes))
            })
            .collect();
        Ok(ExtractedChain {
            chain,
            modules,
            drive_axes,
        })
    }

    /// Deterministic, canonically ordered JSON document of the graph.
    pub fn to_canonical_json(&self) -> String {
        #[derive(Serialize)]
        struct PortDoc<'a> {
            id: &'a str,
            kind: PortKind,
            #[serde(skip_serializing_if = "Option::is_none")]
            state: Option<GripperState>,
            link: Option<&'a PortRef>,
        }
        #[derive(Serialize)]
        struct ModuleDoc<'a> {
            id: &'a ModuleId,
            kind: ModuleKind,
            dof: usize,
            drive_axes: u32,
            ports: Vec<PortDoc<'a>>,
        }
        #[derive(Serialize)]
        struct GraphDoc<'a> {
            time: f64,
            modules: Vec<ModuleDoc<'a>>,
            edges: Vec<&'a Edge>,
        }
        let doc = GraphDoc {
            time: self.time,
            modules: self
                .nodes
                .values()
                .map(|n| ModuleDoc {
                    id: &n.id,
                    kind: n.kind,
                    dof: n.dof(),
                    drive_axes: n.drive_axes,
                    ports: n
                        .ports
                        .values()
                        .map(|p| PortDoc {
                            id: &p.port_id,
                            kind: p.kind,
                            state: p.state,
                            link: p.link.as_ref(),
                        })
                        .collect(),
                })
                .collect(),
            edges: self.edges.iter().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph document serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, kind: ModuleKind) -> ModuleNode {
        ModuleNode::new(id, kind, &LimbGeometry::default(), &ModuleGeometry::default())
    }

    fn graph(modules: &[(&str, ModuleKind)]) -> ConnectionGraph {
        modules
            .iter()
            .fold(ConnectionGraph::new(), |g, (id, kind)| {
                g.add_module(node(id, *kind)).unwrap()
            })
    }

    fn p(s: &str) -> PortRef {
        s.parse().unwrap()
    }

    #[test]
    fn port_refs_parse() {
        assert_eq!(p("limb1.tool"), PortRef::new("limb1", "tool"));
        assert!("limb1".parse::<PortRef>().is_err());
        assert!(".tool".parse::<PortRef>().is_err());
        assert_eq!(p("a.b").to_string(), "a.b");
    }

    #[test]
    fn genderless_grip_between_limbs() {
        let g = graph(&[("a", ModuleKind::Limb), ("b", ModuleKind::Limb)]);
        let g = g.attach(&p("a.tool"), &p("b.tool")).unwrap();
        let e = g.edges().next().unwrap();
        assert_eq!(e.kind, EdgeKind::GenderlessGrip);
        assert_eq!(g.port(&p("a.tool")).unwrap().state, Some(GripperState::Closed));
        assert_eq!(g.port(&p("b.tool")).unwrap().state, Some(GripperState::Closed));
        g.check_invariants().unwrap();
    }

    #[test]
    fn male_into_fixture() {
        let g = graph(&[("a", ModuleKind::Limb), ("w", ModuleKind::DualWheel)]);
        let g = g.attach(&p("w.f1"), &p("a.tool")).unwrap();
        assert_eq!(g.edges().next().unwrap().kind, EdgeKind::MaleIntoFixture);
        g.check_invariants().unwrap();
    }

    #[test]
    fn attach_errors() {
        let g = graph(&[
            ("a", ModuleKind::Limb),
            ("b", ModuleKind::Limb),
            ("c", ModuleKind::Limb),
            ("w", ModuleKind::DualWheel),
        ]);
        let g = g.attach(&p("a.tool"), &p("b.tool")).unwrap();
        let err = g.attach(&p("c.tool"), &p("a.tool")).unwrap_err();
        assert_eq!(err.code(), "MONOGAMY_VIOLATION");
        assert_eq!(
            g.attach(&p("w.f0"), &p("w.f1")).unwrap_err().code(),
            "SELF_ATTACH"
        );
        let g2 = g.add_module(node("v", ModuleKind::DualWheel)).unwrap();
        assert_eq!(
            g2.attach(&p("w.f0"), &p("v.f0")).unwrap_err().code(),
            "INCOMPATIBLE_PORTS"
        );
        assert_eq!(
            g.attach(&p("a.base"), &p("a.tool")).unwrap_err(),
            GraphError::SelfAttach(ModuleId::new("a"))
        );
        assert_eq!(
            g.attach(&p("zz.tool"), &p("c.tool")).unwrap_err().code(),
            "UNKNOWN_TARGET"
        );
    }

    #[test]
    fn attach_then_detach_restores_graph() {
        let g0 = graph(&[("a", ModuleKind::Limb), ("b", ModuleKind::Limb)]);
        let g1 = g0.attach(&p("a.tool"), &p("b.tool")).unwrap();
        let (g2, report) = g1.detach(&p("b.tool"), &p("a.tool")).unwrap();
        assert_eq!(g2, g0);
        assert!(report.split);
        assert_eq!(report.components.len(), 2);
        assert!(g2.detach(&p("a.tool"), &p("b.tool")).is_err());
    }

    #[test]
    fn opening_a_linked_gripper_releases_it() {
        let g = graph(&[("a", ModuleKind::Limb), ("pal", ModuleKind::Pallet)]);
        let g = g.attach(&p("a.base"), &p("pal.p0")).unwrap();
        let (g, report) = g.set_gripper(&p("a.base"), GripperState::Open).unwrap();
        assert!(report.is_some());
        assert_eq!(g.edge_count(), 0);
        assert_eq!(
            g.set_gripper(&p("pal.p0"), GripperState::Open).unwrap_err().code(),
            "INVALID_REQUEST"
        );
        let (g, none) = g.set_gripper(&p("a.tool"), GripperState::Closed).unwrap();
        assert!(none.is_none());
        assert_eq!(g.port(&p("a.tool")).unwrap().state, Some(GripperState::Closed));
        g.check_invariants().unwrap();
    }

    #[test]
    fn dof_counts() {
        let g = graph(&[
            ("a", ModuleKind::Limb),
            ("b", ModuleKind::Limb),
            ("w", ModuleKind::DualWheel),
        ]);
        assert_eq!(g.total_dof(&ModuleId::new("a")).unwrap().joints, 4);
        let g = g.attach(&p("a.tool"), &p("b.tool")).unwrap();
        assert_eq!(g.total_dof(&ModuleId::new("b")).unwrap().joints, 8);
        let w = g.total_dof(&ModuleId::new("w")).unwrap();
        assert_eq!((w.joints, w.drive_axes), (0, 2));
        assert!(g.total_dof(&ModuleId::new("nope")).is_err());
    }

    #[test]
    fn single_limb_chain() {
        let g = graph(&[("a", ModuleKind::Limb)]);
        let ex = g.extract_chain(&p("a.base"), &p("a.tool")).unwrap();
        assert_eq!(ex.chain.dof(), 4);
        assert!(ex.chain.is_limb_layout());
        let back = g.extract_chain(&p("a.tool"), &p("a.base")).unwrap();
        assert_eq!(back.chain.joint_ids(), ["a/j4", "a/j3", "a/j2", "a/j1"]);
    }

    #[test]
    fn chain_errors() {
        let g = graph(&[("a", ModuleKind::Limb), ("b", ModuleKind::Limb)]);
        assert_eq!(
            g.extract_chain(&p("a.base"), &p("b.base")).unwrap_err().code(),
            "NO_PATH"
        );
        // A closed loop through a pallet has two routes.
        let g = g
            .add_module(node("pal", ModuleKind::Pallet))
            .unwrap()
            .attach(&p("a.base"), &p("pal.p0"))
            .unwrap()
            .attach(&p("b.base"), &p("pal.p8"))
            .unwrap()
            .attach(&p("a.tool"), &p("b.tool"))
            .unwrap();
        assert!(matches!(
            g.extract_chain(&p("a.base"), &p("b.base")),
            Err(GraphError::AmbiguousPath { count: 2, .. })
        ));
    }

    #[test]
    fn chain_through_wheel_records_drive_axes() {
        let g = graph(&[
            ("a", ModuleKind::Limb),
            ("w", ModuleKind::DualWheel),
            ("b", ModuleKind::Limb),
        ])
        .attach(&p("a.tool"), &p("w.f0"))
        .unwrap()
        .attach(&p("b.tool"), &p("w.f1"))
        .unwrap();
        let ex = g.extract_chain(&p("a.base"), &p("b.base")).unwrap();
        assert_eq!(ex.chain.dof(), 8);
        assert_eq!(ex.drive_axes, vec![(ModuleId::new("w"), 2)]);
        assert_eq!(ex.modules.len(), 3);
    }

    #[test]
    fn canonical_json_is_stable() {
        let g = graph(&[("b", ModuleKind::Limb), ("a", ModuleKind::Limb)])
            .attach(&p("b.tool"), &p("a.tool"))
            .unwrap();
        let g2 = graph(&[("a", ModuleKind::Limb), ("b", ModuleKind::Limb)])
            .attach(&p("a.tool"), &p("b.tool"))
            .unwrap();
        assert_eq!(g.to_canonical_json(), g2.to_canonical_json());
        assert!(g.to_canonical_json().contains("\"genderless_grip\""));
    }

    #[test]
    fn default_pallet_spacing_spans_a_folded_limb() {
        let s = inchworm_spacing(&LimbGeometry::default());
        assert!((s - (0.09f64 - 0.27 * 0.27).sqrt()).abs() < 1e-12);
    }
}
