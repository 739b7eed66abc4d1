//! Configuration file and fleet descriptions.
//!
//! Both are TOML. Every section of the configuration file is optional; a
//! missing section takes its defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::ActuatorParams;
use crate::graph::{ConnectionGraph, ModuleGeometry, ModuleId, ModuleKind, ModuleNode, PortRef};
use crate::kinematics::LimbGeometry;
use crate::sequences::{read_script_dir, ScriptRegistry, SequenceScript};
use crate::sim::{SimConfig, VehicleMode, WorldConfig, WorldState};
use crate::templates::{validate_configuration, Template, TemplateRegistry};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        "CONFIG_ERROR"
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Clients must present this token when set.
    pub token: Option<String>,
    /// Telemetry frames per second pushed to each client.
    pub telemetry_hz: f64,
    /// World snapshots per second pushed to each client.
    pub snapshot_hz: f64,
    /// Telemetry frames buffered per client before the oldest are dropped.
    pub client_buffer: usize,
    /// Commands buffered ahead of the simulation loop.
    pub queue_depth: usize,
    /// Simulated seconds per wall-clock second. Zero runs as fast as possible.
    pub realtime_factor: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8765".into(),
            token: None,
            telemetry_hz: 50.0,
            snapshot_hz: 2.0,
            client_buffer: 64,
            queue_depth: 256,
            realtime_factor: 1.0,
        }
    }
}

/// Contents of a configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub service: ServiceConfig,
    pub sim: SimConfig,
    pub actuator: ActuatorParams,
    pub limb: LimbGeometry,
    pub modules: ModuleGeometry,
    /// Extra script files, relative to the configuration file.
    pub scripts_dir: Option<PathBuf>,
    /// Fleet the service starts with, relative to the configuration file.
    pub fleet: Option<PathBuf>,
    /// Templates added to the built-in ones.
    #[serde(rename = "template")]
    pub templates: Vec<Template>,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Config = parse(Path::new("<config>"), text)?;
        config.world().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    /// Loads a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut config: Config = parse(path, &read(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.scripts_dir, &mut config.fleet].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        config.world().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    /// Applies `LIMBKIT_BIND` and `LIMBKIT_TOKEN` from `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(bind) = var("LIMBKIT_BIND") {
            self.service.bind = bind;
        }
        if let Some(token) = var("LIMBKIT_TOKEN") {
            self.service.token = (!token.is_empty()).then_some(token);
        }
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            sim: self.sim,
            actuator: self.actuator,
            limb: self.limb,
            modules: self.modules,
        }
    }

    pub fn template_registry(&self) -> Result<TemplateRegistry, ConfigError> {
        let mut reg = TemplateRegistry::builtin();
        for t in &self.templates {
            reg.insert(t.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn script_registry(&self) -> Result<ScriptRegistry, ConfigError> {
        let mut reg = ScriptRegistry::builtin();
        reg.insert_all(self.extra_scripts()?)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(reg)
    }

    /// Scripts from `scripts_dir`, if set.
    pub fn extra_scripts(&self) -> Result<Vec<SequenceScript>, ConfigError> {
        match &self.scripts_dir {
            Some(dir) => read_script_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetInclude {
    pub template: String,
    /// Prepended to every module label of the template.
    #[serde(default)]
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetModule {
    pub id: String,
    pub kind: ModuleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetPose {
    pub module: String,
    /// m.
    pub position: [f64; 3],
    /// Roll, pitch, yaw, rad.
    #[serde(default)]
    pub rpy: [f64; 3],
}

/// A set of modules, their links and initial state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fleet {
    pub name: String,
    #[serde(rename = "include")]
    pub includes: Vec<FleetInclude>,
    #[serde(rename = "module")]
    pub modules: Vec<FleetModule>,
    pub edges: Vec<[String; 2]>,
    /// Initial joint angles by joint id, rad.
    pub joints: BTreeMap<String, f64>,
    /// World poses of component anchors.
    #[serde(rename = "pose")]
    pub poses: Vec<FleetPose>,
    /// Template each listed module's component must match.
    pub expect: BTreeMap<String, String>,
    pub vehicle_modes: BTreeMap<String, VehicleMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub modules: Vec<ModuleId>,
    /// Templates this component is an instance of.
    pub recognized: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationReport {
    pub module: String,
    pub template: String,
    pub valid: bool,
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub fleet: String,
    pub components: Vec<ComponentReport>,
    pub expectations: Vec<ExpectationReport>,
    pub ok: bool,
}

impl Fleet {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        parse(Path::new("<fleet>"), text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        parse(path, &read(path)?)
    }

    pub fn graph(
        &self,
        config: &WorldConfig,
        templates: &TemplateRegistry,
    ) -> Result<ConnectionGraph, ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(format!("fleet {}: {e}", self.name));
        let mut g = ConnectionGraph::new().with_interface_gap(config.modules.interface_gap);
        for inc in &self.includes {
            let sub = templates
                .get(&inc.template)
                .and_then(|t| t.instantiate(&inc.prefix, &config.limb, &config.modules))
                .map_err(|e| bad(&e))?;
            for node in sub.modules() {
                let fresh = ModuleNode::new(node.id.as_str(), node.kind, &config.limb, &config.modules);
                g = g.add_module(fresh).map_err(|e| bad(&e))?;
            }
            for e in sub.edges() {
                g = g.attach(&e.a, &e.b).map_err(|e| bad(&e))?;
            }
        }
        for m in &self.modules {
            let node = ModuleNode::new(&m.id, m.kind, &config.limb, &config.modules);
            g = g.add_module(node).map_err(|e| bad(&e))?;
        }
        for [a, b] in &self.edges {
            let a: PortRef = a.parse().map_err(|e| bad(&e))?;
            let b: PortRef = b.parse().map_err(|e| bad(&e))?;
            g = g.attach(&a, &b).map_err(|e| bad(&e))?;
        }
        Ok(g)
    }

    /// Builds the world: graph, anchor poses, joint angles, vehicle modes.
    pub fn build(
        &self,
        config: &WorldConfig,
        templates: &TemplateRegistry,
    ) -> Result<WorldState, ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(format!("fleet {}: {e}", self.name));
        let g = self.graph(config, templates)?;
        let mut world = WorldState::new(*config, g).map_err(|e| bad(&e))?;
        world.set_joint_angles(&self.joints).map_err(|e| bad(&e))?;
        for p in &self.poses {
            let id = ModuleId::new(p.module.clone());
            if world.anchor_of(&id).map_err(|e| bad(&e))? != &id {
                return Err(bad(&format!("{} is not the anchor of its component", p.module)));
            }
            let [r, pi, y] = p.rpy;
            let pose = Isometry3::from_parts(
                Translation3::new(p.position[0], p.position[1], p.position[2]),
                UnitQuaternion::from_euler_angles(r, pi, y),
            );
            world.set_module_pose(&id, pose).map_err(|e| bad(&e))?;
        }
        for (limb, mode) in &self.vehicle_modes {
            world
                .set_vehicle_mode(&ModuleId::new(limb.clone()), *mode)
                .map_err(|e| bad(&e))?;
        }
        Ok(world)
    }

    /// Builds the fleet and checks its components against the templates.
    pub fn validate(
        &self,
        config: &WorldConfig,
        templates: &TemplateRegistry,
    ) -> Result<FleetReport, ConfigError> {
        let world = self.build(config, templates)?;
        let g = world.graph();
        let mut components = Vec::new();
        for c in g.components() {
            let sub = g.component_graph(&c[0]).expect("component member");
            let idle_pallet = c.len() == 1
                && g.module(&c[0]).is_ok_and(|m| m.kind == ModuleKind::Pallet);
            components.push(ComponentReport {
                modules: c,
                recognized: if idle_pallet {
                    Vec::new()
                } else {
                    templates.recognize(&sub).into_iter().map(str::to_owned).collect()
                },
            });
        }
        let mut expectations = Vec::new();
        for (module, template) in &self.expect {
            let t = templates
                .get(template)
                .map_err(|e| ConfigError::Invalid(format!("fleet {}: {e}", self.name)))?;
            let sub = g
                .component_graph(&ModuleId::new(module.clone()))
                .map_err(|e| ConfigError::Invalid(format!("fleet {}: {e}", self.name)))?;
            let r = validate_configuration(&sub, t);
            expectations.push(ExpectationReport {
                module: module.clone(),
                template: template.clone(),
                valid: r.valid,
                issues: r.issues,
            });
        }
        let ok = expectations.iter().all(|e| e.valid);
        Ok(FleetReport {
            fleet: self.name.clone(),
            components,
            expectations,
            ok,
        })
    }
}
