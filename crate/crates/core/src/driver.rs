//! Single-writer command front end for a world, and run manifests.
//!
//! A [`Driver`] owns the world and at most one running sequence. Every
//! command is applied between ticks and recorded with the step it was
//! applied at, so a [`RunManifest`] replays the run exactly.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::InputMode;
use crate::config::{Config, ConfigError, Fleet};
use crate::graph::{DetachReport, GripperState, ModuleId, PortRef};
use crate::kinematics::TaskMask;
use crate::scenarios::{build, ScenarioKind};
use crate::sequences::{
    vehicle_bridge, Bindings, ParamValue, RunnerStatus, ScriptRegistry, SequenceError,
    SequenceEvent, SequenceFailure, SequenceRunner, SequenceScript,
};
use crate::sim::{
    telemetry_csv, ChainSelector, IkPlan, IkTarget, SimError, SimEvent, TelemetryRecord, VehicleMode,
    WorldConfig, WorldSnapshot, WorldState,
};
use crate::templates::{Template, TemplateRegistry};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorldCommand {
    Joint {
        joint_id: String,
        /// rev.
        target_rev: f64,
        #[serde(default = "default_mode")]
        mode: InputMode,
    },
    Ik {
        #[serde(flatten)]
        chain: ChainSelector,
        target: IkTarget,
        /// Position plus tool roll when absent.
        #[serde(default)]
        mask: Option<TaskMask>,
    },
    Gripper {
        port: PortRef,
        state: GripperState,
    },
    Attach {
        a: PortRef,
        b: PortRef,
    },
    Detach {
        a: PortRef,
        b: PortRef,
    },
    RunSequence {
        script: String,
        #[serde(default)]
        bindings: Bindings,
        #[serde(default)]
        params: BTreeMap<String, ParamValue>,
    },
    /// Vehicle mode change through the `vehicle_transition` script.
    SetMode {
        module: ModuleId,
        mode: VehicleMode,
    },
    /// One inchworm step through the `inchworm` script.
    Inchworm {
        from: PortRef,
        to: PortRef,
    },
    /// Base speed for every wheel of a component, m/s.
    Drive {
        module: ModuleId,
        speed: f64,
    },
    Gait {
        limb: ModuleId,
        #[serde(default)]
        cycles: Option<u64>,
    },
    StopGait,
    Query,
}

fn default_mode() -> InputMode {
    InputMode::TrapezoidalTrajectory
}

impl WorldCommand {
    /// Commands that leave the world untouched.
    pub fn is_read_only(&self) -> bool {
        matches!(self, WorldCommand::Query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum CommandOutcome {
    Applied,
    Joint { duration_s: f64 },
    Ik { plan: IkPlan },
    Detached { report: Option<DetachReport> },
    SequenceStarted { script: String },
    Snapshot { snapshot: Box<WorldSnapshot> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error("a sequence is running")]
    Busy,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

impl CommandError {
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::Busy => "BUSY",
            CommandError::Sim(e) => e.code(),
            CommandError::Sequence(e) => e.code(),
        }
    }
}

/// How a run's world is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum WorldSource {
    Scenario { scenario: ScenarioKind },
    Fleet { fleet: Fleet },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    /// World step at which the command was applied.
    pub step: u64,
    pub command: WorldCommand,
}

/// Everything needed to rerun a simulation. The simulation is deterministic,
/// so no random seed is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub config: WorldConfig,
    pub world: WorldSource,
    /// Templates beyond the built-in set.
    #[serde(default)]
    pub templates: Vec<Template>,
    /// Scripts beyond the bundled set, already resolved.
    #[serde(default)]
    pub scripts: Vec<SequenceScript>,
    pub commands: Vec<TimedCommand>,
    /// Step count at the end of the run.
    pub end_step: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TickReport {
    pub sequence_events: Vec<SequenceEvent>,
    /// Set on the tick a sequence ends.
    pub finished: Option<Result<(), SequenceError>>,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unsupported manifest format {0}")]
    Format(u32),
    #[error("command at step {step} is out of order")]
    Order { step: u64 },
    #[error(transparent)]
    Runtime(#[from] SimError),
}

pub struct Driver {
    world: WorldState,
    scripts: ScriptRegistry,
    templates: TemplateRegistry,
    runner: Option<SequenceRunner>,
    /// Events of the running sequence not yet handed out.
    emitted: usize,
    source: WorldSource,
    extra_templates: Vec<Template>,
    extra_scripts: Vec<SequenceScript>,
    log: Vec<TimedCommand>,
}

impl Driver {
    pub fn new(
        config: &WorldConfig,
        source: WorldSource,
        extra_templates: Vec<Template>,
        extra_scripts: Vec<SequenceScript>,
    ) -> Result<Self, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        config.validate().map_err(|e| invalid(&e))?;
        let mut templates = TemplateRegistry::builtin();
        for t in &extra_templates {
            templates.insert(t.clone()).map_err(|e| invalid(&e))?;
        }
        let mut scripts = ScriptRegistry::builtin();
        scripts
            .insert_all(extra_scripts.clone())
            .map_err(|e| invalid(&e))?;
        let world = match &source {
            WorldSource::Scenario { scenario } => {
                build(*scenario, config, &scripts, &templates).map_err(|e| invalid(&e))?.world
            }
            WorldSource::Fleet { fleet } => fleet.build(config, &templates)?,
        };
        Ok(Driver {
            world,
            scripts,
            templates,
            runner: None,
            emitted: 0,
            source,
            extra_templates,
            extra_scripts,
            log: Vec::new(),
        })
    }

    /// A driver for `source` with the configuration's world settings,
    /// templates and scripts.
    pub fn from_config(config: &Config, source: WorldSource) -> Result<Self, ConfigError> {
        Driver::new(&config.world(), source, config.templates.clone(), config.extra_scripts()?)
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn scripts(&self) -> &ScriptRegistry {
        &self.scripts
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn busy(&self) -> bool {
        self.runner.is_some()
    }

    pub fn commands(&self) -> &[TimedCommand] {
        &self.log
    }

    /// Default bindings of a bundled script's scenario, when the driver was
    /// built from that scenario.
    fn default_bindings(&self, script: &str) -> Option<Bindings> {
        match &self.source {
            WorldSource::Scenario { scenario } if ScenarioKind::for_script(script) == Some(*scenario) => {
                let s = build(*scenario, self.world.config(), &self.scripts, &self.templates).ok()?;
                Some(s.bindings)
            }
            _ => None,
        }
    }

    /// Applies a command before the next tick. Anything but a query is
    /// rejected with BUSY while a sequence runs.
    pub fn apply(&mut self, command: &WorldCommand) -> Result<CommandOutcome, CommandError> {
        if command.is_read_only() {
            return Ok(CommandOutcome::Snapshot {
                snapshot: Box::new(self.world.snapshot()),
            });
        }
        if self.runner.is_some() {
            return Err(CommandError::Busy);
        }
        self.log.push(TimedCommand {
            step: self.world.steps(),
            command: command.clone(),
        });
        let w = &mut self.world;
        Ok(match command {
            WorldCommand::Joint {
                joint_id,
                target_rev,
                mode,
            } => CommandOutcome::Joint {
                duration_s: w.apply_joint_command(joint_id, *target_rev, *mode)?,
            },
            WorldCommand::Ik {
                chain,
                target,
                mask,
            } => CommandOutcome::Ik {
                plan: w.apply_ik_command(chain, target, mask.clone())?,
            },
            WorldCommand::Gripper { port, state } => CommandOutcome::Detached {
                report: w.set_gripper(port, *state)?,
            },
            WorldCommand::Attach { a, b } => {
                w.attach(a, b)?;
                CommandOutcome::Applied
            }
            WorldCommand::Detach { a, b } => CommandOutcome::Detached {
                report: Some(w.detach(a, b)?),
            },
            WorldCommand::RunSequence {
                script,
                bindings,
                params,
            } => {
                let s = self.scripts.get(script)?.clone();
                let bindings = if bindings.is_empty() {
                    self.default_bindings(script).unwrap_or_default()
                } else {
                    bindings.clone()
                };
                self.start(&s, &bindings, params)?
            }
            WorldCommand::SetMode { module, mode } => {
                let bridge = vehicle_bridge(&self.world, module, &self.templates)?;
                let s = self.scripts.get("vehicle_transition")?.clone();
                let bindings = Bindings::from([("bridge".to_owned(), bridge.0)]);
                let params = BTreeMap::from([(
                    "mode".to_owned(),
                    ParamValue::Text(crate::sequences::mode_name(*mode).into()),
                )]);
                self.start(&s, &bindings, &params)?
            }
            WorldCommand::Inchworm { from, to } => {
                // Resolve the holding limb now; the script itself runs incrementally.
                let held = self
                    .world
                    .graph()
                    .port(from)
                    .map_err(SimError::from)?
                    .link
                    .clone()
                    .ok_or_else(|| SequenceError::PreconditionFailed(format!("{from} is not grasped")))?;
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
                let s = self.scripts.get("inchworm")?.clone();
                self.start(&s, &bindings, &BTreeMap::new())?
            }
            WorldCommand::Drive { module, speed } => {
                w.drive_component(module, *speed)?;
                CommandOutcome::Applied
            }
            WorldCommand::Gait { limb, cycles } => {
                w.start_gait(limb, *cycles)?;
                CommandOutcome::Applied
            }
            WorldCommand::StopGait => {
                w.stop_gait();
                CommandOutcome::Applied
            }
            WorldCommand::Query => unreachable!("handled above"),
        })
    }

    fn start(
        &mut self,
        script: &SequenceScript,
        bindings: &Bindings,
        params: &BTreeMap<String, ParamValue>,
    ) -> Result<CommandOutcome, CommandError> {
        let runner = SequenceRunner::start(&self.world, script, bindings, params, &self.templates)
            .map_err(|f| f.error)?;
        self.runner = Some(runner);
        self.emitted = 0;
        Ok(CommandOutcome::SequenceStarted {
            script: script.name.clone(),
        })
    }

    /// Advances the running sequence, then the world by one tick.
    pub fn tick(&mut self) -> Result<TickReport, SimError> {
        let mut report = TickReport::default();
        if let Some(runner) = &mut self.runner {
            let status = runner.poll(&mut self.world);
            match status {
                Ok(RunnerStatus::Running) => {
                    report.sequence_events = runner.events()[self.emitted..].to_vec();
                    self.emitted = runner.events().len();
                }
                Ok(RunnerStatus::Done) => {
                    report.sequence_events = runner.events()[self.emitted..].to_vec();
                    report.finished = Some(Ok(()));
                    self.runner = None;
                }
                Err(SequenceFailure { error, events }) => {
                    report.sequence_events = events[self.emitted.min(events.len())..].to_vec();
                    report.finished = Some(Err(error));
                    self.runner = None;
                }
            }
        }
        match self.world.step_ticks(1) {
            Ok(()) => Ok(report),
            Err(e) => {
                if let Some(mut runner) = self.runner.take() {
                    let error = SequenceError::StepFailed {
                        index: 0,
                        label: runner.script().name.clone(),
                        reason: e.to_string(),
                        cause: e.code().to_owned(),
                    };
                    runner.abort(&mut self.world, error);
                }
                Err(e)
            }
        }
    }

    /// Ticks until no sequence is running, at most `limit` ticks.
    pub fn run_until_idle(&mut self, limit: u64) -> Result<Vec<TickReport>, SimError> {
        let mut reports = Vec::new();
        for _ in 0..limit {
            if self.runner.is_none() {
                break;
            }
            let r = self.tick()?;
            if r.finished.is_some() || !r.sequence_events.is_empty() {
                reports.push(r);
            }
        }
        Ok(reports)
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            format: MANIFEST_FORMAT,
            config: *self.world.config(),
            world: self.source.clone(),
            templates: self.extra_templates.clone(),
            scripts: self.extra_scripts.clone(),
            commands: self.log.clone(),
            end_step: self.world.steps(),
        }
    }

    pub fn telemetry_csv(&self) -> String {
        telemetry_csv(self.world.telemetry())
    }

    /// Takes the telemetry recorded so far. Later CSV exports start after it.
    pub fn drain_telemetry(&mut self) -> Vec<TelemetryRecord> {
        self.world.drain_telemetry()
    }

    /// Takes the world events recorded so far.
    pub fn drain_events(&mut self) -> Vec<SimEvent> {
        self.world.drain_events()
    }
}

/// Reruns a manifest and returns the final driver. Command errors are part
/// of the recorded run and are reproduced, not reported.
pub fn replay(manifest: &RunManifest) -> Result<Driver, ReplayError> {
    if manifest.format != MANIFEST_FORMAT {
        return Err(ReplayError::Format(manifest.format));
    }
    let mut driver = Driver::new(
        &manifest.config,
        manifest.world.clone(),
        manifest.templates.clone(),
        manifest.scripts.clone(),
    )?;
    let mut last = 0;
    for tc in &manifest.commands {
        if tc.step < last || tc.step > manifest.end_step {
            return Err(ReplayError::Order { step: tc.step });
        }
        last = tc.step;
        while driver.world.steps() < tc.step {
            driver.tick()?;
        }
        let _ = driver.apply(&tc.command);
    }
    while driver.world.steps() < manifest.end_step {
        driver.tick()?;
    }
    Ok(driver)
}

/// Joint command in rad, converted to the rev used on the wire.
pub fn joint_command_rad(joint_id: &str, target_rad: f64) -> WorldCommand {
    WorldCommand::Joint {
        joint_id: joint_id.to_owned(),
        target_rev: target_rad / TAU,
        mode: InputMode::TrapezoidalTrajectory,
    }
}
