use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use limbkit::config::{Config, ConfigError, Fleet};
use limbkit::driver::{replay, Driver, ReplayError, RunManifest, WorldCommand, WorldSource};
use limbkit::scenarios::ScenarioKind;
use limbkit::sequences::{Bindings, ParamValue, StepStatus};
use limbkit::sim::SimError;
use limbkit_teleop::plots::{export_plots, read_telemetry, PlotError};
use limbkit_teleop::service::{Service, ServiceError};

const OK: u8 = 0;
const FAILED: u8 = 1;
const CONFIG_ERROR: u8 = 2;
const INVARIANT_BREACH: u8 = 3;

/// Simulator and teleoperation service for reconfigurable limb and wheel modules.
#[derive(Parser)]
#[command(name = "limbkit", version)]
struct Cli {
    /// Configuration file. LIMBKIT_BIND and LIMBKIT_TOKEN override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the WebSocket teleoperation protocol.
    Serve {
        /// Listen address, e.g. 127.0.0.1:8765.
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        token: Option<String>,
        /// Built-in scenario to start from instead of the configured fleet.
        #[arg(long, conflicts_with = "fleet")]
        scenario: Option<String>,
        /// Fleet file to start from.
        #[arg(long)]
        fleet: Option<PathBuf>,
        /// Write the run manifest here on shutdown.
        #[arg(long)]
        manifest_out: Option<PathBuf>,
    },
    /// Run one script to completion and write telemetry plus its manifest.
    RunSequence {
        name: String,
        /// Scenario to run on; defaults to the script's own.
        #[arg(long)]
        scenario: Option<String>,
        /// Role binding, role=module or role=module.port.
        #[arg(long = "role", value_parser = key_value)]
        roles: Vec<(String, String)>,
        /// Parameter override, name=value.
        #[arg(long = "param", value_parser = key_value)]
        params: Vec<(String, String)>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Simulated time limit, s.
        #[arg(long, default_value_t = 600.0)]
        max_time: f64,
    },
    /// Rerun a manifest and compare telemetry with the recorded CSV.
    Replay {
        manifest: PathBuf,
        /// Recorded telemetry. Defaults to the CSV written beside the manifest.
        #[arg(long)]
        expect: Option<PathBuf>,
        /// Write the replayed telemetry here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot a telemetry CSV as SVG charts, one per recorded quantity.
    ExportPlots {
        telemetry: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Build a fleet file and check it against its expected templates.
    Validate { fleet: PathBuf },
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected name=value, got {s:?}"))
}

fn scenario_kind(name: &str) -> Result<ScenarioKind, ConfigError> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| ConfigError::Invalid(format!("unknown scenario {name:?}")))
}

fn load_config(path: Option<&Path>) -> Result<Config, ConfigError> {
    let mut config = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    Ok(config)
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("limbkit: {message}");
    ExitCode::from(code)
}

fn sim_exit(e: &SimError) -> u8 {
    if matches!(e, SimError::InvariantBreach(_)) {
        INVARIANT_BREACH
    } else {
        FAILED
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    match cli.command {
        Command::Serve {
            bind,
            token,
            scenario,
            fleet,
            manifest_out,
        } => serve(config, bind, token, scenario, fleet, manifest_out),
        Command::RunSequence {
            name,
            scenario,
            roles,
            params,
            out,
            max_time,
        } => run_sequence(&config, &name, scenario, roles, params, &out, max_time),
        Command::Replay {
            manifest,
            expect,
            out,
        } => replay_manifest(&manifest, expect, out),
        Command::ExportPlots { telemetry, out } => {
            let written = read_telemetry(&telemetry).and_then(|r| export_plots(&r, &out));
            match written {
                Ok(paths) => {
                    for p in paths {
                        println!("{}", p.display());
                    }
                    ExitCode::from(OK)
                }
                Err(e @ PlotError::Input { .. }) => fail(CONFIG_ERROR, e),
                Err(e) => fail(FAILED, e),
            }
        }
        Command::Validate { fleet } => validate(&config, &fleet),
    }
}

fn world_source(
    config: &Config,
    scenario: Option<String>,
    fleet: Option<PathBuf>,
) -> Result<WorldSource, ConfigError> {
    if let Some(name) = scenario {
        return Ok(WorldSource::Scenario {
            scenario: scenario_kind(&name)?,
        });
    }
    match fleet.or_else(|| config.fleet.clone()) {
        Some(path) => Ok(WorldSource::Fleet {
            fleet: Fleet::load(&path)?,
        }),
        None => Ok(WorldSource::Scenario {
            scenario: ScenarioKind::Handshake,
        }),
    }
}

fn serve(
    mut config: Config,
    bind: Option<String>,
    token: Option<String>,
    scenario: Option<String>,
    fleet: Option<PathBuf>,
    manifest_out: Option<PathBuf>,
) -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Some(b) = bind {
        config.service.bind = b;
    }
    if token.is_some() {
        config.service.token = token;
    }
    let source = match world_source(&config, scenario, fleet) {
        Ok(s) => s,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    runtime.block_on(async move {
        let mut service = match Service::start(&config, source).await {
            Ok(s) => s,
            Err(e) => return fail(CONFIG_ERROR, e),
        };
        println!("{}", service.url());
        let breach = tokio::select! {
            _ = tokio::signal::ctrl_c() => None,
            b = service.breached() => Some(b),
        };
        let result = service.shutdown().await;
        if let (Some(path), Ok(manifest)) = (&manifest_out, &result) {
            if let Err(e) = write_json(path, manifest) {
                return fail(FAILED, e);
            }
        }
        match (breach, result) {
            (None, Ok(_)) => ExitCode::from(OK),
            (Some(b), _) => fail(INVARIANT_BREACH, format!("{}: {}", b.code, b.message)),
            (None, Err(e @ ServiceError::Breach(_))) => fail(INVARIANT_BREACH, e),
            (None, Err(e)) => fail(FAILED, e),
        }
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n")
}

fn param_value(text: &str) -> ParamValue {
    text.parse::<f64>()
        .map(ParamValue::Number)
        .unwrap_or_else(|_| ParamValue::Text(text.to_owned()))
}

fn run_sequence(
    config: &Config,
    name: &str,
    scenario: Option<String>,
    roles: Vec<(String, String)>,
    params: Vec<(String, String)>,
    out: &Path,
    max_time: f64,
) -> ExitCode {
    let kind = match scenario.map(|s| scenario_kind(&s)) {
        Some(Ok(k)) => k,
        Some(Err(e)) => return fail(CONFIG_ERROR, e),
        None => match ScenarioKind::for_script(name) {
            Some(k) => k,
            None => {
                return fail(
                    CONFIG_ERROR,
                    format!("script {name} has no default scenario; pass --scenario"),
                )
            }
        },
    };
    let mut driver = match Driver::from_config(config, WorldSource::Scenario { scenario: kind }) {
        Ok(d) => d,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let command = WorldCommand::RunSequence {
        script: name.to_owned(),
        bindings: roles.into_iter().collect::<Bindings>(),
        params: params
            .iter()
            .map(|(k, v)| (k.clone(), param_value(v)))
            .collect::<BTreeMap<_, _>>(),
    };
    if let Err(e) = driver.apply(&command) {
        let code = if e.code() == "UNKNOWN_TARGET" || e.code() == "INVALID_REQUEST" {
            CONFIG_ERROR
        } else {
            FAILED
        };
        return fail(code, format!("{}: {e}", e.code()));
    }
    let limit = (max_time / config.sim.tick).ceil() as u64;
    let reports = match driver.run_until_idle(limit) {
        Ok(r) => r,
        Err(e) => return fail(sim_exit(&e), format!("{}: {e}", e.code())),
    };
    let mut finished = None;
    for r in reports {
        for e in r.sequence_events {
            let status = match e.status {
                StepStatus::Started => "start",
                StepStatus::Completed => "done ",
                StepStatus::Failed => "FAIL ",
                StepStatus::Finished => "end  ",
            };
            println!("{:>9.3} s  {status} {}", e.time_s, e.label);
        }
        if r.finished.is_some() {
            finished = r.finished;
        }
    }
    let csv = out.join(format!("{name}.csv"));
    let manifest = out.join(format!("{name}.manifest.json"));
    let written = std::fs::create_dir_all(out)
        .and_then(|_| std::fs::write(&csv, driver.telemetry_csv()))
        .and_then(|_| write_json(&manifest, &driver.manifest()));
    if let Err(e) = written {
        return fail(FAILED, e);
    }
    println!("telemetry {}", csv.display());
    println!("manifest  {}", manifest.display());
    match finished {
        Some(Ok(())) => ExitCode::from(OK),
        Some(Err(e)) => fail(FAILED, format!("{}: {e}", e.code())),
        None => fail(FAILED, format!("{name} still running after {max_time} s")),
    }
}

/// `run.manifest.json` sits beside `run.csv`.
fn sibling_csv(manifest: &Path) -> PathBuf {
    let name = manifest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".manifest.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    manifest.with_file_name(format!("{stem}.csv"))
}

fn replay_manifest(path: &Path, expect: Option<PathBuf>, out: Option<PathBuf>) -> ExitCode {
    let manifest: RunManifest = match std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(m) => m,
        Err(e) => return fail(CONFIG_ERROR, format!("{}: {e}", path.display())),
    };
    let driver = match replay(&manifest) {
        Ok(d) => d,
        Err(ReplayError::Runtime(e)) => return fail(sim_exit(&e), e),
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let csv = driver.telemetry_csv();
    if let Some(out) = out {
        if let Err(e) = std::fs::write(&out, &csv) {
            return fail(FAILED, e);
        }
    }
    let expect = expect.unwrap_or_else(|| sibling_csv(path));
    match std::fs::read(&expect) {
        Ok(recorded) if recorded == csv.as_bytes() => {
            println!("identical: {} bytes match {}", csv.len(), expect.display());
            ExitCode::from(OK)
        }
        Ok(recorded) => fail(
            INVARIANT_BREACH,
            format!(
                "replay differs from {} ({} vs {} bytes)",
                expect.display(),
                csv.len(),
                recorded.len()
            ),
        ),
        Err(e) => fail(CONFIG_ERROR, format!("{}: {e}", expect.display())),
    }
}

fn validate(config: &Config, path: &Path) -> ExitCode {
    let report =
        Fleet::load(path).and_then(|f| f.validate(&config.world(), &config.template_registry()?));
    match report {
        Ok(report) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("serializable")
            );
            if report.ok {
                ExitCode::from(OK)
            } else {
                fail(
                    CONFIG_ERROR,
                    format!("fleet {} does not match its expectations", report.fleet),
                )
            }
        }
        Err(e) => fail(CONFIG_ERROR, e),
    }
}
