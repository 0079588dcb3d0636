//! The `crowdlab` command line.
//!
//! [`execute`] runs one command against explicit output sinks and returns the
//! exit code, so it can be driven in-process by tests.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use crowdlab_core::engine::RunOptions;
use crowdlab_core::platform::sim::{PopulationProfile, SIM_ADAPTER_ID};
use crowdlab_core::simulation::workloads;
use crowdlab_core::worker::Toggles;
use crowdlab_core::workflow::ViolationCode;

use crate::api::{self, AppState};
use crate::error::ApiError;
use crate::files;
use crate::ops::{self, Services, SimulateRequest};

pub const DEFAULT_STORE: &str = "crowdlab-data/store.log";

#[derive(Debug, Parser)]
#[command(name = "crowdlab", version, about = "Controlled crowdsourcing experiments")]
pub struct Cli {
    /// Store log file.
    #[arg(long, global = true, env = "CROWDLAB_STORE", default_value = DEFAULT_STORE)]
    pub store: PathBuf,
    /// Tracing filter, e.g. `info` or `crowdlab=debug`.
    #[arg(long, global = true, env = "CROWDLAB_LOG", default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a workflow file (and optionally a unit file against it).
    Validate {
        workflow: PathBuf,
        #[arg(long)]
        units: Option<PathBuf>,
    },
    /// Start a run.
    Run(RunArgs),
    /// Run against the simulated crowd (same as `run --adapter sim`).
    Simulate(RunArgs),
    /// Tick the scheduler and step a run on an offline adapter.
    Advance { run_id: String },
    /// Run status with per-block progress.
    Status { run_id: String },
    /// Print the bias report of a run.
    Report {
        run_id: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "CROWDLAB_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory `unitsRef` paths resolve against.
        #[arg(long, default_value = ".")]
        data_dir: PathBuf,
        /// Seconds between scheduler ticks of live runs.
        #[arg(long, env = "CROWDLAB_TICK_SECS", default_value_t = 5)]
        tick_secs: u64,
        /// Base URL task pages use to reach the eligibility hook.
        #[arg(long, env = "CROWDLAB_HOOK_URL")]
        hook_url: Option<String>,
    },
    /// Write a run and everything it references to an archive file.
    Export { run_id: String, archive: PathBuf },
    /// Load a run archive into the store.
    Import { archive: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub workflow: PathBuf,
    /// Unit file (JSON array or ndjson). The bundled screening corpus is used
    /// when omitted.
    #[arg(long)]
    pub units: Option<PathBuf>,
    #[arg(long, default_value = SIM_ADAPTER_ID)]
    pub adapter: String,
    /// Simulator population profile; the calibrated one by default.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_eligibility: bool,
    #[arg(long)]
    pub no_quotas: bool,
    #[arg(long)]
    pub no_schedule: bool,
    /// Simulated time budget.
    #[arg(long)]
    pub horizon_hours: Option<u32>,
    /// Directory the file adapter writes tasks to.
    #[arg(long)]
    pub tasks_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
}

impl RunArgs {
    fn toggles(&self) -> Toggles {
        Toggles {
            eligibility: !self.no_eligibility,
            quotas: !self.no_quotas,
            schedule: !self.no_schedule,
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    let code = execute(cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    ExitCode::from(code)
}

/// Runs one command. Results go to `out`; errors go to `err` as one JSON
/// line each.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}", e.json_line());
            1
        }
    }
}

fn json(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<(), ApiError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ApiError::internal(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| ApiError::internal(e.to_string()))
}

fn open(store: &Path, tasks_dir: Option<&Path>, hook_url: &str) -> Result<Services, ApiError> {
    let tasks = tasks_dir.map(Path::to_path_buf).unwrap_or_else(|| ops::default_tasks_dir(Some(store)));
    Services::open(Some(store), &tasks, hook_url)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<u8, ApiError> {
    let store = cli.store;
    match cli.command {
        Command::Validate { workflow, units } => validate(&workflow, units.as_deref(), out),
        Command::Run(args) => run(&store, args, out),
        Command::Simulate(mut args) => {
            args.adapter = SIM_ADAPTER_ID.to_string();
            run(&store, args, out)
        }
        Command::Advance { run_id } => {
            let services = open(&store, None, "")?;
            let commands = services.engine.tick(&run_id)?;
            let outcome = services.engine.run_until_idle(&run_id)?;
            json(out, &serde_json::json!({ "commands": commands, "outcome": outcome }))?;
            Ok(0)
        }
        Command::Status { run_id } => {
            let services = open(&store, None, "")?;
            let run = services.engine.run_state(&run_id)?;
            let blocks = services.engine.progress(&run_id)?;
            json(out, &serde_json::json!({ "run": run, "blocks": blocks }))?;
            Ok(0)
        }
        Command::Report { run_id, format } => {
            let store = crowdlab_core::store::Store::open(&store)?;
            let report = ops::report(&store, &run_id, None)?;
            match format {
                Format::Json => json(out, &report)?,
                Format::Text => write!(out, "{}", crowdlab_core::analysis::render_text(&report))
                    .map_err(|e| ApiError::internal(e.to_string()))?,
            }
            Ok(0)
        }
        Command::Serve {
            port,
            host,
            data_dir,
            tick_secs,
            hook_url,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| ApiError::bad_request(format!("bad listen address: {e}")))?;
            let hook_url = hook_url.unwrap_or_else(|| format!("http://{addr}"));
            let services = open(&store, None, &hook_url)?;
            serve(services, data_dir, addr, Duration::from_secs(tick_secs.max(1)))?;
            Ok(0)
        }
        Command::Export { run_id, archive } => {
            let store = crowdlab_core::store::Store::open(&store)?;
            let a = store.export_run(&run_id)?;
            files::write_archive(&archive, &a)?;
            writeln!(out, "{}", archive.display()).map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(0)
        }
        Command::Import { archive } => {
            let a = files::load_archive(&archive)?;
            let store = crowdlab_core::store::Store::open(&store)?;
            let run_id = store.import_run(a)?;
            writeln!(out, "{run_id}").map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(0)
        }
    }
}

/// Prints one violation message per line; exit 1 if there are any.
fn validate(workflow: &Path, units: Option<&Path>, out: &mut dyn Write) -> Result<u8, ApiError> {
    let def = files::load_workflow(workflow)?;
    let units = units.map(files::load_units).transpose()?;
    let violations = ops::validate_definition(&def, units.as_deref());
    if violations.is_empty() {
        writeln!(out, "ok").map_err(|e| ApiError::internal(e.to_string()))?;
        return Ok(0);
    }
    for v in &violations {
        writeln!(out, "{}", v.message).map_err(|e| ApiError::internal(e.to_string()))?;
    }
    let err = ApiError::invalid_workflow(&violations);
    if violations.iter().any(|v| v.code == ViolationCode::Cycle) {
        return Err(err.with_code("cycle"));
    }
    Err(err)
}

fn run(store_path: &Path, args: RunArgs, out: &mut dyn Write) -> Result<u8, ApiError> {
    let def = files::load_workflow(&args.workflow)?;
    let units = match &args.units {
        Some(p) => files::load_units(p)?,
        None => workloads::study_units(),
    };
    let toggles = args.toggles();
    if args.adapter == SIM_ADAPTER_ID {
        if args.run_id.is_some() {
            return Err(ApiError::bad_request("simulated runs are named after their seed"));
        }
        let profile = match &args.profile {
            Some(p) => files::load_profile(p)?,
            None => PopulationProfile::calibrated(),
        };
        let store = Arc::new(crowdlab_core::store::Store::open(store_path)?);
        let summary = ops::simulate(
            &store,
            SimulateRequest {
                def,
                units,
                profile,
                seed: args.seed,
                toggles,
                horizon_hours: args.horizon_hours,
            },
        )?;
        json(out, &summary)?;
        return Ok(0);
    }
    let services = open(store_path, args.tasks_dir.as_deref(), "")?;
    let run = ops::start(
        &services,
        &def,
        &units,
        RunOptions {
            run_id: args.run_id,
            seed: args.seed,
            toggles,
            adapter: Some(args.adapter),
        },
    )?;
    json(out, &run)?;
    Ok(0)
}

fn serve(services: Services, data_dir: PathBuf, addr: SocketAddr, tick: Duration) -> Result<(), ApiError> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| ApiError::internal(e.to_string()))?;
    rt.block_on(async move {
        let engine = services.engine.clone();
        let app = api::router(AppState { services, data_dir });
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ApiError::internal(format!("bind {addr}: {e}")))?;
        tracing::info!(%addr, "listening");
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(tick);
            loop {
                interval.tick().await;
                let engine = engine.clone();
                let _ = tokio::task::spawn_blocking(move || tick_live_runs(&engine)).await;
            }
        });
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ApiError::internal(e.to_string()))
    })
}

/// Scheduler tick plus ingestion for every live run not driven by the
/// simulator.
pub fn tick_live_runs(engine: &crowdlab_core::engine::Engine) {
    use crowdlab_core::engine::RunStatus;
    let runs = match engine.store().read(|s| {
        s.runs()
            .filter(|r| matches!(r.status, RunStatus::Running | RunStatus::Paused))
            .filter(|r| r.adapter.as_deref() != Some(SIM_ADAPTER_ID))
            .map(|r| r.run_id.clone())
            .collect::<Vec<_>>()
    }) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(error = %e, "store read failed");
            return;
        }
    };
    for id in runs {
        if let Err(e) = engine.tick(&id).and_then(|_| engine.run_until_idle(&id)) {
            tracing::warn!(run = %id, error = %e, "tick failed");
        }
    }
}
