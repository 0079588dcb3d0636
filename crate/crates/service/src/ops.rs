//! Operations shared by the HTTP API and the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crowdlab_core::analysis::{build_report, BiasReport, CleanupPolicy};
use crowdlab_core::digest::content_digest;
use crowdlab_core::engine::{effective_schedule, Engine, RunOptions, RunState, RunStatus};
use crowdlab_core::platform::sim::{PopulationProfile, SimStats};
use crowdlab_core::platform::{AdapterRegistry, FileAdapter};
use crowdlab_core::simulation::{run_id_for, Simulation, SimulationConfig};
use crowdlab_core::store::{Mutation, Store};
use crowdlab_core::worker::{group_kinds, Toggles};
use crowdlab_core::workflow::{validate_units, validate_workflow, unit_schema, ViolationCode, Violation};
use crowdlab_core::{DataUnit, SystemClock, WorkflowDef};

use crate::error::ApiError;

/// Store meta key holding the group -> kind map used for crossover cohorts.
pub fn kinds_key(run_id: &str) -> String {
    format!("kinds/{run_id}")
}

/// A store plus an engine on the wall clock with the offline file adapter.
pub struct Services {
    pub store: Arc<Store>,
    pub engine: Arc<Engine>,
}

impl Services {
    pub fn open(store_path: Option<&Path>, tasks_dir: &Path, hook_base_url: &str) -> Result<Self, ApiError> {
        let store = match store_path {
            Some(p) => Store::open(p)?,
            None => Store::ephemeral(),
        };
        Self::over(Arc::new(store), tasks_dir, hook_base_url)
    }

    pub fn over(store: Arc<Store>, tasks_dir: &Path, hook_base_url: &str) -> Result<Self, ApiError> {
        let registry = AdapterRegistry::new();
        registry.register(Arc::new(FileAdapter::new(tasks_dir)));
        let config = crowdlab_core::engine::EngineConfig {
            hook_base_url: hook_base_url.to_string(),
            ..Default::default()
        };
        let engine = Engine::new(store.clone(), registry, Arc::new(SystemClock))?.with_config(config);
        Ok(Self {
            store,
            engine: Arc::new(engine),
        })
    }
}

pub fn default_tasks_dir(store_path: Option<&Path>) -> PathBuf {
    match store_path.and_then(Path::parent) {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join("tasks"),
        _ => PathBuf::from("tasks"),
    }
}

/// Structural checks only: bindings are left alone when the units are not
/// known yet.
pub fn validate_definition(def: &WorkflowDef, units: Option<&[DataUnit]>) -> Vec<Violation> {
    match units {
        Some(units) => {
            let mut v = validate_workflow(def, &unit_schema(units));
            v.extend(validate_units(def, units));
            v
        }
        None => validate_workflow(def, &Default::default())
            .into_iter()
            .filter(|v| v.code != ViolationCode::UnresolvedBinding)
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SimulateRequest {
    pub def: WorkflowDef,
    pub units: Vec<DataUnit>,
    pub profile: PopulationProfile,
    pub seed: u64,
    pub toggles: Toggles,
    pub horizon_hours: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub judgments: usize,
    pub workers: usize,
    pub returning_worker_fraction: f64,
    pub crossover_worker_fraction: f64,
    pub top_k_share: f64,
    pub discard_fraction: f64,
    pub report_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub platform: Option<SimStats>,
}

/// Runs a workflow against the simulated crowd, to the end, inside `store`.
pub fn simulate(store: &Arc<Store>, req: SimulateRequest) -> Result<RunSummary, ApiError> {
    let violations = validate_definition(&req.def, Some(&req.units));
    if !violations.is_empty() {
        return Err(ApiError::invalid_workflow(&violations));
    }
    let run_id = run_id_for(req.seed);
    if store.read(|s| s.run(&run_id).is_some())? {
        return Err(ApiError::conflict("already-exists", format!("run {run_id} already exists")));
    }
    let mut cfg = SimulationConfig::new(req.seed, req.toggles);
    if let Some(h) = req.horizon_hours {
        cfg = cfg.with_horizon(Duration::hours(h.into()));
    }
    let mut profile = req.profile;
    profile.seed = req.seed;
    let kinds = group_kinds(&req.def.groups, &profile.kinds);
    let sim = Simulation::new(store.clone(), &req.def, &req.units, &profile, cfg)?;
    let outcome = sim.run_to_end()?;
    store.commit(vec![Mutation::meta(kinds_key(&run_id), &kinds)])?;
    let mut summary = summarize(store, &run_id)?;
    summary.platform = Some(outcome.stats);
    Ok(summary)
}

/// Starts a run on a registered adapter and publishes what is ready.
pub fn start(services: &Services, def: &WorkflowDef, units: &[DataUnit], opts: RunOptions) -> Result<RunState, ApiError> {
    let run = services.engine.start_run(def, units, opts)?;
    services.engine.tick(&run.run_id)?;
    services.engine.run_until_idle(&run.run_id)?;
    Ok(services.engine.run_state(&run.run_id)?)
}

pub fn report(store: &Store, run_id: &str, cleanup: Option<Vec<CleanupPolicy>>) -> Result<BiasReport, ApiError> {
    let (run, def, log, kinds) = store.read(|s| {
        let run = s.run(run_id).cloned();
        let def = run
            .as_ref()
            .and_then(|r| s.workflow(&r.workflow_id, r.workflow_version).cloned());
        let kinds: Option<BTreeMap<String, String>> = s.meta(&kinds_key(run_id));
        (run, def, s.judgments(run_id).to_vec(), kinds)
    })?;
    let run = run.ok_or_else(|| ApiError::not_found(format!("run {run_id}")))?;
    let def = def.ok_or_else(|| ApiError::internal("workflow definition missing"))?;
    let mut cfg = crowdlab_core::analysis::AnalysisConfig {
        kinds: kinds.unwrap_or_else(|| group_kinds(&def.groups, &PopulationProfile::calibrated().kinds)),
        ..Default::default()
    };
    if let Some(c) = cleanup {
        cfg.cleanup = c.into_iter().collect();
    }
    if def.schedule.is_some() {
        cfg.schedule = Some(effective_schedule(&def, run.toggles));
    }
    Ok(build_report(&log, &cfg)?)
}

pub fn report_digest(report: &BiasReport) -> String {
    content_digest(report)
}

pub fn summarize(store: &Store, run_id: &str) -> Result<RunSummary, ApiError> {
    let run = store
        .read(|s| s.run(run_id).cloned())?
        .ok_or_else(|| ApiError::not_found(format!("run {run_id}")))?;
    let r = report(store, run_id, None)?;
    Ok(RunSummary {
        run_id: run_id.to_string(),
        status: run.status,
        judgments: r.total_judgments,
        workers: r.total_workers,
        returning_worker_fraction: r.returning_worker_fraction,
        crossover_worker_fraction: r.crossover_worker_fraction,
        top_k_share: r.dominance.top_k_share,
        discard_fraction: r.discard.fraction,
        report_digest: report_digest(&r),
        platform: None,
    })
}
