//! Drives a run against the simulated platform on a manual clock.
//!
//! Time moves in fixed steps. Each step first lets the engine act at the
//! step's start (scheduler tick, then every block that can progress), then
//! lets the simulated crowd act until the next step, calling back into the
//! run's gate.

pub mod workloads;

use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};

use crate::clock::{Clock, ManualClock};
use crate::engine::{effective_schedule, Engine, EngineError, RunOptions, RunState, RunStatus, StepOutcome};
use crate::platform::sim::{PopulationProfile, SimPlatform, SimStats, SIM_ADAPTER_ID};
use crate::platform::{AdapterRegistry, Judgment};
use crate::scheduler::{Schedule, SchedulerState};
use crate::store::Store;
use crate::worker::{group_kinds, Toggles};
use crate::workflow::{DataUnit, WorkflowDef};

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    /// Seeds both the run and the population (overrides the profile's seed).
    pub seed: u64,
    pub toggles: Toggles,
    pub start: DateTime<Utc>,
    /// Span over which workers arrive.
    pub horizon: Duration,
    pub step: Duration,
    /// Extra time allowed after the horizon for returns and stragglers.
    pub drain: Duration,
}

impl SimulationConfig {
    pub fn new(seed: u64, toggles: Toggles) -> Self {
        Self {
            seed,
            toggles,
            start: default_start(),
            horizon: Duration::hours(48),
            step: Duration::hours(1),
            drain: Duration::days(7),
        }
    }

    pub fn with_horizon(mut self, horizon: Duration) -> Self {
        self.horizon = horizon;
        self
    }
}

/// Monday 2024-01-01 00:00 UTC.
pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date")
}

pub fn run_id_for(seed: u64) -> String {
    format!("sim-{seed}")
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub run: RunState,
    pub def: WorkflowDef,
    pub judgments: Vec<Judgment>,
    pub stats: SimStats,
    pub scheduler: Option<SchedulerState>,
    /// Schedule enforced during the run.
    pub schedule: Schedule,
    /// Group id -> kind, from the profile.
    pub kinds: std::collections::BTreeMap<String, String>,
    pub finished_at: DateTime<Utc>,
}

/// A run in progress against a simulated crowd.
pub struct Simulation {
    platform: Arc<SimPlatform>,
    clock: Arc<ManualClock>,
    engine: Engine,
    run_id: String,
    def: WorkflowDef,
    units: Vec<DataUnit>,
    cfg: SimulationConfig,
    kinds: std::collections::BTreeMap<String, String>,
    now: DateTime<Utc>,
    started: bool,
}

impl Simulation {
    /// Sets up the platform and engine over `store`. The run itself is
    /// started by the first [`Simulation::engine_phase`].
    pub fn new(
        store: Arc<Store>,
        def: &WorkflowDef,
        units: &[DataUnit],
        profile: &PopulationProfile,
        cfg: SimulationConfig,
    ) -> Result<Self, EngineError> {
        let mut profile = profile.clone();
        profile.seed = cfg.seed;
        let kinds = group_kinds(&def.groups, &profile.kinds);
        let platform = Arc::new(SimPlatform::new(profile, cfg.start, cfg.horizon));
        let clock = Arc::new(ManualClock::new(cfg.start));
        let engine = Self::engine_over(store, &platform, &clock)?;
        Ok(Self {
            platform,
            clock,
            engine,
            run_id: run_id_for(cfg.seed),
            def: def.clone(),
            units: units.to_vec(),
            now: cfg.start,
            cfg,
            kinds,
            started: false,
        })
    }

    fn engine_over(store: Arc<Store>, platform: &Arc<SimPlatform>, clock: &Arc<ManualClock>) -> Result<Engine, EngineError> {
        let registry = AdapterRegistry::new();
        registry.register(platform.clone());
        let clock: Arc<dyn Clock> = clock.clone();
        Engine::new(store, registry, clock)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn platform(&self) -> &Arc<SimPlatform> {
        &self.platform
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }

    /// Replaces the engine after a restart: same platform, same clock, a
    /// store reopened from whatever reached the disk.
    pub fn reattach(&mut self, store: Arc<Store>) -> Result<(), EngineError> {
        self.engine = Self::engine_over(store, &self.platform, &self.clock)?;
        self.started = self.engine.store().read(|s| s.run(&self.run_id).is_some())?;
        if self.started {
            self.engine.resume_run(&self.run_id)?;
        }
        Ok(())
    }

    /// The engine's share of the current step.
    pub fn engine_phase(&mut self) -> Result<StepOutcome, EngineError> {
        self.clock.set(self.now);
        if !self.started {
            let opts = RunOptions {
                run_id: Some(self.run_id.clone()),
                seed: self.cfg.seed,
                toggles: self.cfg.toggles,
                adapter: Some(SIM_ADAPTER_ID.to_string()),
            };
            self.engine.start_run(&self.def, &self.units, opts)?;
            self.started = true;
        }
        self.engine.tick(&self.run_id)?;
        self.engine.run_until_idle(&self.run_id)
    }

    /// The crowd's share of the current step; moves time to the next step.
    pub fn platform_phase(&mut self) {
        let next = self.now + self.cfg.step;
        let gate = self.engine.gate(&self.run_id);
        self.platform.advance(next, &gate);
        self.now = next;
    }

    /// Whether the run should stop after an engine phase that returned
    /// `outcome`.
    pub fn is_over(&self, outcome: &StepOutcome) -> bool {
        matches!(outcome, StepOutcome::RunComplete | StepOutcome::RunFailed)
            || self.platform.is_drained()
            || self.now >= self.cfg.start + self.cfg.horizon + self.cfg.drain
    }

    /// Alternates phases until the run ends or the crowd is exhausted.
    pub fn run_to_end(mut self) -> Result<SimulationOutcome, EngineError> {
        loop {
            let outcome = self.engine_phase()?;
            if self.is_over(&outcome) {
                break;
            }
            self.platform_phase();
        }
        self.outcome()
    }

    pub fn outcome(&self) -> Result<SimulationOutcome, EngineError> {
        let run = self.engine.run_state(&self.run_id)?;
        let def = self
            .engine
            .store()
            .read(|s| s.workflow(&run.workflow_id, run.workflow_version).cloned())?
            .ok_or(EngineError::DefinitionUnavailable)?;
        let judgments = self.engine.store().read(|s| s.judgments(&self.run_id).to_vec())?;
        let scheduler = self.engine.scheduler_state(&self.run_id)?;
        let schedule = effective_schedule(&def, run.toggles);
        Ok(SimulationOutcome {
            judgments,
            stats: self.platform.stats(),
            scheduler,
            schedule,
            kinds: self.kinds.clone(),
            finished_at: self.now,
            def,
            run,
        })
    }
}

/// Runs `def` over `units` against a simulated population in an in-memory
/// store and returns the collected log.
pub fn run_simulation(
    def: &WorkflowDef,
    units: &[DataUnit],
    profile: &PopulationProfile,
    cfg: SimulationConfig,
) -> Result<SimulationOutcome, EngineError> {
    let store = Arc::new(Store::ephemeral());
    Simulation::new(store, def, units, profile, cfg)?.run_to_end()
}

/// Whether a run finished with every block cached.
pub fn completed(outcome: &SimulationOutcome) -> bool {
    outcome.run.status == RunStatus::Completed
}
