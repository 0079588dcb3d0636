//! Run execution under the crash-and-rerun model.
//!
//! Every state transition is committed to the store before the external call
//! it leads to, and every finished block's output is memoized write-once. A
//! crashed process re-walks the definition on restart: cached blocks are
//! skipped, in-flight Do blocks re-attach to their task handle, and a publish
//! whose outcome was lost is repeated under the same idempotency token.

mod gate;
mod ingest;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::digest::{content_digest, sha256_hex};
use crate::platform::{
    hook_token, translate_template, Adapter, AdapterRegistry, HookInfo, Judgment, PlatformError, PublishRequest,
    TaskHandle, TaskState,
};
use crate::scheduler::{self, Command, Schedule, SchedulerState};
use crate::store::{AuditKind, Mutation, State, Store, StoreError};
use crate::transform::{Partition, TransformError, TransformRegistry};
use crate::worker::{quota_key, QuotaState, Toggles, WorkerError, WorkerManager};
use crate::workflow::{
    topological_order, unit_schema, validate_units, validate_workflow_with, BlockDef, BlockKind, DataUnit, Violation,
    WorkflowDef,
};

pub use gate::Gate;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid workflow: {}", .0.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("definition unavailable")]
    DefinitionUnavailable,
    #[error("run {0} is not running")]
    NotRunning(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("transform failed in block {block}: {source}")]
    Transform { block: String, source: TransformError },
}

impl EngineError {
    pub fn is_crash(&self) -> bool {
        matches!(
            self,
            EngineError::Store(StoreError::Crashed) | EngineError::Worker(WorkerError::Store(StoreError::Crashed))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Created,
    Running,
    Paused,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStatus {
    Pending,
    Publishing,
    Collecting,
    Transforming,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BlockExecution {
    pub status: BlockStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<TaskHandle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub publish_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_attempt_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BlockExecution {
    fn pending() -> Self {
        Self {
            status: BlockStatus::Pending,
            attempts: 0,
            handle: None,
            publish_token: None,
            next_attempt_at: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunState {
    pub run_id: String,
    pub workflow_id: String,
    pub workflow_version: u32,
    pub status: RunStatus,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    pub blocks: BTreeMap<String, BlockExecution>,
    pub seed: u64,
    pub toggles: Toggles,
    /// Adapter used for every Do block instead of the one each block names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

impl RunState {
    /// Block whose published task is `platform_task_id`.
    pub fn block_for_task(&self, platform_task_id: &str) -> Option<&str> {
        self.blocks
            .iter()
            .find(|(_, e)| e.handle.as_ref().is_some_and(|h| h.platform_task_id == platform_task_id))
            .map(|(b, _)| b.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum BlockOutput {
    Units { partitions: Vec<Partition> },
    Judgments { judgments: Vec<Judgment> },
}

impl BlockOutput {
    /// Records handed to a downstream block, optionally one partition only.
    pub fn records(&self, partition: Option<&str>) -> Vec<DataUnit> {
        match self {
            BlockOutput::Units { partitions } => partitions
                .iter()
                .filter(|p| partition.is_none() || p.key.as_deref() == partition)
                .flat_map(|p| p.units.iter().cloned())
                .collect(),
            BlockOutput::Judgments { judgments } => {
                judgments.iter().enumerate().map(|(i, j)| j.to_record(i)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CacheEntry {
    pub run_id: String,
    pub block_id: String,
    pub output: BlockOutput,
    pub produced_at: DateTime<Utc>,
    pub digest: String,
}

impl CacheEntry {
    pub fn new(run_id: &str, block_id: &str, output: BlockOutput, produced_at: DateTime<Utc>) -> Self {
        let digest = content_digest(&output);
        Self {
            run_id: run_id.to_string(),
            block_id: block_id.to_string(),
            output,
            produced_at,
            digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum StepOutcome {
    Advanced { block: String },
    WaitingOnPlatform,
    RunComplete,
    BlockedBySchedule,
    Paused,
    RunFailed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub max_attempts: u32,
    pub backoff: Duration,
    /// Base URL task pages call back into (`<base>/runs/<id>/eligibility`).
    pub hook_base_url: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: Duration::seconds(5),
            hook_base_url: "http://127.0.0.1:8080".to_string(),
        }
    }
}

pub fn sched_key(run_id: &str) -> String {
    format!("sched/{run_id}")
}

const SECRET_KEY: &str = "hook-secret";

pub struct Engine {
    store: Arc<Store>,
    adapters: AdapterRegistry,
    clock: Arc<dyn Clock>,
    workers: Arc<WorkerManager>,
    transforms: TransformRegistry,
    config: EngineConfig,
    secret: Vec<u8>,
    locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
}

impl Engine {
    pub fn new(store: Arc<Store>, adapters: AdapterRegistry, clock: Arc<dyn Clock>) -> Result<Self, EngineError> {
        let secret = store.update(|s| {
            if let Some(v) = s.meta::<String>(SECRET_KEY) {
                return Ok::<_, StoreError>((Vec::new(), v));
            }
            let fresh = format!("{}{}", uuid::Uuid::new_v4().simple(), uuid::Uuid::new_v4().simple());
            Ok((vec![Mutation::meta(SECRET_KEY, &fresh)], fresh))
        })?;
        let workers = Arc::new(WorkerManager::new(store.clone(), clock.clone()));
        Ok(Self {
            store,
            adapters,
            clock,
            workers,
            transforms: TransformRegistry::with_builtins(),
            config: EngineConfig::default(),
            secret: secret.into_bytes(),
            locks: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn workers(&self) -> &Arc<WorkerManager> {
        &self.workers
    }

    pub fn adapters(&self) -> &AdapterRegistry {
        &self.adapters
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn hook_secret(&self) -> &[u8] {
        &self.secret
    }

    pub fn gate(&self, run_id: &str) -> Gate {
        Gate::new(self.store.clone(), self.workers.clone(), run_id)
    }

    fn run_lock(&self, run_id: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(run_id.to_string())
            .or_default()
            .clone()
    }

    /// Stores the definition (as a new workflow id if it has none) and
    /// returns the stored copy.
    pub fn put_workflow(&self, def: &WorkflowDef) -> Result<WorkflowDef, EngineError> {
        let mut def = def.clone();
        def.normalize();
        if def.id.is_none() {
            def.id = Some(format!("wf-{}", &content_digest(&def)[..12]));
        }
        let id = def.id.clone().unwrap_or_default();
        self.store.update(|s| {
            if s.workflow(&id, def.version) == Some(&def) {
                return Ok::<_, StoreError>((Vec::new(), ()));
            }
            Ok((vec![Mutation::PutWorkflow { def: def.clone() }], ()))
        })?;
        Ok(def)
    }

    /// Validates, stores and starts a run. No platform is contacted.
    pub fn start_run(&self, def: &WorkflowDef, units: &[DataUnit], opts: RunOptions) -> Result<RunState, EngineError> {
        let mut normalized = def.clone();
        normalized.normalize();
        let mut violations = validate_workflow_with(&normalized, &unit_schema(units), &self.transforms);
        violations.extend(validate_units(&normalized, units));
        if let Some(a) = &opts.adapter {
            if self.adapters.get(a).is_err() {
                return Err(PlatformError::UnknownAdapter(a.clone()).into());
            }
        }
        if !violations.is_empty() {
            return Err(EngineError::Invalid(violations));
        }
        let def = self.put_workflow(&normalized)?;
        let now = self.clock.now();
        let run_id = opts
            .run_id
            .clone()
            .unwrap_or_else(|| format!("run-{}", uuid::Uuid::new_v4().simple()));
        let run = RunState {
            run_id: run_id.clone(),
            workflow_id: def.id.clone().unwrap_or_default(),
            workflow_version: def.version,
            status: RunStatus::Running,
            started_at: now,
            finished_at: None,
            blocks: def.blocks.iter().map(|b| (b.id.clone(), BlockExecution::pending())).collect(),
            seed: opts.seed,
            toggles: opts.toggles,
            adapter: opts.adapter.clone(),
        };
        self.store.update(|s| {
            if s.run(&run_id).is_some() {
                return Err(EngineError::Store(StoreError::WriteOnce(format!("runs/{run_id}"))));
            }
            let mut muts = vec![
                Mutation::PutRun { run: run.clone() },
                Mutation::PutInputs {
                    run_id: run_id.clone(),
                    units: units.to_vec(),
                },
                Mutation::meta(sched_key(&run_id), &SchedulerState::new(&run_id, now)),
                Mutation::audit(
                    now,
                    Some(&run_id),
                    AuditKind::RunCreated {
                        workflow_id: run.workflow_id.clone(),
                        version: run.workflow_version,
                    },
                ),
            ];
            if let Some(q) = &def.quotas {
                muts.push(Mutation::meta(quota_key(&run_id), &QuotaState::new(q.clone(), &def.group_ids())));
            }
            Ok((muts, ()))
        })?;
        Ok(run)
    }

    pub fn run_state(&self, run_id: &str) -> Result<RunState, EngineError> {
        self.store
            .read(|s| s.run(run_id).cloned())?
            .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))
    }

    /// Re-attaches to a persisted run after a restart. Cached blocks are never
    /// executed again; the next [`Engine::execute_next`] continues where the
    /// run left off.
    pub fn resume_run(&self, run_id: &str) -> Result<RunState, EngineError> {
        let (run, has_def) = self.store.read(|s| {
            let run = s.run(run_id).cloned();
            let has_def = run
                .as_ref()
                .is_some_and(|r| s.workflow(&r.workflow_id, r.workflow_version).is_some());
            (run, has_def)
        })?;
        let run = run.ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
        if !has_def {
            return Err(EngineError::DefinitionUnavailable);
        }
        Ok(run)
    }

    fn load(&self, s: &State, run_id: &str) -> Result<(RunState, WorkflowDef), EngineError> {
        let run = s
            .run(run_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
        let def = s
            .workflow(&run.workflow_id, run.workflow_version)
            .cloned()
            .ok_or(EngineError::DefinitionUnavailable)?;
        Ok((run, def))
    }

    fn adapter_for(&self, run: &RunState, block: &BlockDef) -> Result<Arc<dyn Adapter>, EngineError> {
        let id = match (&run.adapter, &block.do_task) {
            (Some(a), _) => a.clone(),
            (None, Some(d)) => d.platform.clone(),
            (None, None) => return Err(EngineError::DefinitionUnavailable),
        };
        Ok(self.adapters.get(&id)?)
    }

    /// Advances the run by one step: the first ready block that can make
    /// progress in topological order is executed, published, or polled.
    pub fn execute_next(&self, run_id: &str) -> Result<StepOutcome, EngineError> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().unwrap();
        let (run, def, sched) = self.store.read(|s| {
            let (run, def) = self.load(s, run_id)?;
            let sched = s.meta::<SchedulerState>(&sched_key(run_id));
            Ok::<_, EngineError>((run, def, sched))
        })??;
        match run.status {
            RunStatus::Completed => return Ok(StepOutcome::RunComplete),
            RunStatus::Failed => return Ok(StepOutcome::RunFailed),
            RunStatus::Created => return Err(EngineError::NotRunning(run_id.to_string())),
            RunStatus::Paused => {
                let by_schedule = sched.is_some_and(|s| !s.active && !s.paused_by_user);
                return Ok(if by_schedule {
                    StepOutcome::BlockedBySchedule
                } else {
                    StepOutcome::Paused
                });
            }
            RunStatus::Running => {}
        }
        let order = topological_order(&def).map_err(|_| EngineError::DefinitionUnavailable)?;
        let cached: BTreeSet<String> = self
            .store
            .read(|s| s.cache_entries(run_id).map(|e| e.block_id.clone()).collect())?;
        let now = self.clock.now();
        let mut waiting = false;
        for id in &order {
            if cached.contains(id) {
                continue;
            }
            let exec = &run.blocks[id];
            if exec.status == BlockStatus::Failed {
                continue;
            }
            let parents_ready = def.inbound(id).all(|e| cached.contains(&e.from));
            if !parents_ready {
                continue;
            }
            let block = def.block(id).ok_or(EngineError::DefinitionUnavailable)?;
            if exec.next_attempt_at.is_some_and(|t| t > now) {
                waiting = true;
                continue;
            }
            if block.lambda.is_some() {
                self.run_lambda(&run, &def, block)?;
                return Ok(StepOutcome::Advanced { block: id.clone() });
            }
            match exec.status {
                BlockStatus::Pending | BlockStatus::Publishing => {
                    self.publish(&run, &def, block)?;
                    return Ok(StepOutcome::Advanced { block: id.clone() });
                }
                BlockStatus::Collecting => {
                    if self.poll(&run, &def, block)? {
                        return Ok(StepOutcome::Advanced { block: id.clone() });
                    }
                    waiting = true;
                }
                _ => waiting = true,
            }
        }
        if waiting {
            return Ok(StepOutcome::WaitingOnPlatform);
        }
        self.finish(run_id, &order, &cached)
    }

    /// Calls [`Engine::execute_next`] until it stops advancing.
    pub fn run_until_idle(&self, run_id: &str) -> Result<StepOutcome, EngineError> {
        loop {
            match self.execute_next(run_id)? {
                StepOutcome::Advanced { .. } => continue,
                other => return Ok(other),
            }
        }
    }

    fn finish(&self, run_id: &str, order: &[String], cached: &BTreeSet<String>) -> Result<StepOutcome, EngineError> {
        let now = self.clock.now();
        let complete = order.iter().all(|b| cached.contains(b));
        self.store.update(|s| {
            let mut run = s
                .run(run_id)
                .cloned()
                .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
            if run.status != RunStatus::Running {
                return Ok::<_, EngineError>((Vec::new(), ()));
            }
            run.finished_at = Some(now);
            let kind = if complete {
                run.status = RunStatus::Completed;
                AuditKind::RunCompleted
            } else {
                run.status = RunStatus::Failed;
                AuditKind::RunFailed {
                    reason: "blocks failed".into(),
                }
            };
            Ok((vec![Mutation::PutRun { run }, Mutation::audit(now, Some(run_id), kind)], ()))
        })?;
        Ok(if complete {
            StepOutcome::RunComplete
        } else {
            StepOutcome::RunFailed
        })
    }

    /// Input records of a block: the run's units for roots, otherwise the
    /// parents' outputs concatenated in edge order.
    fn block_input(s: &State, def: &WorkflowDef, run_id: &str, block_id: &str) -> Option<Vec<DataUnit>> {
        let edges: Vec<_> = def.inbound(block_id).collect();
        if edges.is_empty() {
            return Some(s.inputs(run_id).map(<[_]>::to_vec).unwrap_or_default());
        }
        let mut out = Vec::new();
        for e in edges {
            let entry = s.cache(run_id, &e.from)?;
            out.extend(entry.output.records(e.partition.as_deref()));
        }
        Some(out)
    }

    fn update_block(
        &self,
        run_id: &str,
        block_id: &str,
        f: impl FnOnce(&mut BlockExecution),
        extra: Vec<Mutation>,
    ) -> Result<(), EngineError> {
        self.store.update(|s| {
            let mut run = s
                .run(run_id)
                .cloned()
                .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
            if let Some(exec) = run.blocks.get_mut(block_id) {
                f(exec);
            }
            let mut muts = vec![Mutation::PutRun { run }];
            muts.extend(extra);
            Ok((muts, ()))
        })
    }

    fn run_lambda(&self, run: &RunState, def: &WorkflowDef, block: &BlockDef) -> Result<(), EngineError> {
        let spec = &block.lambda.as_ref().expect("lambda block").transform;
        let input = self
            .store
            .read(|s| Self::block_input(s, def, &run.run_id, &block.id))?
            .ok_or(EngineError::DefinitionUnavailable)?;
        let now = self.clock.now();
        match self.transforms.eval(spec, input) {
            Ok(out) => {
                let entry = CacheEntry::new(
                    &run.run_id,
                    &block.id,
                    BlockOutput::Units {
                        partitions: out.partitions,
                    },
                    now,
                );
                self.complete_block(&run.run_id, &block.id, entry)
            }
            Err(e) => {
                // Transforms are deterministic: retrying cannot help.
                let error = e.to_string();
                self.update_block(
                    &run.run_id,
                    &block.id,
                    |x| {
                        x.status = BlockStatus::Failed;
                        x.attempts += 1;
                        x.error = Some(error.clone());
                    },
                    vec![Mutation::audit(
                        now,
                        Some(&run.run_id),
                        AuditKind::BlockFailed {
                            block: block.id.clone(),
                            error: error.clone(),
                        },
                    )],
                )
            }
        }
    }

    /// Writes the cache entry and marks the block done in one commit. A lost
    /// race (entry already present) only marks the block.
    fn complete_block(&self, run_id: &str, block_id: &str, entry: CacheEntry) -> Result<(), EngineError> {
        let now = entry.produced_at;
        self.store.update(|s| {
            let mut run = s
                .run(run_id)
                .cloned()
                .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
            let digest = match s.cache(run_id, block_id) {
                Some(existing) => existing.digest.clone(),
                None => entry.digest.clone(),
            };
            if let Some(exec) = run.blocks.get_mut(block_id) {
                exec.status = BlockStatus::Done;
                exec.next_attempt_at = None;
            }
            let mut muts = Vec::new();
            if s.cache(run_id, block_id).is_none() {
                muts.push(Mutation::PutCache { entry });
            }
            muts.push(Mutation::PutRun { run });
            muts.push(Mutation::audit(
                now,
                Some(run_id),
                AuditKind::BlockDone {
                    block: block_id.to_string(),
                    digest,
                },
            ));
            Ok((muts, ()))
        })
    }

    fn publish_token(run_id: &str, block_id: &str) -> String {
        sha256_hex(format!("publish/{run_id}/{block_id}").as_bytes())[..32].to_string()
    }

    fn publish(&self, run: &RunState, def: &WorkflowDef, block: &BlockDef) -> Result<(), EngineError> {
        let task = block.do_task.as_ref().expect("do block");
        let exec = &run.blocks[&block.id];
        let now = self.clock.now();
        let token = match &exec.publish_token {
            Some(t) => t.clone(),
            None => {
                let token = Self::publish_token(&run.run_id, &block.id);
                let t = token.clone();
                self.update_block(
                    &run.run_id,
                    &block.id,
                    |x| {
                        x.status = BlockStatus::Publishing;
                        x.publish_token = Some(t);
                    },
                    vec![Mutation::audit(
                        now,
                        Some(&run.run_id),
                        AuditKind::PublishIntent {
                            block: block.id.clone(),
                            token: token.clone(),
                        },
                    )],
                )?;
                token
            }
        };
        let adapter = self.adapter_for(run, block)?;
        let units = self
            .store
            .read(|s| Self::block_input(s, def, &run.run_id, &block.id))?
            .ok_or(EngineError::DefinitionUnavailable)?;
        let hook = HookInfo {
            url: format!("{}/runs/{}/eligibility", self.config.hook_base_url, run.run_id),
            token: hook_token(&self.secret, &run.run_id),
        };
        let result = translate_template(&task.template, adapter.id(), &adapter.capabilities(), Some(hook)).and_then(
            |payload| {
                let group = task
                    .group
                    .as_ref()
                    .and_then(|g| def.groups.iter().find(|x| &x.id == g))
                    .cloned();
                adapter.publish(&PublishRequest {
                    run_id: run.run_id.clone(),
                    block_id: block.id.clone(),
                    group,
                    payload,
                    units,
                    votes_per_unit: task.votes_per_unit,
                    reward_per_assignment: task.reward_per_assignment,
                    idempotency_token: token.clone(),
                })
            },
        );
        match result {
            Ok(handle) => {
                let task_id = handle.platform_task_id.clone();
                self.update_block(
                    &run.run_id,
                    &block.id,
                    |x| {
                        x.status = BlockStatus::Collecting;
                        x.handle = Some(handle);
                        x.next_attempt_at = None;
                        x.error = None;
                    },
                    vec![Mutation::audit(
                        now,
                        Some(&run.run_id),
                        AuditKind::Published {
                            block: block.id.clone(),
                            task: task_id,
                        },
                    )],
                )
            }
            Err(e) => self.attempt_failed(&run.run_id, &block.id, exec.attempts + 1, &e.to_string(), matches!(e, PlatformError::UnsupportedElement { .. })),
        }
    }

    /// Counts a failed adapter attempt; after `max_attempts` (or at once for
    /// permanent errors) the block is parked as failed.
    fn attempt_failed(&self, run_id: &str, block_id: &str, attempt: u32, error: &str, permanent: bool) -> Result<(), EngineError> {
        let now = self.clock.now();
        let give_up = permanent || attempt >= self.config.max_attempts;
        let backoff = self.config.backoff * 2i32.pow(attempt.saturating_sub(1).min(20));
        let kind = if give_up {
            AuditKind::BlockFailed {
                block: block_id.to_string(),
                error: error.to_string(),
            }
        } else {
            AuditKind::BlockAttemptFailed {
                block: block_id.to_string(),
                attempt,
                error: error.to_string(),
            }
        };
        let err = error.to_string();
        self.update_block(
            run_id,
            block_id,
            |x| {
                x.attempts = attempt;
                x.error = Some(err);
                if give_up {
                    x.status = BlockStatus::Failed;
                    x.next_attempt_at = None;
                } else {
                    x.next_attempt_at = Some(now + backoff);
                }
            },
            vec![Mutation::audit(now, Some(run_id), kind)],
        )
    }

    /// Ingests new judgments and completes the block once every non-gold unit
    /// has enough judgments from trusted workers. Returns whether the block
    /// finished.
    fn poll(&self, run: &RunState, def: &WorkflowDef, block: &BlockDef) -> Result<bool, EngineError> {
        let exec = &run.blocks[&block.id];
        let handle = exec.handle.clone().expect("collecting block has a handle");
        let adapter = self.adapter_for(run, block)?;
        if let Err(e) = self.ingest(run, def, block, &handle, adapter.as_ref()) {
            if let EngineError::Platform(p) = &e {
                self.attempt_failed(&run.run_id, &block.id, exec.attempts + 1, &p.to_string(), false)?;
                return Ok(false);
            }
            return Err(e);
        }
        let votes = block.do_task.as_ref().map_or(1, |d| d.votes_per_unit);
        let done = self.store.read(|s| {
            let units = Self::block_input(s, def, &run.run_id, &block.id).unwrap_or_default();
            let mut counts: BTreeMap<&str, u32> = units
                .iter()
                .filter(|u| !u.is_gold())
                .map(|u| (u.id.as_str(), 0))
                .collect();
            for j in s.judgments(&run.run_id).iter().filter(|j| j.block_id == block.id) {
                let trusted = s.worker(&j.worker_id).is_none_or(|w| w.trusted);
                if let Some(c) = counts.get_mut(j.unit_id.as_str()) {
                    if trusted {
                        *c += 1;
                    }
                }
            }
            counts.values().all(|c| *c >= votes)
        })?;
        if !done {
            return Ok(false);
        }
        let judgments: Vec<Judgment> = self.store.read(|s| {
            s.judgments(&run.run_id)
                .iter()
                .filter(|j| j.block_id == block.id)
                .cloned()
                .collect()
        })?;
        adapter.cancel(&handle)?;
        let entry = CacheEntry::new(&run.run_id, &block.id, BlockOutput::Judgments { judgments }, self.clock.now());
        self.complete_block(&run.run_id, &block.id, entry)?;
        Ok(true)
    }

    /// Pauses the run on behalf of the requester.
    pub fn pause_run(&self, run_id: &str, by: &str) -> Result<RunState, EngineError> {
        self.set_user_pause(run_id, by, true)
    }

    pub fn resume_paused(&self, run_id: &str, by: &str) -> Result<RunState, EngineError> {
        self.set_user_pause(run_id, by, false)
    }

    fn set_user_pause(&self, run_id: &str, by: &str, pause: bool) -> Result<RunState, EngineError> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().unwrap();
        let now = self.clock.now();
        let run = self.store.update(|s| {
            let (mut run, def) = self.load(s, run_id)?;
            if !matches!(run.status, RunStatus::Running | RunStatus::Paused) {
                return Err(EngineError::NotRunning(run_id.to_string()));
            }
            let mut sched: SchedulerState = s
                .meta(&sched_key(run_id))
                .unwrap_or_else(|| SchedulerState::new(run_id, now));
            if sched.paused_by_user == pause {
                return Ok((Vec::new(), run));
            }
            sched.paused_by_user = pause;
            let in_window = !run.toggles.schedule
                || def
                    .schedule
                    .as_ref()
                    .is_none_or(|sc| scheduler::is_active(sc, now));
            let kind = if pause {
                run.status = RunStatus::Paused;
                AuditKind::Paused { by: by.to_string() }
            } else {
                if in_window {
                    run.status = RunStatus::Running;
                    sched.active = true;
                }
                AuditKind::Resumed { by: by.to_string() }
            };
            Ok((
                vec![
                    Mutation::meta(sched_key(run_id), &sched),
                    Mutation::PutRun { run: run.clone() },
                    Mutation::audit(now, Some(run_id), kind),
                ],
                run,
            ))
        })?;
        self.reconcile_tasks(&run)?;
        Ok(run)
    }

    /// Cancels every open platform task and fails the run.
    pub fn cancel_run(&self, run_id: &str, by: &str) -> Result<RunState, EngineError> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().unwrap();
        let now = self.clock.now();
        let run = self.store.update(|s| {
            let (mut run, _) = self.load(s, run_id)?;
            if matches!(run.status, RunStatus::Completed | RunStatus::Failed) {
                return Ok::<_, EngineError>((Vec::new(), run));
            }
            run.status = RunStatus::Failed;
            run.finished_at = Some(now);
            Ok((
                vec![
                    Mutation::PutRun { run: run.clone() },
                    Mutation::audit(
                        now,
                        Some(run_id),
                        AuditKind::RunFailed {
                            reason: format!("cancelled by {by}"),
                        },
                    ),
                ],
                run,
            ))
        })?;
        self.reconcile_tasks(&run)?;
        Ok(run)
    }

    /// Scheduler tick: window transitions pause or resume the run, checkpoints
    /// rotate quota buckets and apply pending quota edits. Platform tasks are
    /// then brought in line with the persisted run status.
    pub fn tick(&self, run_id: &str) -> Result<Vec<Command>, EngineError> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().unwrap();
        let now = self.clock.now();
        let (commands, run) = self.store.update(|s| {
            let (mut run, def) = self.load(s, run_id)?;
            if !matches!(run.status, RunStatus::Running | RunStatus::Paused) {
                return Ok((Vec::new(), (Vec::new(), run)));
            }
            let mut sched: SchedulerState = s
                .meta(&sched_key(run_id))
                .unwrap_or_else(|| SchedulerState::new(run_id, now));
            let schedule = effective_schedule(&def, run.toggles);
            let before = sched.clone();
            let commands = scheduler::on_tick(&mut sched, &schedule, now);
            let mut muts = Vec::new();
            for c in &commands {
                match c {
                    Command::PauseRun if run.status == RunStatus::Running => {
                        run.status = RunStatus::Paused;
                        muts.push(Mutation::audit(now, Some(run_id), AuditKind::Paused { by: "scheduler".into() }));
                    }
                    Command::ResumeRun if run.status == RunStatus::Paused => {
                        run.status = RunStatus::Running;
                        muts.push(Mutation::audit(now, Some(run_id), AuditKind::Resumed { by: "scheduler".into() }));
                    }
                    Command::Checkpoint => {
                        muts.push(Mutation::audit(
                            now,
                            Some(run_id),
                            AuditKind::Checkpoint {
                                number: sched.checkpoints,
                                judgments: s.judgments(run_id).len() as u64,
                            },
                        ));
                    }
                    _ => {}
                }
            }
            if sched != before {
                muts.push(Mutation::meta(sched_key(run_id), &sched));
            }
            if !muts.is_empty() {
                muts.push(Mutation::PutRun { run: run.clone() });
            }
            Ok::<_, EngineError>((muts, (commands, run)))
        })?;
        if commands.contains(&Command::Checkpoint) {
            self.workers.rotate_buckets(run_id)?;
        }
        self.reconcile_tasks(&run)?;
        Ok(commands)
    }

    /// Makes every open platform task's state match the run status. Safe to
    /// repeat; this is what re-applies a pause whose adapter call was lost in
    /// a crash.
    fn reconcile_tasks(&self, run: &RunState) -> Result<(), EngineError> {
        let def = self
            .store
            .read(|s| s.workflow(&run.workflow_id, run.workflow_version).cloned())?
            .ok_or(EngineError::DefinitionUnavailable)?;
        for (id, exec) in &run.blocks {
            let Some(handle) = &exec.handle else { continue };
            if exec.status != BlockStatus::Collecting {
                continue;
            }
            let Some(block) = def.block(id) else { continue };
            let adapter = self.adapter_for(run, block)?;
            let state = adapter.status(handle)?.state;
            match (run.status, state) {
                (_, TaskState::Cancelled) => {}
                (RunStatus::Running, TaskState::Paused) => adapter.resume(handle)?,
                (RunStatus::Paused, TaskState::Active) => adapter.pause(handle)?,
                (RunStatus::Failed, _) => adapter.cancel(handle)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scheduler_state(&self, run_id: &str) -> Result<Option<SchedulerState>, EngineError> {
        Ok(self.store.read(|s| s.meta::<SchedulerState>(&sched_key(run_id)))?)
    }

    /// Per-block collection progress, in topological order.
    pub fn progress(&self, run_id: &str) -> Result<Vec<BlockProgress>, EngineError> {
        self.store.read(|s| {
            let (run, def) = self.load(s, run_id)?;
            let order = topological_order(&def).map_err(|_| EngineError::DefinitionUnavailable)?;
            let log = s.judgments(run_id);
            let mut out = Vec::with_capacity(order.len());
            for id in order {
                let block = def.block(&id).ok_or(EngineError::DefinitionUnavailable)?;
                let exec = &run.blocks[&id];
                let mut p = BlockProgress {
                    block_id: id.clone(),
                    kind: block.kind,
                    group: def.group_of(&id).map(str::to_string),
                    status: exec.status,
                    attempts: exec.attempts,
                    platform_task_id: exec.handle.as_ref().map(|h| h.platform_task_id.clone()),
                    units: None,
                    target: None,
                    collected: 0,
                    judgments: 0,
                    error: exec.error.clone(),
                };
                if let Some(task) = &block.do_task {
                    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
                    if let Some(units) = Self::block_input(s, &def, run_id, &id) {
                        counts = units.iter().filter(|u| !u.is_gold()).map(|u| (u.id.clone(), 0)).collect();
                        p.units = Some(counts.len());
                        p.target = Some(counts.len() as u64 * u64::from(task.votes_per_unit));
                    }
                    for j in log.iter().filter(|j| j.block_id == id) {
                        p.judgments += 1;
                        let trusted = s.worker(&j.worker_id).is_none_or(|w| w.trusted);
                        if let (true, Some(c)) = (trusted, counts.get_mut(&j.unit_id)) {
                            *c += 1;
                        }
                    }
                    p.collected = counts.values().map(|c| u64::from((*c).min(task.votes_per_unit))).sum();
                }
                out.push(p);
            }
            Ok(out)
        })?
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BlockProgress {
    pub block_id: String,
    pub kind: BlockKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub status: BlockStatus,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub platform_task_id: Option<String>,
    /// Non-gold input units, once the inputs are known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    /// Trusted votes needed to finish (units x votes per unit).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<u64>,
    /// Trusted votes counted toward the target.
    pub collected: u64,
    pub judgments: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The schedule actually enforced: windows and balancing only apply with the
/// schedule control on; checkpoints always fire.
pub fn effective_schedule(def: &WorkflowDef, toggles: Toggles) -> Schedule {
    let mut schedule = def.schedule.clone().unwrap_or_default();
    if !toggles.schedule {
        schedule.windows.clear();
        schedule.balance_across_groups = false;
    }
    schedule
}

#[cfg(test)]
mod tests;
