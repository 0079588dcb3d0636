//! Embedded transactional store.
//!
//! State lives in memory behind a single lock; every committed batch of
//! [`Mutation`]s is first appended to a checksummed write-ahead log, one line
//! per batch (`<sha256-hex> <json>\n`). Reopening replays the log. A torn
//! final line (crash mid-write) is dropped; a bad line anywhere else is
//! corruption and refuses to open.
//!
//! The atomic primitives other modules rely on are [`Store::put_once`]
//! (write-once block cache), [`Store::check_and_assign`] (compare-and-set on
//! a worker's assignment) and [`Store::append_judgments`] (cursor-guarded
//! append). Everything else goes through [`Store::update`], a
//! read-modify-write under the store lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest::{content_digest, sha256_hex};
use crate::engine::{CacheEntry, RunState};
use crate::platform::Judgment;
use crate::worker::{Assignment, WorkerRecord};
use crate::workflow::{DataUnit, WorkflowDef};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    /// The process "died" at an injected fault point; the handle is unusable
    /// until the store is reopened.
    #[error("store crashed (injected fault)")]
    Crashed,
    #[error("storage failure: {0}")]
    Io(String),
    #[error("log corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("write-once violation on {0}")]
    WriteOnce(String),
    #[error("not found: {0}")]
    NotFound(String),
}

impl StoreError {
    /// Storage failures may be retried; the other variants are final.
    pub fn is_retriable(&self) -> bool {
        matches!(self, StoreError::Io(_))
    }
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ShareToken {
    pub token: String,
    pub workflow_id: Option<String>,
    pub run_id: Option<String>,
    pub created_at: DateTime<Utc>,
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(flatten)]
    pub kind: AuditKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AuditKind {
    RunCreated { workflow_id: String, version: u32 },
    RunCompleted,
    RunFailed { reason: String },
    Eligibility {
        worker: String,
        action: String,
        reason: String,
        group: Option<String>,
        block: Option<String>,
    },
    IdentityMerge { canonical: String, absorbed: String },
    BucketRotation { checkpoint: u64, mapping: BTreeMap<String, Vec<String>> },
    Paused { by: String },
    Resumed { by: String },
    Checkpoint { number: u64, judgments: u64 },
    QuotaEditRequested { max_share: f64 },
    QuotaEditApplied { max_share: f64 },
    PublishIntent { block: String, token: String },
    Published { block: String, task: String },
    BlockDone { block: String, digest: String },
    BlockAttemptFailed { block: String, attempt: u32, error: String },
    BlockFailed { block: String, error: String },
    ProtocolViolation { worker: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Mutation {
    PutWorkflow { def: WorkflowDef },
    PutRun { run: RunState },
    PutInputs { run_id: String, units: Vec<DataUnit> },
    PutCache { entry: CacheEntry },
    PutWorker { record: WorkerRecord },
    LinkIdentity { token: String, canonical: String },
    MergeIdentity { absorbed: String, into: String },
    Assign { run_id: String, worker: String, assignment: Assignment },
    AppendJudgments { run_id: String, block_id: String, judgments: Vec<Judgment>, cursor: u64 },
    AppendAudit { at: DateTime<Utc>, run_id: Option<String>, kind: AuditKind },
    PutShare { share: ShareToken },
    PutMeta { key: String, value: Value },
}

impl Mutation {
    pub fn audit(at: DateTime<Utc>, run_id: Option<&str>, kind: AuditKind) -> Self {
        Mutation::AppendAudit {
            at,
            run_id: run_id.map(str::to_string),
            kind,
        }
    }

    pub fn meta<T: Serialize>(key: impl Into<String>, value: &T) -> Self {
        Mutation::PutMeta {
            key: key.into(),
            value: serde_json::to_value(value).expect("meta value serializes"),
        }
    }
}

/// All namespaces. Read through [`Store::read`] / [`Store::update`].
#[derive(Debug, Clone, Default)]
pub struct State {
    workflows: BTreeMap<String, BTreeMap<u32, WorkflowDef>>,
    runs: BTreeMap<String, RunState>,
    inputs: BTreeMap<String, Vec<DataUnit>>,
    cache: BTreeMap<(String, String), CacheEntry>,
    workers: BTreeMap<String, WorkerRecord>,
    identity_tokens: BTreeMap<String, String>,
    aliases: BTreeMap<String, String>,
    assignments: BTreeMap<(String, String), Assignment>,
    judgments: BTreeMap<String, Vec<Judgment>>,
    cursors: BTreeMap<(String, String), u64>,
    audit: Vec<AuditEvent>,
    shares: BTreeMap<String, ShareToken>,
    meta: BTreeMap<String, Value>,
    seq: u64,
}

impl State {
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn workflow(&self, id: &str, version: u32) -> Option<&WorkflowDef> {
        self.workflows.get(id)?.get(&version)
    }

    pub fn latest_workflow(&self, id: &str) -> Option<&WorkflowDef> {
        self.workflows.get(id)?.values().next_back()
    }

    pub fn workflow_ids(&self) -> impl Iterator<Item = &String> {
        self.workflows.keys()
    }

    pub fn run(&self, id: &str) -> Option<&RunState> {
        self.runs.get(id)
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunState> {
        self.runs.values()
    }

    pub fn inputs(&self, run_id: &str) -> Option<&[DataUnit]> {
        self.inputs.get(run_id).map(Vec::as_slice)
    }

    pub fn cache(&self, run_id: &str, block_id: &str) -> Option<&CacheEntry> {
        self.cache.get(&(run_id.to_string(), block_id.to_string()))
    }

    pub fn cache_entries(&self, run_id: &str) -> impl Iterator<Item = &CacheEntry> {
        let key = run_id.to_string();
        let lo = (key.clone(), String::new());
        self.cache
            .range(lo..)
            .take_while(move |((r, _), _)| *r == key)
            .map(|(_, e)| e)
    }

    pub fn worker(&self, canonical: &str) -> Option<&WorkerRecord> {
        self.workers.get(self.resolve_alias(canonical))
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.workers.values()
    }

    pub fn identity(&self, token: &str) -> Option<&str> {
        self.identity_tokens
            .get(token)
            .map(|c| self.resolve_alias(c))
    }

    /// Follows merge aliases to the surviving canonical id.
    pub fn resolve_alias<'a>(&'a self, mut canonical: &'a str) -> &'a str {
        while let Some(next) = self.aliases.get(canonical) {
            canonical = next;
        }
        canonical
    }

    pub fn assignment(&self, run_id: &str, worker: &str) -> Option<&Assignment> {
        self.assignments
            .get(&(run_id.to_string(), self.resolve_alias(worker).to_string()))
    }

    pub fn assignments(&self, run_id: &str) -> impl Iterator<Item = (&String, &Assignment)> {
        let key = run_id.to_string();
        let lo = (key.clone(), String::new());
        self.assignments
            .range(lo..)
            .take_while(move |((r, _), _)| *r == key)
            .map(|((_, w), a)| (w, a))
    }

    pub fn judgments(&self, run_id: &str) -> &[Judgment] {
        self.judgments.get(run_id).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn cursor(&self, run_id: &str, block_id: &str) -> u64 {
        self.cursors
            .get(&(run_id.to_string(), block_id.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn audit(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn audit_for(&self, run_id: &str) -> impl Iterator<Item = &AuditEvent> {
        let key = run_id.to_string();
        self.audit
            .iter()
            .filter(move |e| e.run_id.as_deref() == Some(key.as_str()))
    }

    pub fn share(&self, token: &str) -> Option<&ShareToken> {
        self.shares.get(token)
    }

    pub fn meta_value(&self, key: &str) -> Option<&Value> {
        self.meta.get(key)
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        self.meta
            .get(key)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    /// Rejects batches that would break write-once namespaces.
    fn check(&self, muts: &[Mutation]) -> Result<(), StoreError> {
        let mut fresh = std::collections::BTreeSet::new();
        for m in muts {
            match m {
                Mutation::PutCache { entry } => {
                    let key = (entry.run_id.clone(), entry.block_id.clone());
                    if self.cache.contains_key(&key) || !fresh.insert(key) {
                        return Err(StoreError::WriteOnce(format!(
                            "block-cache/{}/{}",
                            entry.run_id, entry.block_id
                        )));
                    }
                }
                Mutation::PutWorkflow { def } => {
                    let id = def.id.clone().unwrap_or_default();
                    if let Some(existing) = self.workflow(&id, def.version) {
                        if existing != def {
                            return Err(StoreError::WriteOnce(format!(
                                "workflows/{id}/{}",
                                def.version
                            )));
                        }
                    }
                }
                Mutation::PutInputs { run_id, .. } if self.inputs.contains_key(run_id) => {
                    return Err(StoreError::WriteOnce(format!("inputs/{run_id}")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn apply(&mut self, m: Mutation) {
        match m {
            Mutation::PutWorkflow { def } => {
                let id = def.id.clone().unwrap_or_default();
                self.workflows.entry(id).or_default().insert(def.version, def);
            }
            Mutation::PutRun { run } => {
                self.runs.insert(run.run_id.clone(), run);
            }
            Mutation::PutInputs { run_id, units } => {
                self.inputs.insert(run_id, units);
            }
            Mutation::PutCache { entry } => {
                self.cache
                    .insert((entry.run_id.clone(), entry.block_id.clone()), entry);
            }
            Mutation::PutWorker { record } => {
                self.workers.insert(record.canonical_id.clone(), record);
            }
            Mutation::LinkIdentity { token, canonical } => {
                self.identity_tokens.insert(token, canonical);
            }
            Mutation::MergeIdentity { absorbed, into } => {
                self.aliases.insert(absorbed, into);
            }
            Mutation::Assign {
                run_id,
                worker,
                assignment,
            } => {
                self.assignments.insert((run_id, worker), assignment);
            }
            Mutation::AppendJudgments {
                run_id,
                block_id,
                judgments,
                cursor,
            } => {
                self.judgments
                    .entry(run_id.clone())
                    .or_default()
                    .extend(judgments);
                self.cursors.insert((run_id, block_id), cursor);
            }
            Mutation::AppendAudit { at, run_id, kind } => {
                let seq = self.audit.len() as u64;
                self.audit.push(AuditEvent {
                    seq,
                    at,
                    run_id,
                    kind,
                });
            }
            Mutation::PutShare { share } => {
                self.shares.insert(share.token.clone(), share);
            }
            Mutation::PutMeta { key, value } => {
                self.meta.insert(key, value);
            }
        }
    }
}

/// An in-memory "disk" that outlives store handles, so tests can crash and
/// reopen without touching the filesystem.
#[derive(Debug, Clone, Default)]
pub struct MemoryDisk(Arc<Mutex<Vec<u8>>>);

impl MemoryDisk {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

#[derive(Debug)]
enum Backend {
    Ephemeral,
    File { file: File, fsync: bool },
    Memory(MemoryDisk),
}

impl Backend {
    fn write(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        match self {
            Backend::Ephemeral => Ok(()),
            Backend::File { file, fsync } => {
                file.write_all(bytes)?;
                if *fsync {
                    file.sync_data()?;
                }
                Ok(())
            }
            Backend::Memory(disk) => {
                disk.0.lock().unwrap().extend_from_slice(bytes);
                Ok(())
            }
        }
    }

    fn persistent(&self) -> bool {
        !matches!(self, Backend::Ephemeral)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// Die before anything reaches the log.
    BeforeWrite,
    /// Die after the batch is durable but before the caller learns about it.
    AfterWrite,
    /// Die halfway through writing the batch.
    TornWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPlan {
    /// 1-based index of the counted commit at which to crash.
    pub at: u64,
    pub kind: FaultKind,
}

#[derive(Debug, Default)]
struct Faults {
    counting: AtomicBool,
    counter: AtomicU64,
    plan: Mutex<Option<FaultPlan>>,
}

#[derive(Debug)]
struct Inner {
    state: State,
    backend: Backend,
    crashed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpenReport {
    pub batches: u64,
    /// Bytes of a torn final record that were discarded.
    pub torn_tail_bytes: usize,
}

#[derive(Debug)]
pub struct Store {
    inner: Mutex<Inner>,
    faults: Faults,
    path: Option<PathBuf>,
    open_report: OpenReport,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PutOnce {
    Ok,
    AlreadyExists { digest: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CasOutcome {
    Ok,
    Conflict,
}

impl Store {
    /// Memory-only store without a log (simulations, tests).
    pub fn ephemeral() -> Self {
        Self::from_parts(State::default(), Backend::Ephemeral, None, OpenReport::default())
    }

    /// Opens (or creates) a log-backed store at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut bytes)?;
        }
        let (state, report, valid_len) = replay(&bytes)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if valid_len < bytes.len() {
            file.set_len(valid_len as u64)?;
        }
        let backend = Backend::File { file, fsync: false };
        Ok(Self::from_parts(state, backend, Some(path), report))
    }

    /// Opens a store over a [`MemoryDisk`], replaying whatever it holds.
    pub fn open_memory(disk: MemoryDisk) -> Result<Self, StoreError> {
        let bytes = disk.bytes();
        let (state, report, valid_len) = replay(&bytes)?;
        disk.0.lock().unwrap().truncate(valid_len);
        Ok(Self::from_parts(state, Backend::Memory(disk), None, report))
    }

    fn from_parts(state: State, backend: Backend, path: Option<PathBuf>, open_report: OpenReport) -> Self {
        Self {
            inner: Mutex::new(Inner {
                state,
                backend,
                crashed: false,
            }),
            faults: Faults::default(),
            path,
            open_report,
        }
    }

    /// Sync every commit to stable storage (file backend only).
    pub fn set_fsync(&self, on: bool) {
        if let Backend::File { fsync, .. } = &mut self.lock().backend {
            *fsync = on;
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn open_report(&self) -> &OpenReport {
        &self.open_report
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Enables counting of commits toward a fault plan.
    pub fn set_fault_counting(&self, on: bool) {
        self.faults.counting.store(on, Ordering::SeqCst);
    }

    pub fn arm_fault(&self, plan: Option<FaultPlan>) {
        *self.faults.plan.lock().unwrap() = plan;
    }

    /// Commits counted so far (persistence boundaries crossed while counting).
    pub fn counted_commits(&self) -> u64 {
        self.faults.counter.load(Ordering::SeqCst)
    }

    pub fn is_crashed(&self) -> bool {
        self.lock().crashed
    }

    pub fn read<R>(&self, f: impl FnOnce(&State) -> R) -> Result<R, StoreError> {
        let inner = self.lock();
        if inner.crashed {
            return Err(StoreError::Crashed);
        }
        Ok(f(&inner.state))
    }

    pub fn commit(&self, muts: Vec<Mutation>) -> Result<(), StoreError> {
        self.update(|_| Ok::<_, StoreError>((muts, ())))
    }

    /// Atomic read-modify-write: `f` sees the current state and returns the
    /// mutations to commit (possibly none) plus a result. Either the whole
    /// batch is applied or none of it.
    pub fn update<R, E>(
        &self,
        f: impl FnOnce(&State) -> Result<(Vec<Mutation>, R), E>,
    ) -> Result<R, E>
    where
        E: From<StoreError>,
    {
        let mut inner = self.lock();
        if inner.crashed {
            return Err(StoreError::Crashed.into());
        }
        let (muts, out) = f(&inner.state)?;
        if muts.is_empty() {
            return Ok(out);
        }
        inner.state.check(&muts)?;
        self.persist(&mut inner, &muts)?;
        for m in muts {
            inner.state.apply(m);
        }
        inner.state.seq += 1;
        Ok(out)
    }

    fn persist(&self, inner: &mut Inner, muts: &[Mutation]) -> Result<(), StoreError> {
        let fault = if self.faults.counting.load(Ordering::SeqCst) {
            let n = self.faults.counter.fetch_add(1, Ordering::SeqCst) + 1;
            self.faults.plan.lock().unwrap().filter(|p| p.at == n)
        } else {
            None
        };
        let line = if inner.backend.persistent() {
            let json = serde_json::to_vec(muts).map_err(|e| StoreError::Io(e.to_string()))?;
            let mut line = Vec::with_capacity(json.len() + 66);
            line.extend_from_slice(sha256_hex(&json).as_bytes());
            line.push(b' ');
            line.extend_from_slice(&json);
            line.push(b'\n');
            line
        } else {
            Vec::new()
        };
        match fault.map(|p| p.kind) {
            None => inner.backend.write(&line),
            Some(FaultKind::BeforeWrite) => {
                inner.crashed = true;
                Err(StoreError::Crashed)
            }
            Some(FaultKind::TornWrite) => {
                let _ = inner.backend.write(&line[..line.len() / 2]);
                inner.crashed = true;
                Err(StoreError::Crashed)
            }
            Some(FaultKind::AfterWrite) => {
                let _ = inner.backend.write(&line);
                inner.crashed = true;
                Err(StoreError::Crashed)
            }
        }
    }

    /// Write-once insert into the block cache: the first writer wins, later
    /// writers learn the stored digest.
    pub fn put_once(&self, entry: CacheEntry) -> Result<PutOnce, StoreError> {
        self.put_once_with(entry, Vec::new())
    }

    /// [`Store::put_once`] plus extra mutations committed atomically with the
    /// winning write.
    pub fn put_once_with(&self, entry: CacheEntry, extra: Vec<Mutation>) -> Result<PutOnce, StoreError> {
        self.update(|s| {
            if let Some(existing) = s.cache(&entry.run_id, &entry.block_id) {
                return Ok((
                    Vec::new(),
                    PutOnce::AlreadyExists {
                        digest: existing.digest.clone(),
                    },
                ));
            }
            let mut muts = vec![Mutation::PutCache { entry }];
            muts.extend(extra);
            Ok((muts, PutOnce::Ok))
        })
    }

    /// Compare-and-set on a worker's assignment for a run. Succeeds only if
    /// the current assignment equals `expected`; `extra` is committed in the
    /// same atomic step.
    pub fn check_and_assign(
        &self,
        run_id: &str,
        worker: &str,
        expected: Option<&Assignment>,
        assignment: Assignment,
        extra: Vec<Mutation>,
    ) -> Result<CasOutcome, StoreError> {
        self.update(|s| {
            if s.assignment(run_id, worker) != expected {
                return Ok((Vec::new(), CasOutcome::Conflict));
            }
            let mut muts = vec![Mutation::Assign {
                run_id: run_id.to_string(),
                worker: s.resolve_alias(worker).to_string(),
                assignment,
            }];
            muts.extend(extra);
            Ok((muts, CasOutcome::Ok))
        })
    }

    /// Appends judgments fetched for `block_id` and moves its cursor, guarded
    /// by the cursor the caller read. A stale cursor means another writer got
    /// there first and nothing is appended.
    pub fn append_judgments(
        &self,
        run_id: &str,
        block_id: &str,
        expected_cursor: u64,
        new_cursor: u64,
        judgments: Vec<Judgment>,
    ) -> Result<CasOutcome, StoreError> {
        self.update(|s| {
            if s.cursor(run_id, block_id) != expected_cursor {
                return Ok((Vec::new(), CasOutcome::Conflict));
            }
            Ok((
                vec![Mutation::AppendJudgments {
                    run_id: run_id.to_string(),
                    block_id: block_id.to_string(),
                    judgments,
                    cursor: new_cursor,
                }],
                CasOutcome::Ok,
            ))
        })
    }

    /// Consistent, repeatable view of everything belonging to one run.
    pub fn snapshot(&self, run_id: &str) -> Result<Snapshot, StoreError> {
        self.read(|s| {
            let run = s
                .run(run_id)
                .cloned()
                .ok_or_else(|| StoreError::NotFound(format!("run {run_id}")))?;
            let workflow = s.workflow(&run.workflow_id, run.workflow_version).cloned();
            let assignments: BTreeMap<String, Assignment> = s
                .assignments(run_id)
                .map(|(w, a)| (w.clone(), a.clone()))
                .collect();
            let workers = s
                .workers()
                .filter(|w| w.participations.iter().any(|p| p.run_id == run_id))
                .map(|w| (w.canonical_id.clone(), w.clone()))
                .collect();
            Ok(Snapshot {
                as_of: s.seq,
                workflow,
                inputs: s.inputs(run_id).map(<[_]>::to_vec).unwrap_or_default(),
                cache: s
                    .cache_entries(run_id)
                    .map(|e| (e.block_id.clone(), e.clone()))
                    .collect(),
                judgments: s.judgments(run_id).to_vec(),
                audit: s.audit_for(run_id).cloned().collect(),
                assignments,
                workers,
                run,
            })
        })?
    }

    pub fn export_run(&self, run_id: &str) -> Result<RunArchive, StoreError> {
        let snap = self.snapshot(run_id)?;
        Ok(RunArchive {
            archive_version: ARCHIVE_VERSION,
            snapshot: snap,
        })
    }

    /// Loads an exported run. Fails if the run id already exists.
    pub fn import_run(&self, archive: RunArchive) -> Result<String, StoreError> {
        let snap = archive.snapshot;
        let run_id = snap.run.run_id.clone();
        self.update(|s| {
            if s.run(&run_id).is_some() {
                return Err(StoreError::WriteOnce(format!("runs/{run_id}")));
            }
            let mut muts = Vec::new();
            if let Some(def) = snap.workflow {
                if s.workflow(&snap.run.workflow_id, snap.run.workflow_version).is_none() {
                    muts.push(Mutation::PutWorkflow { def });
                }
            }
            muts.push(Mutation::PutInputs {
                run_id: run_id.clone(),
                units: snap.inputs,
            });
            for entry in snap.cache.into_values() {
                muts.push(Mutation::PutCache { entry });
            }
            for (worker, assignment) in snap.assignments {
                muts.push(Mutation::Assign {
                    run_id: run_id.clone(),
                    worker,
                    assignment,
                });
            }
            for record in snap.workers.into_values() {
                if s.worker(&record.canonical_id).is_none() {
                    muts.push(Mutation::PutWorker { record });
                }
            }
            muts.push(Mutation::AppendJudgments {
                run_id: run_id.clone(),
                block_id: String::new(),
                judgments: snap.judgments,
                cursor: 0,
            });
            for e in snap.audit {
                muts.push(Mutation::AppendAudit {
                    at: e.at,
                    run_id: e.run_id,
                    kind: e.kind,
                });
            }
            muts.push(Mutation::PutRun { run: snap.run });
            Ok((muts, run_id.clone()))
        })
    }

    /// Checks cross-namespace invariants of the current state.
    pub fn check_integrity(&self) -> Result<Vec<String>, StoreError> {
        self.read(|s| {
            let mut problems = Vec::new();
            for e in s.cache.values() {
                if content_digest(&e.output) != e.digest {
                    problems.push(format!("cache {}/{}: digest mismatch", e.run_id, e.block_id));
                }
            }
            for run in s.runs.values() {
                for (block, exec) in &run.blocks {
                    if exec.status == crate::engine::BlockStatus::Done && s.cache(&run.run_id, block).is_none() {
                        problems.push(format!("run {}: block {block} done without cache entry", run.run_id));
                    }
                }
                if run.status == crate::engine::RunStatus::Completed
                    && run.blocks.keys().any(|b| s.cache(&run.run_id, b).is_none())
                {
                    problems.push(format!("run {}: completed with uncached blocks", run.run_id));
                }
            }
            for (i, e) in s.audit.iter().enumerate() {
                if e.seq != i as u64 {
                    problems.push(format!("audit seq gap at {i}"));
                }
            }
            problems
        })
    }
}

/// Replays log bytes. Returns the state, an open report and the length of the
/// valid prefix.
fn replay(bytes: &[u8]) -> Result<(State, OpenReport, usize), StoreError> {
    let mut state = State::default();
    let mut pos = 0usize;
    let mut line_no = 0usize;
    while pos < bytes.len() {
        line_no += 1;
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            // Incomplete final record.
            break;
        };
        let line = &bytes[pos..pos + nl];
        let is_last = pos + nl + 1 == bytes.len();
        match decode_line(line) {
            Ok(muts) => {
                for m in muts {
                    state.apply(m);
                }
                state.seq += 1;
                pos += nl + 1;
            }
            Err(reason) if is_last => {
                tracing::warn!(line = line_no, %reason, "dropping damaged final log record");
                break;
            }
            Err(reason) => {
                return Err(StoreError::Corrupt {
                    line: line_no,
                    reason,
                })
            }
        }
    }
    let report = OpenReport {
        batches: state.seq,
        torn_tail_bytes: bytes.len() - pos,
    };
    Ok((state, report, pos))
}

fn decode_line(line: &[u8]) -> Result<Vec<Mutation>, String> {
    if line.len() < 65 || line[64] != b' ' {
        return Err("malformed record header".into());
    }
    let (sum, json) = (&line[..64], &line[65..]);
    if sha256_hex(json).as_bytes() != sum {
        return Err("checksum mismatch".into());
    }
    serde_json::from_slice(json).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Snapshot {
    /// Commit sequence number the view reflects.
    pub as_of: u64,
    pub run: RunState,
    pub workflow: Option<WorkflowDef>,
    pub inputs: Vec<DataUnit>,
    pub cache: BTreeMap<String, CacheEntry>,
    pub judgments: Vec<Judgment>,
    pub audit: Vec<AuditEvent>,
    pub assignments: BTreeMap<String, Assignment>,
    pub workers: BTreeMap<String, WorkerRecord>,
}

/// Self-contained export of a run (workflow version, inputs, judgments,
/// audit trail), used for read-only sharing and archival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunArchive {
    pub archive_version: u32,
    #[serde(flatten)]
    pub snapshot: Snapshot,
}
