//! Crowd platform integration: the adapter contract, template translation,
//! a file-backed offline adapter and the simulated platform.

mod file;
pub mod sim;
mod translate;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::workflow::{DataUnit, ElementKind, ExperimentGroup};

pub use file::FileAdapter;
pub use translate::{hook_token, translate_template, verify_hook_token, HookInfo, TaskPayload};

/// Fields of a judgment record as seen by downstream blocks.
pub const JUDGMENT_FIELDS: &[&str] = &[
    "unitId",
    "workerId",
    "groupId",
    "blockId",
    "answer",
    "decisionTime",
    "submittedAt",
    "isGold",
    "goldCorrect",
    "valid",
    "country",
    "session",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatformError {
    #[error("unknown adapter {0}")]
    UnknownAdapter(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unsupported element {element} on adapter {adapter}")]
    UnsupportedElement { adapter: String, element: String },
    #[error("platform unavailable: {0}")]
    Unavailable(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for PlatformError {
    fn from(e: std::io::Error) -> Self {
        PlatformError::Io(e.to_string())
    }
}

/// One worker's answer to one unit, after identity resolution and trust
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Judgment {
    pub unit_id: String,
    pub worker_id: String,
    pub group_id: String,
    pub block_id: String,
    pub answer: Value,
    /// Seconds.
    pub decision_time: f64,
    pub submitted_at: DateTime<Utc>,
    pub is_gold: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_correct: Option<bool>,
    pub valid: bool,
    pub country: String,
    pub session: u32,
}

impl Judgment {
    /// The judgment as a data unit for transforms and downstream blocks.
    pub fn to_record(&self, index: usize) -> DataUnit {
        let mut payload = match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m.into_iter().collect::<BTreeMap<String, Value>>(),
            _ => BTreeMap::new(),
        };
        payload.entry("goldCorrect".to_string()).or_insert(Value::Null);
        DataUnit {
            id: format!("{}#{index}", self.unit_id),
            payload,
            gold: None,
        }
    }
}

/// Raw contribution as delivered by a platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Submission {
    pub unit_id: String,
    pub worker_id: String,
    pub fingerprint: String,
    pub answer: Value,
    pub decision_time_ms: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    /// Visit index, when the platform knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskHandle {
    pub adapter_id: String,
    pub platform_task_id: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskState {
    Active,
    Paused,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskProgress {
    pub state: TaskState,
    pub submissions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Capabilities {
    pub elements: BTreeSet<ElementKind>,
    /// Whether task pages call the submit gate for every judgment. Adapters
    /// without it have quota counting done at ingestion.
    pub live_gate: bool,
}

impl Capabilities {
    pub fn all(live_gate: bool) -> Self {
        Self {
            elements: ElementKind::ALL.iter().copied().collect(),
            live_gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PublishRequest {
    pub run_id: String,
    pub block_id: String,
    pub group: Option<ExperimentGroup>,
    pub payload: TaskPayload,
    pub units: Vec<DataUnit>,
    pub votes_per_unit: u32,
    pub reward_per_assignment: i64,
    pub idempotency_token: String,
}

/// Contract every crowd platform adapter implements. Implementations must be
/// safe for concurrent use; the engine keeps at most one call in flight per
/// task handle.
pub trait Adapter: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    /// Idempotent under the same token: a repeated publish returns the
    /// original handle and creates nothing.
    fn publish(&self, request: &PublishRequest) -> Result<TaskHandle, PlatformError>;
    fn status(&self, handle: &TaskHandle) -> Result<TaskProgress, PlatformError>;
    fn pause(&self, handle: &TaskHandle) -> Result<(), PlatformError>;
    fn resume(&self, handle: &TaskHandle) -> Result<(), PlatformError>;
    /// Submissions from position `since` on, and the cursor to continue from.
    fn fetch_judgments(&self, handle: &TaskHandle, since: u64) -> Result<(Vec<Submission>, u64), PlatformError>;
    fn cancel(&self, handle: &TaskHandle) -> Result<(), PlatformError>;
    fn worker_country(&self, platform_worker_id: &str) -> Result<Option<String>, PlatformError>;
}

/// Adapters by id. New platforms register here.
#[derive(Clone, Default)]
pub struct AdapterRegistry {
    adapters: Arc<RwLock<BTreeMap<String, Arc<dyn Adapter>>>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, adapter: Arc<dyn Adapter>) {
        self.adapters
            .write()
            .unwrap()
            .insert(adapter.id().to_string(), adapter);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Adapter>, PlatformError> {
        self.adapters
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| PlatformError::UnknownAdapter(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.adapters.read().unwrap().keys().cloned().collect()
    }
}

/// A worker opening a task page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageLoad {
    pub platform_task_id: String,
    pub platform_worker_id: String,
    pub fingerprint: String,
    pub country: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookVerdict {
    /// Work on `platform_task_id` (possibly another task than the one
    /// loaded); `session` numbers the worker's visits in the run.
    Proceed { platform_task_id: String, session: u32 },
    Block { reason: String },
}

/// A single answer about to be submitted from a task page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitAttempt {
    pub platform_task_id: String,
    pub platform_worker_id: String,
    pub fingerprint: String,
    pub country: String,
    pub at: DateTime<Utc>,
}

/// Callbacks a live task page makes into the orchestrator.
pub trait TaskPageHook {
    fn page_load(&self, load: &PageLoad) -> HookVerdict;
    fn submit(&self, attempt: &SubmitAttempt) -> bool;
}

/// Hook that lets everyone through; used when a platform runs without an
/// orchestrator attached.
pub struct OpenHook;

impl TaskPageHook for OpenHook {
    fn page_load(&self, load: &PageLoad) -> HookVerdict {
        HookVerdict::Proceed {
            platform_task_id: load.platform_task_id.clone(),
            session: 0,
        }
    }

    fn submit(&self, _: &SubmitAttempt) -> bool {
        true
    }
}
