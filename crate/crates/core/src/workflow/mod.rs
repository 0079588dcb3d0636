//! Experiment workflow graphs: blocks, edges, groups, task templates.
//!
//! Workflow files are strict JSON documents (`schemaVersion` = 1); unknown
//! fields are rejected so that typos in experiment configs surface at load
//! time instead of silently changing the experiment.

mod factorial;
mod paging;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use factorial::{expand_factorial, Expansion, Factor, FactorialDesign, FactorialError};
pub use paging::{build_page, PagePlan};
pub use validate::{
    topological_order, validate_units, validate_workflow, validate_workflow_with, CycleError,
    Violation,
    ViolationCode,
};

use crate::scheduler::Schedule;
use crate::transform::TransformSpec;
use crate::worker::{EligibilityPolicy, QuotaConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Group id auto-created for Do blocks of single-condition workflows.
pub const DEFAULT_GROUP: &str = "default";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("malformed workflow document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schemaVersion {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct WorkflowDef {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default = "first_version")]
    pub version: u32,
    pub name: String,
    pub blocks: Vec<BlockDef>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub groups: Vec<ExperimentGroup>,
    pub policy: EligibilityPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quotas: Option<QuotaConfig>,
    /// Canvas layout hints; never interpreted by the orchestrator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<Display>,
}

fn first_version() -> u32 {
    1
}

impl WorkflowDef {
    pub fn from_json(text: &str) -> Result<Self, WorkflowError> {
        let def: WorkflowDef = serde_json::from_str(text)?;
        if def.schema_version != SCHEMA_VERSION {
            return Err(WorkflowError::SchemaVersion(def.schema_version));
        }
        Ok(def)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("workflow serializes")
    }

    pub fn block(&self, id: &str) -> Option<&BlockDef> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn group_of(&self, block_id: &str) -> Option<&str> {
        self.block(block_id)?.do_task.as_ref()?.group.as_deref()
    }

    pub fn do_blocks(&self) -> impl Iterator<Item = (&BlockDef, &DoBlock)> {
        self.blocks
            .iter()
            .filter_map(|b| b.do_task.as_ref().map(|d| (b, d)))
    }

    /// Inbound edges of `block_id`, in declaration order.
    pub fn inbound(&self, block_id: &str) -> impl Iterator<Item = &Edge> {
        let id = block_id.to_string();
        self.edges.iter().filter(move |e| e.to == id)
    }

    /// Auto-creates the default group when the workflow declares none and
    /// attaches every group-less Do block to it.
    pub fn normalize(&mut self) {
        let groupless = self
            .blocks
            .iter()
            .any(|b| matches!(&b.do_task, Some(d) if d.group.is_none()));
        if self.groups.is_empty() && groupless {
            self.groups.push(ExperimentGroup {
                id: DEFAULT_GROUP.to_string(),
                label: DEFAULT_GROUP.to_string(),
                color_hint: None,
                levels: BTreeMap::new(),
            });
            for block in &mut self.blocks {
                if let Some(d) = &mut block.do_task {
                    d.group.get_or_insert_with(|| DEFAULT_GROUP.to_string());
                }
            }
        }
    }

    pub fn group_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.groups.iter().map(|g| g.id.clone()).collect();
        ids.sort();
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Do,
    Lambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BlockDef {
    pub id: String,
    pub kind: BlockKind,
    #[serde(rename = "do", default, skip_serializing_if = "Option::is_none")]
    pub do_task: Option<DoBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaBlock>,
}

impl BlockDef {
    pub fn new_do(id: impl Into<String>, task: DoBlock) -> Self {
        Self {
            id: id.into(),
            kind: BlockKind::Do,
            do_task: Some(task),
            lambda: None,
        }
    }

    pub fn new_lambda(id: impl Into<String>, transform: TransformSpec) -> Self {
        Self {
            id: id.into(),
            kind: BlockKind::Lambda,
            do_task: None,
            lambda: Some(LambdaBlock { transform }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DoBlock {
    pub template: TaskTemplate,
    /// Adapter id the task is published through (`sim`, `file`, ...).
    pub platform: String,
    /// Currency minor units (cents).
    pub reward_per_assignment: i64,
    pub votes_per_unit: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LambdaBlock {
    pub transform: TransformSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Edge {
    pub from: String,
    pub to: String,
    /// Selects one output partition of a partitioning Lambda.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
}

impl Edge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            partition: None,
        }
    }

    pub fn with_partition(mut self, key: impl Into<String>) -> Self {
        self.partition = Some(key.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentGroup {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_hint: Option<String>,
    /// Factor levels this group stands for (filled by factorial expansion).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub levels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Display {
    #[serde(default)]
    pub positions: BTreeMap<String, Position>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TaskTemplate {
    pub title: String,
    #[serde(default)]
    pub instructions: String,
    pub elements: Vec<UiElement>,
    pub paging: Paging,
}

impl TaskTemplate {
    /// The element whose value is the worker's answer: the first choice
    /// element, else the first input element.
    pub fn answer_element(&self) -> Option<&UiElement> {
        self.elements
            .iter()
            .find(|e| e.kind.is_choice())
            .or_else(|| self.elements.iter().find(|e| e.kind.is_input()))
    }

    pub fn bound_fields(&self) -> impl Iterator<Item = &str> {
        self.elements.iter().filter_map(|e| match &e.binding {
            Some(Binding::Field(f)) => Some(f.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Paging {
    pub units_per_page: u32,
    pub gold_per_page: u32,
    #[serde(default)]
    pub first_page_all_gold: bool,
    pub max_pages: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct UiElement {
    pub kind: ElementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<Binding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default)]
    pub required: bool,
}

impl UiElement {
    pub fn text(field: &str) -> Self {
        Self {
            kind: ElementKind::Text,
            binding: Some(Binding::Field(field.to_string())),
            options: vec![],
            required: false,
        }
    }

    pub fn single_choice(options: &[&str]) -> Self {
        Self {
            kind: ElementKind::SingleChoice,
            binding: None,
            options: options.iter().map(|s| s.to_string()).collect(),
            required: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementKind {
    Text,
    Image,
    TextInput,
    SingleChoice,
    MultiChoice,
    HighlightableText,
    HighlightableImage,
}

impl ElementKind {
    pub const ALL: [ElementKind; 7] = [
        ElementKind::Text,
        ElementKind::Image,
        ElementKind::TextInput,
        ElementKind::SingleChoice,
        ElementKind::MultiChoice,
        ElementKind::HighlightableText,
        ElementKind::HighlightableImage,
    ];

    pub fn is_choice(self) -> bool {
        matches!(self, ElementKind::SingleChoice | ElementKind::MultiChoice)
    }

    pub fn is_input(self) -> bool {
        !matches!(self, ElementKind::Text | ElementKind::Image)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Text => "text",
            ElementKind::Image => "image",
            ElementKind::TextInput => "text-input",
            ElementKind::SingleChoice => "single-choice",
            ElementKind::MultiChoice => "multi-choice",
            ElementKind::HighlightableText => "highlightable-text",
            ElementKind::HighlightableImage => "highlightable-image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binding {
    Field(String),
    Literal(String),
}

/// A unit of work (document, image, ...) or a derived record flowing between
/// blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DataUnit {
    pub id: String,
    pub payload: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Gold>,
}

impl DataUnit {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            payload: BTreeMap::new(),
            gold: None,
        }
    }

    pub fn with(mut self, field: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(field.to_string(), value.into());
        self
    }

    pub fn with_gold(mut self, answer: impl Into<Value>) -> Self {
        self.gold = Some(Gold {
            expected_answer: answer.into(),
            explanation: None,
        });
        self
    }

    pub fn is_gold(&self) -> bool {
        self.gold.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Gold {
    pub expected_answer: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

/// Field names available across a unit set (union of payload keys).
pub fn unit_schema(units: &[DataUnit]) -> BTreeSet<String> {
    units
        .iter()
        .flat_map(|u| u.payload.keys().cloned())
        .collect()
}
