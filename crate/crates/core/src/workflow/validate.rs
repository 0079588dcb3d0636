use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{BlockKind, Binding, DataUnit, ElementKind, WorkflowDef, SCHEMA_VERSION};
use crate::platform::JUDGMENT_FIELDS;
use crate::transform::TransformRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    SchemaVersion,
    InvalidVersion,
    EmptyWorkflow,
    DuplicateBlock,
    UnknownEdgeEndpoint,
    Cycle,
    PayloadMismatch,
    InvalidVotes,
    NegativeReward,
    MissingPlatform,
    InvalidPaging,
    ChoiceOptions,
    UnresolvedBinding,
    DuplicateGroup,
    MissingGroup,
    UnknownGroup,
    InvalidTransform,
    InvalidPartitionEdge,
    PolicyContradiction,
    InvalidSchedule,
    InvalidQuota,
    InvalidUnit,
    IllegalGold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

impl Violation {
    fn new(code: ViolationCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cycle: {}", .nodes.join(","))]
pub struct CycleError {
    pub nodes: Vec<String>,
}

/// Validates `def` with the builtin transform registry.
pub fn validate_workflow(def: &WorkflowDef, unit_schema: &BTreeSet<String>) -> Vec<Violation> {
    validate_workflow_with(def, unit_schema, &TransformRegistry::with_builtins())
}

/// Collects every violation in `def`; an empty result means the workflow is
/// valid. Bindings of each Do block are resolved against the fields that
/// actually reach it (root blocks see `unit_schema`, downstream blocks see
/// their parents' outputs).
pub fn validate_workflow_with(
    def: &WorkflowDef,
    unit_schema: &BTreeSet<String>,
    transforms: &TransformRegistry,
) -> Vec<Violation> {
    use ViolationCode::*;

    let mut def = def.clone();
    def.normalize();
    let mut out = Vec::new();

    if def.schema_version != SCHEMA_VERSION {
        out.push(Violation::new(
            SchemaVersion,
            format!("unsupported schemaVersion {}", def.schema_version),
        ));
    }
    if def.version < 1 {
        out.push(Violation::new(InvalidVersion, "version must be >= 1"));
    }
    if def.blocks.is_empty() {
        out.push(Violation::new(EmptyWorkflow, "workflow has no blocks"));
    }

    let mut ids = BTreeSet::new();
    for b in &def.blocks {
        if !ids.insert(b.id.as_str()) {
            out.push(Violation::new(DuplicateBlock, format!("duplicate block id {}", b.id)));
        }
    }
    for e in &def.edges {
        for end in [&e.from, &e.to] {
            if !ids.contains(end.as_str()) {
                out.push(Violation::new(
                    UnknownEdgeEndpoint,
                    format!("edge {}->{} references unknown block {end}", e.from, e.to),
                ));
            }
        }
    }

    let mut group_ids = BTreeSet::new();
    for g in &def.groups {
        if !group_ids.insert(g.id.as_str()) {
            out.push(Violation::new(DuplicateGroup, format!("duplicate group id {}", g.id)));
        }
    }

    for b in &def.blocks {
        match (b.kind, &b.do_task, &b.lambda) {
            (BlockKind::Do, Some(task), None) => {
                if task.votes_per_unit < 1 {
                    out.push(Violation::new(
                        InvalidVotes,
                        format!("block {}: votesPerUnit must be >= 1", b.id),
                    ));
                }
                if task.reward_per_assignment < 0 {
                    out.push(Violation::new(
                        NegativeReward,
                        format!("block {}: reward must be >= 0", b.id),
                    ));
                }
                if task.platform.trim().is_empty() {
                    out.push(Violation::new(MissingPlatform, format!("block {}: empty platform", b.id)));
                }
                match &task.group {
                    None => out.push(Violation::new(
                        MissingGroup,
                        format!("block {}: Do block without experiment group", b.id),
                    )),
                    Some(g) if !group_ids.contains(g.as_str()) => out.push(Violation::new(
                        UnknownGroup,
                        format!("block {}: unknown group {g}", b.id),
                    )),
                    Some(_) => {}
                }
                let p = &task.template.paging;
                if p.units_per_page < 1 || p.gold_per_page > p.units_per_page || p.max_pages < 1 {
                    out.push(Violation::new(
                        InvalidPaging,
                        format!(
                            "block {}: paging requires unitsPerPage >= 1, goldPerPage <= unitsPerPage, maxPages >= 1",
                            b.id
                        ),
                    ));
                }
                for (i, el) in task.template.elements.iter().enumerate() {
                    if el.kind.is_choice() && el.options.len() < 2 {
                        out.push(Violation::new(
                            ChoiceOptions,
                            format!("block {}: element {i} ({}) needs at least 2 options", b.id, el.kind.as_str()),
                        ));
                    }
                }
            }
            (BlockKind::Lambda, None, Some(lambda)) => {
                if let Err(e) = transforms.check(&lambda.transform) {
                    out.push(Violation::new(InvalidTransform, format!("block {}: {e}", b.id)));
                }
            }
            _ => out.push(Violation::new(
                PayloadMismatch,
                format!("block {}: exactly one payload matching kind is required", b.id),
            )),
        }
    }

    for e in &def.edges {
        if let Some(key) = &e.partition {
            let partitions = def
                .block(&e.from)
                .and_then(|b| b.lambda.as_ref())
                .and_then(|l| transforms.get(&l.transform.op).map(|op| op.partitions(&l.transform.params)))
                .unwrap_or(false);
            if !partitions {
                out.push(Violation::new(
                    InvalidPartitionEdge,
                    format!("edge {}->{} selects partition {key:?} but {} does not partition", e.from, e.to, e.from),
                ));
            }
        }
    }

    if let Err(reason) = def.policy.validate() {
        out.push(Violation::new(PolicyContradiction, reason));
    }
    if let Some(schedule) = &def.schedule {
        for reason in schedule.validate() {
            out.push(Violation::new(InvalidSchedule, reason));
        }
    }
    if let Some(quotas) = &def.quotas {
        for reason in quotas.validate(&def.group_ids()) {
            out.push(Violation::new(InvalidQuota, reason));
        }
    }

    let endpoints_ok = def
        .edges
        .iter()
        .all(|e| ids.contains(e.from.as_str()) && ids.contains(e.to.as_str()));
    if endpoints_ok {
        match topological_order(&def) {
            Err(cycle) => out.push(Violation::new(Cycle, cycle.to_string())),
            Ok(order) => check_bindings(&def, &order, unit_schema, transforms, &mut out),
        }
    }
    out
}

fn check_bindings(
    def: &WorkflowDef,
    order: &[String],
    unit_schema: &BTreeSet<String>,
    transforms: &TransformRegistry,
    out: &mut Vec<Violation>,
) {
    let judgment_fields: BTreeSet<String> = JUDGMENT_FIELDS.iter().map(|s| s.to_string()).collect();
    let mut produced: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for id in order {
        let block = def.block(id).expect("ordered ids exist");
        let mut inbound = def.inbound(id).peekable();
        let input: BTreeSet<String> = if inbound.peek().is_none() {
            unit_schema.clone()
        } else {
            inbound
                .flat_map(|e| produced.get(e.from.as_str()).cloned().unwrap_or_default())
                .collect()
        };
        let output = match (&block.do_task, &block.lambda) {
            (Some(task), _) => {
                for (i, el) in task.template.elements.iter().enumerate() {
                    if let Some(Binding::Field(f)) = &el.binding {
                        if !input.contains(f) {
                            out.push(Violation::new(
                                ViolationCode::UnresolvedBinding,
                                format!("unresolved binding: block {id} element {i} field {f:?}"),
                            ));
                        }
                    }
                }
                judgment_fields.clone()
            }
            (None, Some(lambda)) => match transforms.get(&lambda.transform.op) {
                Some(op) => op.output_fields(&lambda.transform.params, &input),
                None => input,
            },
            (None, None) => input,
        };
        produced.insert(id.as_str(), output);
    }
}

/// Checks a unit set against a workflow: ids unique, payloads non-empty, gold
/// answers legal for the answer element of every Do block bound to units.
pub fn validate_units(def: &WorkflowDef, units: &[DataUnit]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for u in units {
        if !seen.insert(u.id.as_str()) {
            out.push(Violation::new(ViolationCode::InvalidUnit, format!("duplicate unit id {}", u.id)));
        }
        if u.payload.is_empty() {
            out.push(Violation::new(ViolationCode::InvalidUnit, format!("unit {} has an empty payload", u.id)));
        }
    }
    for (block, task) in def.do_blocks() {
        let Some(answer) = task.template.answer_element() else {
            continue;
        };
        for u in units {
            let Some(gold) = &u.gold else { continue };
            if !gold_is_legal(answer.kind, &answer.options, &gold.expected_answer) {
                out.push(Violation::new(
                    ViolationCode::IllegalGold,
                    format!("unit {}: gold answer is not legal for block {}", u.id, block.id),
                ));
            }
        }
    }
    out
}

fn gold_is_legal(kind: ElementKind, options: &[String], answer: &Value) -> bool {
    let is_option = |v: &Value| v.as_str().is_some_and(|s| options.iter().any(|o| o == s));
    match kind {
        ElementKind::SingleChoice => is_option(answer),
        ElementKind::MultiChoice => answer.as_array().is_some_and(|a| a.iter().all(is_option)),
        _ => !answer.is_null(),
    }
}

/// Kahn's algorithm with the ready set ordered by block id, so the order is a
/// pure function of the graph.
pub fn topological_order(def: &WorkflowDef) -> Result<Vec<String>, CycleError> {
    let mut indegree: BTreeMap<&str, usize> = def.blocks.iter().map(|b| (b.id.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &def.edges {
        if let Some(d) = indegree.get_mut(e.to.as_str()) {
            *d += 1;
        }
        succ.entry(e.from.as_str()).or_default().push(e.to.as_str());
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &next in succ.get(id).map(Vec::as_slice).unwrap_or_default() {
            let d = indegree.get_mut(next).expect("edge endpoint exists");
            *d -= 1;
            if *d == 0 {
                ready.insert(next);
            }
        }
    }
    if order.len() == indegree.len() {
        Ok(order)
    } else {
        Err(CycleError {
            nodes: cyclic_nodes(def),
        })
    }
}

/// Blocks that sit on a cycle (members of a non-trivial strongly connected
/// component or with a self-loop), sorted.
fn cyclic_nodes(def: &WorkflowDef) -> Vec<String> {
    let ids: Vec<&str> = def.blocks.iter().map(|b| b.id.as_str()).collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut adj = vec![Vec::new(); ids.len()];
    let mut self_loop = vec![false; ids.len()];
    for e in &def.edges {
        if let (Some(&a), Some(&b)) = (index.get(e.from.as_str()), index.get(e.to.as_str())) {
            adj[a].push(b);
            self_loop[a] |= a == b;
        }
    }

    struct Tarjan<'a> {
        adj: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        comps: Vec<Vec<usize>>,
    }
    impl Tarjan<'_> {
        fn visit(&mut self, v: usize) {
            self.index[v] = Some(self.next);
            self.low[v] = self.next;
            self.next += 1;
            self.stack.push(v);
            self.on_stack[v] = true;
            for i in 0..self.adj[v].len() {
                let w = self.adj[v][i];
                match self.index[w] {
                    None => {
                        self.visit(w);
                        self.low[v] = self.low[v].min(self.low[w]);
                    }
                    Some(iw) if self.on_stack[w] => self.low[v] = self.low[v].min(iw),
                    Some(_) => {}
                }
            }
            if Some(self.low[v]) == self.index[v] {
                let mut comp = Vec::new();
                while let Some(w) = self.stack.pop() {
                    self.on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                self.comps.push(comp);
            }
        }
    }

    let n = ids.len();
    let mut t = Tarjan {
        adj: &adj,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        comps: Vec::new(),
    };
    for v in 0..n {
        if t.index[v].is_none() {
            t.visit(v);
        }
    }
    let mut nodes: Vec<String> = t
        .comps
        .into_iter()
        .filter(|c| c.len() > 1 || self_loop[c[0]])
        .flatten()
        .map(|i| ids[i].to_string())
        .collect();
    nodes.sort();
    nodes
}
