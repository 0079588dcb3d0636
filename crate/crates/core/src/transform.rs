//! The closed transform vocabulary evaluated by Lambda blocks.
//!
//! New operations register by name in a [`TransformRegistry`]; the builtin
//! set is `filter`, `map-field`, `partition`, `sample`, `aggregate-majority`
//! and `concat`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::workflow::DataUnit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub op: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub params: Map<String, Value>,
}

impl TransformSpec {
    pub fn new(op: &str) -> Self {
        Self {
            op: op.to_string(),
            params: Map::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("unknown transform op {0:?}")]
    UnknownOp(String),
    #[error("invalid parameters for {op}: {reason}")]
    InvalidParams { op: String, reason: String },
    #[error("unknown field {field:?} in unit {unit:?}")]
    UnknownField { field: String, unit: String },
}

/// One output list of a transform. Only `partition` produces keyed lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Partition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub units: Vec<DataUnit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformOutput {
    pub partitions: Vec<Partition>,
}

impl TransformOutput {
    pub fn single(units: Vec<DataUnit>) -> Self {
        Self {
            partitions: vec![Partition { key: None, units }],
        }
    }

    pub fn partition(&self, key: &str) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.key.as_deref() == Some(key))
    }

    /// All partitions concatenated in order.
    pub fn flatten(&self) -> Vec<DataUnit> {
        self.partitions
            .iter()
            .flat_map(|p| p.units.iter().cloned())
            .collect()
    }
}

pub trait Transform: Send + Sync {
    fn name(&self) -> &str;

    /// Checks that `params` are complete for this op.
    fn check(&self, params: &Map<String, Value>) -> Result<(), String>;

    /// Fields present on output records given the input field set.
    fn output_fields(&self, params: &Map<String, Value>, input: &BTreeSet<String>)
        -> BTreeSet<String>;

    /// Whether the op produces keyed partitions that edges may select.
    fn partitions(&self, _params: &Map<String, Value>) -> bool {
        false
    }

    fn apply(
        &self,
        params: &Map<String, Value>,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError>;
}

#[derive(Clone)]
pub struct TransformRegistry {
    ops: BTreeMap<String, Arc<dyn Transform>>,
}

impl fmt::Debug for TransformRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformRegistry")
            .field("ops", &self.ops.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for TransformRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl TransformRegistry {
    pub fn empty() -> Self {
        Self {
            ops: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(Filter));
        reg.register(Arc::new(MapField));
        reg.register(Arc::new(PartitionBy));
        reg.register(Arc::new(Sample));
        reg.register(Arc::new(AggregateMajority));
        reg.register(Arc::new(Concat));
        reg
    }

    pub fn register(&mut self, op: Arc<dyn Transform>) {
        self.ops.insert(op.name().to_string(), op);
    }

    pub fn get(&self, op: &str) -> Option<&Arc<dyn Transform>> {
        self.ops.get(op)
    }

    pub fn check(&self, spec: &TransformSpec) -> Result<(), TransformError> {
        let op = self
            .get(&spec.op)
            .ok_or_else(|| TransformError::UnknownOp(spec.op.clone()))?;
        op.check(&spec.params)
            .map_err(|reason| TransformError::InvalidParams {
                op: spec.op.clone(),
                reason,
            })
    }

    pub fn eval(
        &self,
        spec: &TransformSpec,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError> {
        self.check(spec)?;
        self.ops[&spec.op].apply(&spec.params, input)
    }
}

/// Evaluates `spec` with the builtin registry.
pub fn eval_transform(
    spec: &TransformSpec,
    input: Vec<DataUnit>,
) -> Result<TransformOutput, TransformError> {
    TransformRegistry::with_builtins().eval(spec, input)
}

fn str_param<'a>(params: &'a Map<String, Value>, key: &str) -> Result<&'a str, String> {
    match params.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s),
        Some(_) => Err(format!("{key} must be a non-empty string")),
        None => Err(format!("missing {key}")),
    }
}

fn u64_param(params: &Map<String, Value>, key: &str) -> Result<u64, String> {
    params
        .get(key)
        .ok_or_else(|| format!("missing {key}"))?
        .as_u64()
        .ok_or_else(|| format!("{key} must be a non-negative integer"))
}

fn field<'a>(unit: &'a DataUnit, name: &str) -> Result<&'a Value, TransformError> {
    unit.payload
        .get(name)
        .ok_or_else(|| TransformError::UnknownField {
            field: name.to_string(),
            unit: unit.id.clone(),
        })
}

/// Textual label of a scalar value (strings unquoted).
pub fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

struct Filter;

impl Transform for Filter {
    fn name(&self) -> &str {
        "filter"
    }

    fn check(&self, params: &Map<String, Value>) -> Result<(), String> {
        str_param(params, "field")?;
        params
            .get("equals")
            .map(|_| ())
            .ok_or_else(|| "missing equals".to_string())
    }

    fn output_fields(&self, _: &Map<String, Value>, input: &BTreeSet<String>) -> BTreeSet<String> {
        input.clone()
    }

    fn apply(
        &self,
        params: &Map<String, Value>,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError> {
        let name = params["field"].as_str().unwrap_or_default();
        let expected = &params["equals"];
        let mut kept = Vec::new();
        for unit in input {
            if field(&unit, name)? == expected {
                kept.push(unit);
            }
        }
        Ok(TransformOutput::single(kept))
    }
}

struct MapField;

impl Transform for MapField {
    fn name(&self) -> &str {
        "map-field"
    }

    fn check(&self, params: &Map<String, Value>) -> Result<(), String> {
        str_param(params, "from")?;
        str_param(params, "to")?;
        Ok(())
    }

    fn output_fields(&self, params: &Map<String, Value>, input: &BTreeSet<String>) -> BTreeSet<String> {
        let mut out = input.clone();
        if let (Some(from), Some(to)) = (params["from"].as_str(), params["to"].as_str()) {
            out.remove(from);
            out.insert(to.to_string());
        }
        out
    }

    fn apply(
        &self,
        params: &Map<String, Value>,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError> {
        let from = params["from"].as_str().unwrap_or_default();
        let to = params["to"].as_str().unwrap_or_default().to_string();
        let mut out = Vec::with_capacity(input.len());
        for mut unit in input {
            let v = unit
                .payload
                .remove(from)
                .ok_or_else(|| TransformError::UnknownField {
                    field: from.to_string(),
                    unit: unit.id.clone(),
                })?;
            unit.payload.insert(to.clone(), v);
            out.push(unit);
        }
        Ok(TransformOutput::single(out))
    }
}

struct PartitionBy;

impl Transform for PartitionBy {
    fn name(&self) -> &str {
        "partition"
    }

    fn check(&self, params: &Map<String, Value>) -> Result<(), String> {
        str_param(params, "key").map(|_| ())
    }

    fn output_fields(&self, _: &Map<String, Value>, input: &BTreeSet<String>) -> BTreeSet<String> {
        input.clone()
    }

    fn partitions(&self, _params: &Map<String, Value>) -> bool {
        true
    }

    fn apply(
        &self,
        params: &Map<String, Value>,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError> {
        let key = params["key"].as_str().unwrap_or_default();
        let mut parts: BTreeMap<String, Vec<DataUnit>> = BTreeMap::new();
        for unit in input {
            let label = value_label(field(&unit, key)?);
            parts.entry(label).or_default().push(unit);
        }
        Ok(TransformOutput {
            partitions: parts
                .into_iter()
                .map(|(k, units)| Partition { key: Some(k), units })
                .collect(),
        })
    }
}

struct Sample;

impl Transform for Sample {
    fn name(&self) -> &str {
        "sample"
    }

    fn check(&self, params: &Map<String, Value>) -> Result<(), String> {
        u64_param(params, "n")?;
        u64_param(params, "seed")?;
        Ok(())
    }

    fn output_fields(&self, _: &Map<String, Value>, input: &BTreeSet<String>) -> BTreeSet<String> {
        input.clone()
    }

    fn apply(
        &self,
        params: &Map<String, Value>,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError> {
        let n = params["n"].as_u64().unwrap_or_default() as usize;
        let seed = params["seed"].as_u64().unwrap_or_default();
        if n >= input.len() {
            return Ok(TransformOutput::single(input));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, input.len(), n).into_vec();
        picked.sort_unstable();
        let mut slots: Vec<Option<DataUnit>> = input.into_iter().map(Some).collect();
        let out = picked
            .into_iter()
            .filter_map(|i| slots[i].take())
            .collect();
        Ok(TransformOutput::single(out))
    }
}

struct AggregateMajority;

impl AggregateMajority {
    fn group_by(params: &Map<String, Value>) -> &str {
        params
            .get("groupBy")
            .and_then(Value::as_str)
            .unwrap_or("unitId")
    }
}

impl Transform for AggregateMajority {
    fn name(&self) -> &str {
        "aggregate-majority"
    }

    fn check(&self, params: &Map<String, Value>) -> Result<(), String> {
        str_param(params, "answerField")?;
        if params.contains_key("groupBy") {
            str_param(params, "groupBy")?;
        }
        Ok(())
    }

    fn output_fields(&self, params: &Map<String, Value>, _: &BTreeSet<String>) -> BTreeSet<String> {
        let answer = params["answerField"].as_str().unwrap_or("answer");
        [Self::group_by(params), answer, "votes", "total", "tie"]
            .into_iter()
            .map(String::from)
            .collect()
    }

    /// Majority label per group. Records explicitly marked `valid: false` do
    /// not vote. Ties go to the lexicographically smallest label and set
    /// `tie: true` on the output record.
    fn apply(
        &self,
        params: &Map<String, Value>,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError> {
        let answer_field = params["answerField"].as_str().unwrap_or_default();
        let group_by = Self::group_by(params);
        let mut order: Vec<String> = Vec::new();
        let mut tallies: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for unit in &input {
            if unit.payload.get("valid") == Some(&Value::Bool(false)) {
                continue;
            }
            let key = value_label(field(unit, group_by)?);
            let label = value_label(field(unit, answer_field)?);
            let tally = tallies.entry(key.clone()).or_insert_with(|| {
                order.push(key.clone());
                BTreeMap::new()
            });
            *tally.entry(label).or_default() += 1;
        }
        let mut out = Vec::with_capacity(order.len());
        for key in order {
            let tally = &tallies[&key];
            let best = tally.values().copied().max().unwrap_or(0);
            let mut winners = tally.iter().filter(|(_, &c)| c == best).map(|(l, _)| l);
            // BTreeMap iteration is label-ordered, so the first winner is the
            // lexicographically smallest.
            let label = winners.next().cloned().unwrap_or_default();
            let tie = winners.next().is_some();
            let total: u64 = tally.values().sum();
            out.push(
                DataUnit::new(key.clone())
                    .with(group_by, key)
                    .with(answer_field, label)
                    .with("votes", best)
                    .with("total", total)
                    .with("tie", tie),
            );
        }
        Ok(TransformOutput::single(out))
    }
}

struct Concat;

impl Transform for Concat {
    fn name(&self) -> &str {
        "concat"
    }

    fn check(&self, _: &Map<String, Value>) -> Result<(), String> {
        Ok(())
    }

    fn output_fields(&self, _: &Map<String, Value>, input: &BTreeSet<String>) -> BTreeSet<String> {
        input.clone()
    }

    fn apply(
        &self,
        _: &Map<String, Value>,
        input: Vec<DataUnit>,
    ) -> Result<TransformOutput, TransformError> {
        Ok(TransformOutput::single(input))
    }
}
