use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BlockDef, DoBlock, ExperimentGroup};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
}

impl Factor {
    pub fn new(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            levels: levels.iter().map(|l| l.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FactorialDesign {
    pub factors: Vec<Factor>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FactorialError {
    #[error("no factors")]
    NoFactors,
    #[error("factor {0} has no levels")]
    EmptyFactor(String),
    #[error("duplicate factor {0}")]
    DuplicateFactor(String),
    #[error("naming pattern references unknown factor {0}")]
    UnknownPlaceholder(String),
    #[error("naming pattern maps two configurations to group {0}")]
    NonInjective(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub blocks: Vec<BlockDef>,
    pub groups: Vec<ExperimentGroup>,
}

/// One Do block (and one group) per cell of the Cartesian product of factor
/// levels, last factor varying fastest.
///
/// `group_naming` is a pattern with `{factor}` placeholders; `None` joins all
/// levels with `-`. Blocks are named `do-<group>` and copy `proto` apart from
/// the group.
pub fn expand_factorial(
    design: &FactorialDesign,
    proto: &DoBlock,
    group_naming: Option<&str>,
) -> Result<Expansion, FactorialError> {
    if design.factors.is_empty() {
        return Err(FactorialError::NoFactors);
    }
    let mut names = BTreeSet::new();
    for f in &design.factors {
        if f.levels.is_empty() {
            return Err(FactorialError::EmptyFactor(f.name.clone()));
        }
        if !names.insert(f.name.as_str()) {
            return Err(FactorialError::DuplicateFactor(f.name.clone()));
        }
    }
    if let Some(pattern) = group_naming {
        for placeholder in placeholders(pattern) {
            if !names.contains(placeholder) {
                return Err(FactorialError::UnknownPlaceholder(placeholder.to_string()));
            }
        }
    }

    let total: usize = design.factors.iter().map(|f| f.levels.len()).product();
    let mut blocks = Vec::with_capacity(total);
    let mut groups = Vec::with_capacity(total);
    let mut seen = BTreeSet::new();
    let mut digits = vec![0usize; design.factors.len()];
    for _ in 0..total {
        let levels: BTreeMap<String, String> = design
            .factors
            .iter()
            .zip(&digits)
            .map(|(f, &d)| (f.name.clone(), f.levels[d].clone()))
            .collect();
        let id = match group_naming {
            Some(pattern) => render(pattern, &levels),
            None => design
                .factors
                .iter()
                .zip(&digits)
                .map(|(f, &d)| f.levels[d].as_str())
                .collect::<Vec<_>>()
                .join("-"),
        };
        if !seen.insert(id.clone()) {
            return Err(FactorialError::NonInjective(id));
        }
        let mut task = proto.clone();
        task.group = Some(id.clone());
        blocks.push(BlockDef::new_do(format!("do-{id}"), task));
        groups.push(ExperimentGroup {
            id: id.clone(),
            label: id,
            color_hint: None,
            levels,
        });

        for (pos, f) in design.factors.iter().enumerate().rev() {
            digits[pos] += 1;
            if digits[pos] < f.levels.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
    Ok(Expansion { blocks, groups })
}

fn placeholders(pattern: &str) -> impl Iterator<Item = &str> {
    pattern
        .split('{')
        .skip(1)
        .filter_map(|chunk| chunk.split_once('}').map(|(name, _)| name))
}

fn render(pattern: &str, levels: &BTreeMap<String, String>) -> String {
    let mut out = pattern.to_string();
    for (name, level) in levels {
        out = out.replace(&format!("{{{name}}}"), level);
    }
    out
}
