//! Worker identities, eligibility policy, condition assignment and
//! demographic quotas.

mod assign;
mod manager;
mod quota;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use assign::BalancedAssigner;
pub use manager::{apply_judgment, quota_key, EligibilityRequest, WorkerError, WorkerManager};
pub use quota::{
    check_quota, rotation_mapping, CountryBucket, Enforcement, QuotaCheck, QuotaConfig, QuotaState, REST_BUCKET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    BetweenSubjects,
    WithinSubjects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recurrence {
    BlockAllRepeats,
    AllowSameCondition,
    AllowAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossoverRule {
    Block,
    Allow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EligibilityPolicy {
    pub design: Design,
    pub recurrence: Recurrence,
    pub crossover: CrossoverRule,
    #[serde(default = "default_message")]
    pub message_on_block: String,
}

fn default_message() -> String {
    "You are not eligible for this task. Thank you for your interest.".to_string()
}

impl Default for EligibilityPolicy {
    fn default() -> Self {
        Self {
            design: Design::BetweenSubjects,
            recurrence: Recurrence::BlockAllRepeats,
            crossover: CrossoverRule::Block,
            message_on_block: default_message(),
        }
    }
}

impl EligibilityPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.design == Design::BetweenSubjects && self.crossover == CrossoverRule::Allow {
            return Err("between-subjects design cannot allow condition crossover".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Proceed,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    NewAssignment,
    ReturningSameAllowed,
    ReturningCrossoverAllowed,
    RepeatBlocked,
    CrossoverBlocked,
    QuotaExhausted,
    Untrusted,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::NewAssignment => "new-assignment",
            Reason::ReturningSameAllowed => "returning-same-allowed",
            Reason::ReturningCrossoverAllowed => "returning-crossover-allowed",
            Reason::RepeatBlocked => "repeat-blocked",
            Reason::CrossoverBlocked => "crossover-blocked",
            Reason::QuotaExhausted => "quota-exhausted",
            Reason::Untrusted => "untrusted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssignmentDecision {
    pub canonical_id: String,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Do block the worker should work on (may differ from the landing block
    /// when a new worker is routed to their assigned condition).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<String>,
    pub reason: Reason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Visit index within the run (0 for the first visit).
    pub session: u32,
    /// Whether the visit complies with the policy. Differs from `action` only
    /// in observe mode, where nothing is blocked.
    pub compliant: bool,
}

impl AssignmentDecision {
    pub fn is_proceed(&self) -> bool {
        self.action == Action::Proceed
    }
}

/// A worker's standing assignment within one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Assignment {
    pub group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<String>,
    pub decided_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    /// Visits granted so far (the first one included).
    pub visits: u32,
    /// Reason given for the latest granted visit.
    pub reason: Reason,
    /// Recorded without enforcement (uncontrolled runs).
    #[serde(default)]
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Participation {
    pub run_id: String,
    pub group_id: String,
    pub block_id: String,
    pub session: u32,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkerRecord {
    pub canonical_id: String,
    pub country: String,
    pub first_seen: DateTime<Utc>,
    pub last_seen: DateTime<Utc>,
    #[serde(default)]
    pub participations: Vec<Participation>,
    pub gold_correct: u32,
    pub gold_total: u32,
    pub trusted: bool,
}

impl WorkerRecord {
    pub fn new(canonical_id: &str, country: &str, at: DateTime<Utc>) -> Self {
        Self {
            canonical_id: canonical_id.to_string(),
            country: country.to_string(),
            first_seen: at,
            last_seen: at,
            participations: Vec::new(),
            gold_correct: 0,
            gold_total: 0,
            trusted: true,
        }
    }

    /// Records a gold answer and recomputes trust.
    pub fn record_gold(&mut self, correct: bool, trust: &TrustConfig) {
        self.gold_total += 1;
        if correct {
            self.gold_correct += 1;
        }
        self.trusted = trust.is_trusted(self.gold_correct, self.gold_total);
    }

    /// Appends a participation unless this (run, block, session) is already
    /// recorded. Returns whether it was new.
    pub fn participate(&mut self, p: Participation) -> bool {
        let seen = self
            .participations
            .iter()
            .any(|q| q.run_id == p.run_id && q.block_id == p.block_id && q.session == p.session);
        if !seen {
            self.participations.push(p);
        }
        !seen
    }

    /// Folds another record (an identity merged into this one) in.
    pub fn absorb(&mut self, other: &WorkerRecord, trust: &TrustConfig) {
        self.first_seen = self.first_seen.min(other.first_seen);
        self.last_seen = self.last_seen.max(other.last_seen);
        for p in &other.participations {
            self.participate(p.clone());
        }
        self.participations.sort_by(|a, b| a.at.cmp(&b.at));
        self.gold_correct += other.gold_correct;
        self.gold_total += other.gold_total;
        self.trusted = trust.is_trusted(self.gold_correct, self.gold_total);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrustConfig {
    pub warmup: u32,
    pub threshold: f64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            threshold: 0.7,
        }
    }
}

impl TrustConfig {
    pub fn is_trusted(&self, correct: u32, total: u32) -> bool {
        total < self.warmup || f64::from(correct) / f64::from(total) >= self.threshold
    }
}

/// Run-level switches for the experimental controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Toggles {
    #[serde(default = "yes")]
    pub eligibility: bool,
    #[serde(default = "yes")]
    pub quotas: bool,
    #[serde(default = "yes")]
    pub schedule: bool,
}

fn yes() -> bool {
    true
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Toggles {
    pub fn all_on() -> Self {
        Self {
            eligibility: true,
            quotas: true,
            schedule: true,
        }
    }

    pub fn all_off() -> Self {
        Self {
            eligibility: false,
            quotas: false,
            schedule: false,
        }
    }
}

pub(crate) fn fingerprint_token(fp: &str) -> String {
    format!("f:{fp}")
}

pub(crate) fn platform_token(pid: &str) -> String {
    format!("p:{pid}")
}

/// Canonical id minted for a fingerprint seen for the first time.
pub fn canonical_for(fingerprint: &str) -> String {
    let h = crate::digest::sha256_hex(fingerprint.as_bytes());
    format!("w-{}", &h[..16])
}

/// Group kinds (e.g. base / good / bad) keyed by group id, derived from a
/// map of level value to kind: a group takes the kind of the first level
/// value (or its own id) found in the map.
pub fn group_kinds(
    groups: &[crate::workflow::ExperimentGroup],
    kinds: &BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for g in groups {
        let kind = kinds
            .get(&g.id)
            .or_else(|| g.levels.values().find_map(|v| kinds.get(v)));
        if let Some(k) = kind {
            out.insert(g.id.clone(), k.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trust_rule() {
        let t = TrustConfig::default();
        assert!(t.is_trusted(0, 2));
        assert!(!t.is_trusted(2, 4));
        assert!(t.is_trusted(3, 4));
        assert!(t.is_trusted(7, 10));
    }

    #[test]
    fn contradictory_policy_rejected() {
        let mut p = EligibilityPolicy::default();
        assert!(p.validate().is_ok());
        p.crossover = CrossoverRule::Allow;
        assert!(p.validate().is_err());
        p.design = Design::WithinSubjects;
        assert!(p.validate().is_ok());
    }

    #[test]
    fn gold_updates_counters_and_trust() {
        let t = TrustConfig::default();
        let mut r = WorkerRecord::new("w", "VE", Utc::now());
        r.record_gold(true, &t);
        assert_eq!((r.gold_correct, r.gold_total), (1, 1));
        r.record_gold(false, &t);
        r.record_gold(true, &t);
        r.record_gold(false, &t);
        assert_eq!((r.gold_correct, r.gold_total), (2, 4));
        assert!(!r.trusted);
    }

    #[test]
    fn reason_codes_serialize_kebab() {
        assert_eq!(serde_json::to_string(&Reason::RepeatBlocked).unwrap(), "\"repeat-blocked\"");
        assert_eq!(Reason::QuotaExhausted.as_str(), "quota-exhausted");
    }
}
