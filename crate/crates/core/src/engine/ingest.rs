use std::collections::BTreeMap;

use serde_json::Value;

use super::{effective_schedule, sched_key, Engine, EngineError, RunState};
use crate::platform::{Adapter, Judgment, TaskHandle};
use crate::scheduler::SchedulerState;
use crate::store::{AuditKind, Mutation};
use crate::worker::{
    apply_judgment, fingerprint_token, quota_key, Assignment, EligibilityPolicy, QuotaState, Reason, Recurrence,
    CrossoverRule, WorkerRecord,
};
use crate::workflow::{BlockDef, DataUnit, WorkflowDef};

/// Whether visit `session` in `group` of a worker first assigned to
/// `assigned` is allowed by the policy.
pub(crate) fn policy_permits(policy: &EligibilityPolicy, assigned: &str, group: &str, session: u32) -> bool {
    if session == 0 {
        return true;
    }
    match policy.recurrence {
        Recurrence::BlockAllRepeats => false,
        Recurrence::AllowSameCondition => assigned == group,
        Recurrence::AllowAll => assigned == group || policy.crossover == CrossoverRule::Allow,
    }
}

fn answers_match(given: &Value, expected: &Value) -> bool {
    match (given, expected) {
        (Value::Array(a), Value::Array(b)) => {
            let mut a: Vec<String> = a.iter().map(Value::to_string).collect();
            let mut b: Vec<String> = b.iter().map(Value::to_string).collect();
            a.sort();
            b.sort();
            a == b
        }
        _ => given == expected,
    }
}

impl Engine {
    /// Pulls new submissions for a Do block and appends them, resolved into
    /// judgments, together with the cursor and the affected worker records in
    /// one commit.
    pub(super) fn ingest(
        &self,
        run: &RunState,
        def: &WorkflowDef,
        block: &BlockDef,
        handle: &TaskHandle,
        adapter: &dyn Adapter,
    ) -> Result<usize, EngineError> {
        let run_id = run.run_id.as_str();
        let cursor = self.store.read(|s| s.cursor(run_id, &block.id))?;
        let (subs, next) = adapter.fetch_judgments(handle, cursor)?;
        if subs.is_empty() && next == cursor {
            return Ok(0);
        }
        let mut countries = BTreeMap::new();
        for sub in &subs {
            self.workers.resolve_identity(&sub.worker_id, &sub.fingerprint)?;
            if sub.country.is_none() && !countries.contains_key(&sub.worker_id) {
                let c = adapter.worker_country(&sub.worker_id)?;
                countries.insert(sub.worker_id.clone(), c);
            }
        }
        let live_gate = adapter.capabilities().live_gate;
        let trust = *self.workers.trust();
        let now = self.clock.now();
        let group = def.group_of(&block.id).unwrap_or_default().to_string();
        self.store.update(|s| {
            if s.cursor(run_id, &block.id) != cursor {
                return Ok((Vec::new(), 0));
            }
            let units: Vec<DataUnit> = Self::block_input(s, def, run_id, &block.id).unwrap_or_default();
            let by_id: BTreeMap<&str, &DataUnit> = units.iter().map(|u| (u.id.as_str(), u)).collect();
            let schedule = effective_schedule(def, run.toggles);
            let mut quota = s.meta::<QuotaState>(&quota_key(run_id));
            let mut sched: Option<SchedulerState> = s.meta(&sched_key(run_id));
            let mut records: BTreeMap<String, WorkerRecord> = BTreeMap::new();
            let mut assigned: BTreeMap<String, Assignment> = BTreeMap::new();
            let mut judgments = Vec::with_capacity(subs.len());
            let mut muts = Vec::new();
            for sub in &subs {
                let canonical = s
                    .identity(&fingerprint_token(&sub.fingerprint))
                    .map(|c| s.resolve_alias(c).to_string())
                    .unwrap_or_else(|| crate::worker::canonical_for(&sub.fingerprint));
                let country = sub
                    .country
                    .clone()
                    .or_else(|| countries.get(&sub.worker_id).cloned().flatten())
                    .or_else(|| s.worker(&canonical).map(|w| w.country.clone()))
                    .unwrap_or_else(|| "ZZ".to_string());
                let assignment = match assigned.get(&canonical).or(s.assignment(run_id, &canonical)) {
                    Some(a) => a.clone(),
                    None if !live_gate => {
                        // Offline platforms cannot call the hook: record what happened.
                        let a = Assignment {
                            group: group.clone(),
                            block: Some(block.id.clone()),
                            decided_at: sub.timestamp,
                            request_id: None,
                            visits: 1,
                            reason: Reason::NewAssignment,
                            observed: true,
                        };
                        assigned.insert(canonical.clone(), a.clone());
                        a
                    }
                    None => {
                        muts.push(Mutation::audit(
                            now,
                            Some(run_id),
                            AuditKind::ProtocolViolation {
                                worker: canonical.clone(),
                                detail: format!("judgment for unit {} without an assignment", sub.unit_id),
                            },
                        ));
                        continue;
                    }
                };
                let Some(unit) = by_id.get(sub.unit_id.as_str()) else {
                    muts.push(Mutation::audit(
                        now,
                        Some(run_id),
                        AuditKind::ProtocolViolation {
                            worker: canonical.clone(),
                            detail: format!("unknown unit {} in block {}", sub.unit_id, block.id),
                        },
                    ));
                    continue;
                };
                let session = sub.session.unwrap_or(assignment.visits.saturating_sub(1));
                let mut j = Judgment {
                    unit_id: sub.unit_id.clone(),
                    worker_id: canonical.clone(),
                    group_id: group.clone(),
                    block_id: block.id.clone(),
                    answer: sub.answer.clone(),
                    decision_time: sub.decision_time_ms as f64 / 1000.0,
                    submitted_at: sub.timestamp,
                    is_gold: unit.is_gold(),
                    gold_correct: unit.gold.as_ref().map(|g| answers_match(&sub.answer, &g.expected_answer)),
                    valid: false,
                    country: country.clone(),
                    session,
                };
                let rec = records.entry(canonical.clone()).or_insert_with(|| {
                    s.worker(&canonical)
                        .cloned()
                        .unwrap_or_else(|| WorkerRecord::new(&canonical, &country, sub.timestamp))
                });
                apply_judgment(rec, run_id, &j, &trust);
                j.valid = rec.trusted && policy_permits(&def.policy, &assignment.group, &group, session);
                if !live_gate {
                    if let Some(q) = quota.as_mut() {
                        q.admit(&country, false);
                    }
                    if let Some(st) = sched.as_mut() {
                        st.record_judgment(&schedule, &group, sub.timestamp);
                    }
                }
                judgments.push(j);
            }
            let n = judgments.len();
            muts.push(Mutation::AppendJudgments {
                run_id: run_id.to_string(),
                block_id: block.id.clone(),
                judgments,
                cursor: next,
            });
            for record in records.into_values() {
                muts.push(Mutation::PutWorker { record });
            }
            for (worker, assignment) in assigned {
                muts.push(Mutation::Assign {
                    run_id: run_id.to_string(),
                    worker,
                    assignment,
                });
            }
            if !live_gate {
                if let Some(q) = &quota {
                    muts.push(Mutation::meta(quota_key(run_id), q));
                }
                if let Some(st) = &sched {
                    muts.push(Mutation::meta(sched_key(run_id), st));
                }
            }
            Ok::<_, EngineError>((muts, n))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_matrix() {
        let mut p = EligibilityPolicy::default();
        p.recurrence = Recurrence::BlockAllRepeats;
        assert!(policy_permits(&p, "a", "b", 0));
        assert!(!policy_permits(&p, "a", "a", 1));
        p.recurrence = Recurrence::AllowSameCondition;
        assert!(policy_permits(&p, "a", "a", 1));
        assert!(!policy_permits(&p, "a", "b", 1));
        p.recurrence = Recurrence::AllowAll;
        p.crossover = CrossoverRule::Allow;
        assert!(policy_permits(&p, "a", "b", 2));
    }

    #[test]
    fn multi_choice_gold_ignores_order() {
        let a = serde_json::json!(["x", "y"]);
        let b = serde_json::json!(["y", "x"]);
        assert!(answers_match(&a, &b));
        assert!(!answers_match(&serde_json::json!("x"), &serde_json::json!("y")));
    }
}
