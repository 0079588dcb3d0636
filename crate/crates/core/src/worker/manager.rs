use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use thiserror::Error;

use super::{
    canonical_for, check_quota, fingerprint_token, platform_token, Action, Assignment, AssignmentDecision,
    BalancedAssigner, CrossoverRule, QuotaCheck, QuotaState, Reason, Recurrence, TrustConfig, WorkerRecord,
};
use crate::clock::Clock;
use crate::digest::{mix_seed, sha256_hex};
use crate::engine::{RunState, RunStatus};
use crate::platform::Judgment;
use crate::store::{AuditKind, Mutation, State, Store, StoreError};
use crate::workflow::WorkflowDef;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkerError {
    #[error("empty identity token")]
    EmptyToken,
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is not running")]
    NotRunning(String),
    #[error("definition unavailable")]
    DefinitionUnavailable,
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("worker {worker} has no assignment in run {run}")]
    Unassigned { run: String, worker: String },
    #[error("run {0} has no quota configuration")]
    NoQuotas(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What a task page sends when it loads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EligibilityRequest {
    pub platform_worker_id: String,
    pub fingerprint: String,
    pub country: String,
    /// Block whose task page the worker landed on.
    pub block_id: Option<String>,
    /// Client nonce; a replay carrying the nonce of a granted request gets the
    /// same decision back instead of being treated as a return visit.
    pub request_id: Option<String>,
}

pub fn quota_key(run_id: &str) -> String {
    format!("quota/{run_id}")
}

fn assigner_key(run_id: &str, signature: &str) -> String {
    format!("assigner/{run_id}/{signature}")
}

pub struct WorkerManager {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    trust: TrustConfig,
}

impl WorkerManager {
    pub fn new(store: Arc<Store>, clock: Arc<dyn Clock>) -> Self {
        Self {
            store,
            clock,
            trust: TrustConfig::default(),
        }
    }

    pub fn with_trust(mut self, trust: TrustConfig) -> Self {
        self.trust = trust;
        self
    }

    pub fn trust(&self) -> &TrustConfig {
        &self.trust
    }

    /// Maps a (platform id, fingerprint) pair to a canonical worker id. A
    /// known fingerprint wins over a known platform id; when both are known
    /// under different ids the platform-id identity is merged into the
    /// fingerprint one.
    pub fn resolve_identity(&self, platform_id: &str, fingerprint: &str) -> Result<String, WorkerError> {
        if platform_id.is_empty() || fingerprint.is_empty() {
            return Err(WorkerError::EmptyToken);
        }
        let now = self.clock.now();
        self.store.update(|s| {
            let (id, muts) = identity_mutations(s, platform_id, fingerprint, now, &self.trust);
            Ok::<_, WorkerError>((muts, id))
        })
    }

    /// The page-load hook: identity, policy, quota and (for new workers)
    /// condition assignment in one atomic step.
    pub fn decide_eligibility(&self, run_id: &str, req: &EligibilityRequest) -> Result<AssignmentDecision, WorkerError> {
        let canonical = self.resolve_identity(&req.platform_worker_id, &req.fingerprint)?;
        let now = self.clock.now();
        self.store.update(|s| {
            let run = running(s, run_id)?;
            let def = s
                .workflow(&run.workflow_id, run.workflow_version)
                .ok_or(WorkerError::DefinitionUnavailable)?;
            let ctx = Ctx {
                s,
                run,
                def,
                canonical: &canonical,
                now,
            };
            ctx.decide(req)
        })
    }

    /// Draws the next condition for a worker eligible as new and records the
    /// assignment.
    pub fn assign_condition(&self, run_id: &str, canonical: &str) -> Result<String, WorkerError> {
        let now = self.clock.now();
        self.store.update(|s| {
            let run = running(s, run_id)?;
            let def = s
                .workflow(&run.workflow_id, run.workflow_version)
                .ok_or(WorkerError::DefinitionUnavailable)?;
            let mut muts = Vec::new();
            let group = next_group(s, run, def, None, &mut muts).ok_or(WorkerError::DefinitionUnavailable)?;
            muts.push(Mutation::Assign {
                run_id: run_id.to_string(),
                worker: s.resolve_alias(canonical).to_string(),
                assignment: Assignment {
                    group: group.clone(),
                    block: first_block_of(def, &group),
                    decided_at: now,
                    request_id: None,
                    visits: 1,
                    reason: Reason::NewAssignment,
                    observed: false,
                },
            });
            Ok::<_, WorkerError>((muts, group))
        })
    }

    /// Applies one judgment to the worker's record (gold counters, trust,
    /// participation). Judgments from workers without an assignment are
    /// rejected and logged as protocol violations.
    pub fn record_judgment(&self, run_id: &str, canonical: &str, judgment: &Judgment) -> Result<WorkerRecord, WorkerError> {
        let now = self.clock.now();
        let out = self.store.update(|s| {
            if s.run(run_id).is_none() {
                return Err(WorkerError::UnknownRun(run_id.to_string()));
            }
            if s.assignment(run_id, canonical).is_none() {
                let muts = vec![Mutation::audit(
                    now,
                    Some(run_id),
                    AuditKind::ProtocolViolation {
                        worker: canonical.to_string(),
                        detail: format!("judgment for unit {} without an assignment", judgment.unit_id),
                    },
                )];
                return Ok((muts, None));
            }
            let mut rec = s
                .worker(canonical)
                .cloned()
                .unwrap_or_else(|| WorkerRecord::new(canonical, &judgment.country, now));
            apply_judgment(&mut rec, run_id, judgment, &self.trust);
            Ok((vec![Mutation::PutWorker { record: rec.clone() }], Some(rec)))
        })?;
        out.ok_or_else(|| WorkerError::Unassigned {
            run: run_id.to_string(),
            worker: canonical.to_string(),
        })
    }

    pub fn check_quota(&self, run_id: &str, country: &str) -> Result<QuotaCheck, WorkerError> {
        let qs = self.quota_state(run_id)?;
        Ok(check_quota(&qs.config, country))
    }

    pub fn quota_state(&self, run_id: &str) -> Result<QuotaState, WorkerError> {
        self.store
            .read(|s| s.meta::<QuotaState>(&quota_key(run_id)))?
            .ok_or_else(|| WorkerError::NoQuotas(run_id.to_string()))
    }

    /// Queues a cap change; it takes effect at the next checkpoint.
    pub fn request_quota_edit(&self, run_id: &str, max_share: f64) -> Result<(), WorkerError> {
        let now = self.clock.now();
        self.store.update(|s| {
            let mut qs: QuotaState = s
                .meta(&quota_key(run_id))
                .ok_or_else(|| WorkerError::NoQuotas(run_id.to_string()))?;
            qs.pending_max_share = Some(max_share);
            Ok((
                vec![
                    Mutation::meta(quota_key(run_id), &qs),
                    Mutation::audit(now, Some(run_id), AuditKind::QuotaEditRequested { max_share }),
                ],
                (),
            ))
        })
    }

    /// Checkpoint hook: applies pending quota edits and, in soft-rotate mode,
    /// rotates the bucket -> group mapping. Returns the new mapping.
    pub fn rotate_buckets(&self, run_id: &str) -> Result<Option<BTreeMap<String, Vec<String>>>, WorkerError> {
        let now = self.clock.now();
        self.store.update(|s| {
            let Some(mut qs) = s.meta::<QuotaState>(&quota_key(run_id)) else {
                return Ok((Vec::new(), None));
            };
            let run = s.run(run_id).ok_or_else(|| WorkerError::UnknownRun(run_id.to_string()))?;
            let groups = s
                .workflow(&run.workflow_id, run.workflow_version)
                .map(WorkflowDef::group_ids)
                .unwrap_or_default();
            let (applied, rotated) = qs.on_checkpoint(&groups);
            let mut muts = vec![Mutation::meta(quota_key(run_id), &qs)];
            if let Some(max_share) = applied {
                muts.push(Mutation::audit(now, Some(run_id), AuditKind::QuotaEditApplied { max_share }));
            }
            if let Some(mapping) = &rotated {
                muts.push(Mutation::audit(
                    now,
                    Some(run_id),
                    AuditKind::BucketRotation {
                        checkpoint: qs.rotations,
                        mapping: mapping.clone(),
                    },
                ));
            }
            Ok::<_, WorkerError>((muts, rotated))
        })
    }
}

fn running<'a>(s: &'a State, run_id: &str) -> Result<&'a RunState, WorkerError> {
    let run = s.run(run_id).ok_or_else(|| WorkerError::UnknownRun(run_id.to_string()))?;
    if run.status != RunStatus::Running {
        return Err(WorkerError::NotRunning(run_id.to_string()));
    }
    Ok(run)
}

/// Identity resolution against a state view; returns the canonical id and the
/// mutations that record any new links or merges.
pub(crate) fn identity_mutations(
    s: &State,
    platform_id: &str,
    fingerprint: &str,
    now: DateTime<Utc>,
    trust: &TrustConfig,
) -> (String, Vec<Mutation>) {
    let ft = fingerprint_token(fingerprint);
    let pt = platform_token(platform_id);
    let by_fp = s.identity(&ft).map(str::to_string);
    let by_pid = s.identity(&pt).map(str::to_string);
    let mut muts = Vec::new();
    let id = match (by_fp, by_pid) {
        (Some(f), Some(p)) if f == p => f,
        (Some(f), Some(p)) => {
            muts.push(Mutation::MergeIdentity {
                absorbed: p.clone(),
                into: f.clone(),
            });
            muts.push(Mutation::LinkIdentity {
                token: pt,
                canonical: f.clone(),
            });
            if let Some(absorbed) = s.worker(&p) {
                let mut rec = s.worker(&f).cloned().unwrap_or_else(|| {
                    let mut r = absorbed.clone();
                    r.canonical_id = f.clone();
                    r.participations.clear();
                    r.gold_correct = 0;
                    r.gold_total = 0;
                    r
                });
                rec.absorb(absorbed, trust);
                muts.push(Mutation::PutWorker { record: rec });
            }
            for run in s.runs() {
                if let (Some(a), None) = (s.assignment(&run.run_id, &p), s.assignment(&run.run_id, &f)) {
                    muts.push(Mutation::Assign {
                        run_id: run.run_id.clone(),
                        worker: f.clone(),
                        assignment: a.clone(),
                    });
                }
            }
            muts.push(Mutation::audit(
                now,
                None,
                AuditKind::IdentityMerge {
                    canonical: f.clone(),
                    absorbed: p,
                },
            ));
            f
        }
        (Some(f), None) => {
            muts.push(Mutation::LinkIdentity {
                token: pt,
                canonical: f.clone(),
            });
            f
        }
        (None, Some(p)) => {
            muts.push(Mutation::LinkIdentity {
                token: ft.clone(),
                canonical: p.clone(),
            });
            muts.push(Mutation::audit(
                now,
                None,
                AuditKind::IdentityMerge {
                    canonical: p.clone(),
                    absorbed: ft,
                },
            ));
            p
        }
        (None, None) => {
            let id = canonical_for(fingerprint);
            muts.push(Mutation::LinkIdentity {
                token: ft,
                canonical: id.clone(),
            });
            muts.push(Mutation::LinkIdentity {
                token: pt,
                canonical: id.clone(),
            });
            id
        }
    };
    (id, muts)
}

/// Folds a judgment into a worker record: gold counters and trust when the
/// unit is gold, and a participation for a new (block, session).
pub fn apply_judgment(rec: &mut WorkerRecord, run_id: &str, j: &Judgment, trust: &TrustConfig) {
    if let Some(correct) = j.gold_correct {
        rec.record_gold(correct, trust);
    }
    rec.participate(super::Participation {
        run_id: run_id.to_string(),
        group_id: j.group_id.clone(),
        block_id: j.block_id.clone(),
        session: j.session,
        at: j.submitted_at,
    });
    rec.last_seen = rec.last_seen.max(j.submitted_at);
}

pub(crate) fn first_block_of(def: &WorkflowDef, group: &str) -> Option<String> {
    def.do_blocks()
        .filter(|(_, d)| d.group.as_deref() == Some(group))
        .map(|(b, _)| b.id.clone())
        .min()
}

/// Draws from the run's balanced assigner, restricted to `allowed` when
/// given (each distinct restriction keeps its own balanced stream).
fn next_group(
    s: &State,
    run: &RunState,
    def: &WorkflowDef,
    allowed: Option<&[String]>,
    muts: &mut Vec<Mutation>,
) -> Option<String> {
    let (groups, signature) = match allowed {
        Some(set) => (set.to_vec(), set.join(",")),
        None => (def.group_ids(), "all".to_string()),
    };
    let key = assigner_key(&run.run_id, &signature);
    let mut assigner: BalancedAssigner = s.meta(&key).unwrap_or_else(|| {
        let stream = if allowed.is_none() {
            0
        } else {
            u64::from_str_radix(&sha256_hex(signature.as_bytes())[..16], 16).unwrap_or(0)
        };
        BalancedAssigner::new(groups, mix_seed(run.seed, stream))
    });
    let g = assigner.next_group()?;
    muts.push(Mutation::meta(key, &assigner));
    Some(g)
}

struct Ctx<'a> {
    s: &'a State,
    run: &'a RunState,
    def: &'a WorkflowDef,
    canonical: &'a str,
    now: DateTime<Utc>,
}

impl Ctx<'_> {
    fn decide(&self, req: &EligibilityRequest) -> Result<(Vec<Mutation>, AssignmentDecision), WorkerError> {
        let landing_group = match &req.block_id {
            Some(b) => Some(
                self.def
                    .group_of(b)
                    .ok_or_else(|| WorkerError::UnknownBlock(b.clone()))?
                    .to_string(),
            ),
            None => None,
        };
        let record = self.s.worker(self.canonical);
        let trusted = record.is_none_or(|r| r.trusted);
        let mut muts = Vec::new();
        let mut rec = record
            .cloned()
            .unwrap_or_else(|| WorkerRecord::new(self.canonical, &req.country, self.now));
        rec.last_seen = self.now;
        muts.push(Mutation::PutWorker { record: rec });

        let toggles = self.run.toggles;
        let enforced = |reason: Reason| match reason {
            Reason::QuotaExhausted => toggles.quotas,
            _ => toggles.eligibility,
        };
        let policy = &self.def.policy;
        let decision = match self.s.assignment(&self.run.run_id, self.canonical) {
            Some(a) if req.request_id.is_some() && a.request_id == req.request_id => {
                // Replay of a granted request.
                return Ok((
                    Vec::new(),
                    self.decision(Action::Proceed, Some(a.group.clone()), a.block.clone(), a.reason, a.visits - 1, true),
                ));
            }
            Some(a) => {
                let landing = landing_group.clone().unwrap_or_else(|| a.group.clone());
                let same = landing == a.group;
                let (would, reason) = if !trusted {
                    (Action::Block, Reason::Untrusted)
                } else {
                    match (policy.recurrence, same) {
                        (Recurrence::BlockAllRepeats, _) => (Action::Block, Reason::RepeatBlocked),
                        (_, true) => (Action::Proceed, Reason::ReturningSameAllowed),
                        (Recurrence::AllowSameCondition, false) => (Action::Block, Reason::CrossoverBlocked),
                        (Recurrence::AllowAll, false) if policy.crossover == CrossoverRule::Allow => {
                            (Action::Proceed, Reason::ReturningCrossoverAllowed)
                        }
                        (Recurrence::AllowAll, false) => (Action::Block, Reason::CrossoverBlocked),
                    }
                };
                let action = if would == Action::Block && enforced(reason) {
                    Action::Block
                } else {
                    Action::Proceed
                };
                let block = req.block_id.clone().or_else(|| a.block.clone());
                if action == Action::Proceed {
                    let mut next = a.clone();
                    next.visits += 1;
                    next.request_id = req.request_id.clone();
                    next.reason = reason;
                    muts.push(self.assign(next));
                }
                self.decision(action, Some(landing), block, reason, a.visits, would == Action::Proceed)
            }
            None => {
                let quota = self.s.meta::<QuotaState>(&super::manager::quota_key(&self.run.run_id));
                let allowed_set = quota.as_ref().and_then(|q| q.allowed_groups(&req.country));
                let (would, reason) = if !trusted {
                    (Action::Block, Reason::Untrusted)
                } else if let Some(q) = &quota {
                    let hard_ok = check_quota(&q.config, &req.country).allowed;
                    let rotate_ok = allowed_set.is_none_or(|set| match &landing_group {
                        Some(g) if !toggles.eligibility => set.contains(g),
                        _ => !set.is_empty(),
                    });
                    if hard_ok && rotate_ok {
                        (Action::Proceed, Reason::NewAssignment)
                    } else {
                        (Action::Block, Reason::QuotaExhausted)
                    }
                } else {
                    (Action::Proceed, Reason::NewAssignment)
                };
                let action = if would == Action::Block && enforced(reason) {
                    Action::Block
                } else {
                    Action::Proceed
                };
                if action == Action::Block {
                    self.decision(action, None, None, reason, 0, false)
                } else {
                    let restrict = if toggles.quotas { allowed_set } else { None };
                    let (group, block) = match (&landing_group, toggles.eligibility) {
                        (Some(g), false) => (g.clone(), req.block_id.clone()),
                        _ => {
                            let g = next_group(self.s, self.run, self.def, restrict, &mut muts)
                                .ok_or(WorkerError::DefinitionUnavailable)?;
                            let block = if landing_group.as_ref() == Some(&g) {
                                req.block_id.clone()
                            } else {
                                first_block_of(self.def, &g)
                            };
                            (g, block)
                        }
                    };
                    muts.push(self.assign(Assignment {
                        group: group.clone(),
                        block: block.clone(),
                        decided_at: self.now,
                        request_id: req.request_id.clone(),
                        visits: 1,
                        reason,
                        observed: !toggles.eligibility,
                    }));
                    self.decision(action, Some(group), block, reason, 0, would == Action::Proceed)
                }
            }
        };
        muts.push(Mutation::audit(
            self.now,
            Some(&self.run.run_id),
            AuditKind::Eligibility {
                worker: self.canonical.to_string(),
                action: match decision.action {
                    Action::Proceed => "proceed".into(),
                    Action::Block => "block".into(),
                },
                reason: decision.reason.as_str().to_string(),
                group: decision.group.clone(),
                block: decision.block.clone(),
            },
        ));
        Ok((muts, decision))
    }

    fn assign(&self, assignment: Assignment) -> Mutation {
        Mutation::Assign {
            run_id: self.run.run_id.clone(),
            worker: self.canonical.to_string(),
            assignment,
        }
    }

    fn decision(
        &self,
        action: Action,
        group: Option<String>,
        block: Option<String>,
        reason: Reason,
        session: u32,
        compliant: bool,
    ) -> AssignmentDecision {
        let blocked = action == Action::Block;
        AssignmentDecision {
            canonical_id: self.canonical.to_string(),
            action,
            group: if blocked { None } else { group },
            block: if blocked { None } else { block },
            reason,
            message: blocked.then(|| self.def.policy.message_on_block.clone()),
            session,
            compliant,
        }
    }
}
