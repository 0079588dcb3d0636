use std::sync::Arc;

use super::{effective_schedule, sched_key, BlockStatus, RunStatus};
use crate::platform::{HookVerdict, PageLoad, SubmitAttempt, TaskPageHook};
use crate::scheduler::SchedulerState;
use crate::store::{Mutation, Store, StoreError};
use crate::worker::{fingerprint_token, quota_key, EligibilityRequest, QuotaState, WorkerManager};

/// The orchestrator side of a live task page for one run: eligibility on
/// page load, and a per-judgment submit gate enforcing schedule windows,
/// window balancing and hard quotas.
pub struct Gate {
    store: Arc<Store>,
    workers: Arc<WorkerManager>,
    run_id: String,
}

impl Gate {
    pub fn new(store: Arc<Store>, workers: Arc<WorkerManager>, run_id: &str) -> Self {
        Self {
            store,
            workers,
            run_id: run_id.to_string(),
        }
    }

    fn try_submit(&self, attempt: &SubmitAttempt) -> Result<bool, StoreError> {
        self.store.update(|s| {
            let Some(run) = s.run(&self.run_id) else {
                return Ok((Vec::new(), false));
            };
            if run.status != RunStatus::Running {
                return Ok((Vec::new(), false));
            }
            let Some(def) = s.workflow(&run.workflow_id, run.workflow_version) else {
                return Ok((Vec::new(), false));
            };
            let Some(block) = run.block_for_task(&attempt.platform_task_id) else {
                return Ok((Vec::new(), false));
            };
            if run.blocks[block].status != BlockStatus::Collecting {
                return Ok((Vec::new(), false));
            }
            if s.identity(&fingerprint_token(&attempt.fingerprint)).is_none() {
                // Never passed the page-load hook.
                return Ok((Vec::new(), false));
            }
            let group = def.group_of(block).unwrap_or_default().to_string();
            let schedule = effective_schedule(def, run.toggles);
            let mut sched: SchedulerState = s
                .meta(&sched_key(&self.run_id))
                .unwrap_or_else(|| SchedulerState::new(&self.run_id, attempt.at));
            if !sched.admits(&schedule, &group, attempt.at) {
                return Ok((Vec::new(), false));
            }
            let mut muts = Vec::new();
            if let Some(mut q) = s.meta::<QuotaState>(&quota_key(&self.run_id)) {
                if !q.admit(&attempt.country, run.toggles.quotas) {
                    return Ok((Vec::new(), false));
                }
                muts.push(Mutation::meta(quota_key(&self.run_id), &q));
            }
            sched.record_judgment(&schedule, &group, attempt.at);
            muts.push(Mutation::meta(sched_key(&self.run_id), &sched));
            Ok((muts, true))
        })
    }
}

impl TaskPageHook for Gate {
    fn page_load(&self, load: &PageLoad) -> HookVerdict {
        let block = match self.store.read(|s| {
            s.run(&self.run_id)
                .and_then(|r| r.block_for_task(&load.platform_task_id).map(str::to_string))
        }) {
            Ok(Some(b)) => b,
            Ok(None) => {
                return HookVerdict::Block {
                    reason: "unknown-task".into(),
                }
            }
            Err(e) => return HookVerdict::Block { reason: e.to_string() },
        };
        let req = EligibilityRequest {
            platform_worker_id: load.platform_worker_id.clone(),
            fingerprint: load.fingerprint.clone(),
            country: load.country.clone(),
            block_id: Some(block.clone()),
            request_id: None,
        };
        let decision = match self.workers.decide_eligibility(&self.run_id, &req) {
            Ok(d) => d,
            Err(e) => return HookVerdict::Block { reason: e.to_string() },
        };
        if !decision.is_proceed() {
            return HookVerdict::Block {
                reason: decision.reason.as_str().to_string(),
            };
        }
        let target = decision.block.unwrap_or(block);
        let task = self.store.read(|s| {
            s.run(&self.run_id).and_then(|r| {
                r.blocks
                    .get(&target)
                    .filter(|e| e.status == BlockStatus::Collecting)
                    .and_then(|e| e.handle.as_ref())
                    .map(|h| h.platform_task_id.clone())
            })
        });
        match task {
            Ok(Some(platform_task_id)) => HookVerdict::Proceed {
                platform_task_id,
                session: decision.session,
            },
            _ => HookVerdict::Block {
                reason: "condition-unavailable".into(),
            },
        }
    }

    fn submit(&self, attempt: &SubmitAttempt) -> bool {
        self.try_submit(attempt).unwrap_or(false)
    }
}
