use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::population::{simulate_arrivals, simulate_worker_behavior, worker_speed, BehaviorContext, SimEvent, SimEventKind};
use super::profile::PopulationProfile;
use crate::digest::mix_seed;
use crate::platform::translate::FragmentKind;
use crate::platform::{
    Adapter, Capabilities, HookVerdict, PageLoad, PlatformError, PublishRequest, Submission, SubmitAttempt,
    TaskHandle, TaskPageHook, TaskProgress, TaskState,
};
use crate::workflow::{build_page, DataUnit, Paging};

pub const SIM_ADAPTER_ID: &str = "sim";

const WORKER_STREAM: u64 = 2;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimStats {
    pub publish_calls: u64,
    pub tasks_created: u64,
    pub arrivals: u64,
    pub returns: u64,
    pub blocked_visits: u64,
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Arrival(usize),
    Judge(usize),
    Return(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Queued {
    time: DateTime<Utc>,
    seq: u64,
    ev: Ev,
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct SimTask {
    handle: TaskHandle,
    group: Option<String>,
    state: TaskState,
    paging: Paging,
    units: Vec<DataUnit>,
    gold: Vec<usize>,
    regular: Vec<usize>,
    options: Vec<String>,
    votes: Vec<u32>,
    log: Vec<Submission>,
}

struct Visit {
    task: String,
    session: u32,
    pages_left: u32,
    queue: VecDeque<usize>,
}

struct Pending {
    task: String,
    unit: usize,
    answer: Value,
    ms: u64,
    session: u32,
}

struct SimWorker {
    pid: String,
    fingerprint: String,
    country: String,
    rng: ChaCha8Rng,
    speed: f64,
    sessions: Vec<u32>,
    crosses: bool,
    session_idx: usize,
    first_task: Option<String>,
    first_group: Option<String>,
    visit: Option<Visit>,
    pending: Option<Pending>,
    page_index: BTreeMap<String, u32>,
    seen: BTreeMap<String, BTreeSet<usize>>,
}

struct Sim {
    profile: PopulationProfile,
    kinds: BTreeMap<String, String>,
    now: DateTime<Utc>,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    arrivals: Vec<SimEvent>,
    workers: Vec<SimWorker>,
    tasks: BTreeMap<String, SimTask>,
    tokens: BTreeMap<String, String>,
    countries: BTreeMap<String, String>,
    trace: Vec<SimEvent>,
    stats: SimStats,
}

/// Simulated platform. Workers arrive per the profile's arrival process
/// over `[start, start + horizon)`; time only moves through
/// [`SimPlatform::advance`], event to event.
pub struct SimPlatform {
    inner: Mutex<Sim>,
}

impl SimPlatform {
    pub fn new(profile: PopulationProfile, start: DateTime<Utc>, horizon: Duration) -> Self {
        let arrivals = simulate_arrivals(&profile, start, start + horizon);
        let mut queue = BinaryHeap::new();
        for (i, a) in arrivals.iter().enumerate() {
            queue.push(Reverse(Queued {
                time: a.time,
                seq: i as u64,
                ev: Ev::Arrival(i),
            }));
        }
        let seq = arrivals.len() as u64;
        Self {
            inner: Mutex::new(Sim {
                profile,
                kinds: BTreeMap::new(),
                now: start,
                queue,
                seq,
                arrivals,
                workers: Vec::new(),
                tasks: BTreeMap::new(),
                tokens: BTreeMap::new(),
                countries: BTreeMap::new(),
                trace: Vec::new(),
                stats: SimStats::default(),
            }),
        }
    }

    /// Processes every event strictly before `until`, then sets the clock to
    /// `until`.
    pub fn advance(&self, until: DateTime<Utc>, hook: &dyn TaskPageHook) {
        let mut sim = self.inner.lock().unwrap();
        while let Some(Reverse(top)) = sim.queue.peek() {
            if top.time >= until {
                break;
            }
            let Reverse(q) = sim.queue.pop().expect("peeked");
            sim.now = q.time;
            match q.ev {
                Ev::Arrival(i) => sim.arrive(i, hook),
                Ev::Judge(i) => sim.judge(i, hook),
                Ev::Return(i) => {
                    sim.stats.returns += 1;
                    sim.record(SimEventKind::WorkerReturns, i, Value::Null);
                    sim.land(i, true, hook);
                }
            }
        }
        if until > sim.now {
            sim.now = until;
        }
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.inner.lock().unwrap().now
    }

    pub fn next_event_time(&self) -> Option<DateTime<Utc>> {
        self.inner.lock().unwrap().queue.peek().map(|Reverse(q)| q.time)
    }

    pub fn is_drained(&self) -> bool {
        self.inner.lock().unwrap().queue.is_empty()
    }

    pub fn stats(&self) -> SimStats {
        self.inner.lock().unwrap().stats.clone()
    }

    pub fn trace(&self) -> Vec<SimEvent> {
        self.inner.lock().unwrap().trace.clone()
    }

    pub fn arrivals(&self) -> usize {
        self.inner.lock().unwrap().arrivals.len()
    }
}

impl Sim {
    fn push(&mut self, time: DateTime<Utc>, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued { time, seq, ev }));
    }

    fn record(&mut self, kind: SimEventKind, worker: usize, payload: Value) {
        let seq = self.trace.len() as u64;
        self.trace.push(SimEvent {
            time: self.now,
            seq,
            kind,
            worker: self.workers[worker].pid.clone(),
            payload,
        });
    }

    fn arrive(&mut self, i: usize, hook: &dyn TaskPageHook) {
        debug_assert_eq!(i, self.workers.len());
        let ev = &self.arrivals[i];
        let country = ev.payload["country"].as_str().unwrap_or_default().to_string();
        let pid = ev.worker.clone();
        let p = &self.profile;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(p.seed, WORKER_STREAM), i as u64));
        let fingerprint = if i > 0 && rng.random_bool(p.fingerprint_collision_rate) {
            let j = rng.random_range(0..i);
            self.workers[j].fingerprint.clone()
        } else {
            format!("fp-{:016x}", mix_seed(p.seed ^ 0x5eed, i as u64))
        };
        let speed = worker_speed(p, &mut rng);
        let budget = rng.random_range(p.page_budget.min..=p.page_budget.max);
        let returns = budget >= 2 && rng.random_bool(p.return_probability);
        let sessions = if returns {
            let first = rng.random_range(1..budget);
            vec![first, budget - first]
        } else {
            vec![budget]
        };
        let crosses = returns && rng.random_bool(p.cross_condition_probability);
        self.countries.insert(pid.clone(), country.clone());
        self.workers.push(SimWorker {
            pid,
            fingerprint,
            country: country.clone(),
            rng,
            speed,
            sessions,
            crosses,
            session_idx: 0,
            first_task: None,
            first_group: None,
            visit: None,
            pending: None,
            page_index: BTreeMap::new(),
            seen: BTreeMap::new(),
        });
        self.stats.arrivals += 1;
        self.record(SimEventKind::WorkerArrival, i, json!({ "country": country }));
        self.land(i, false, hook);
    }

    fn active_tasks(&self) -> Vec<&str> {
        self.tasks
            .iter()
            .filter(|(_, t)| t.state == TaskState::Active)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Picks the task page a worker opens and runs the page-load hook.
    fn land(&mut self, i: usize, returning: bool, hook: &dyn TaskPageHook) {
        let active: Vec<String> = self.active_tasks().into_iter().map(str::to_string).collect();
        let active: Vec<&str> = active.iter().map(String::as_str).collect();
        let w = &self.workers[i];
        let candidates: Vec<&str> = if !returning {
            active
        } else {
            let first_group = w.first_group.as_deref();
            let same: Vec<&str> = active
                .iter()
                .copied()
                .filter(|t| self.tasks[*t].group.as_deref() == first_group)
                .collect();
            if w.crosses {
                active
                    .iter()
                    .copied()
                    .filter(|t| self.tasks[*t].group.as_deref() != first_group)
                    .collect()
            } else if let Some(ft) = w.first_task.as_deref().filter(|ft| same.contains(ft)) {
                vec![ft]
            } else {
                same
            }
        };
        let candidates: Vec<String> = candidates.into_iter().map(str::to_string).collect();
        let landing = {
            let w = &mut self.workers[i];
            candidates.choose(&mut w.rng).cloned()
        };
        let Some(landing) = landing else {
            self.record(SimEventKind::WorkerArrival, i, json!({ "outcome": "no-task" }));
            return;
        };
        let w = &self.workers[i];
        let verdict = hook.page_load(&PageLoad {
            platform_task_id: landing,
            platform_worker_id: w.pid.clone(),
            fingerprint: w.fingerprint.clone(),
            country: w.country.clone(),
            at: self.now,
        });
        match verdict {
            HookVerdict::Block { reason } => {
                self.stats.blocked_visits += 1;
                self.record(SimEventKind::WorkerArrival, i, json!({ "outcome": "blocked", "reason": reason }));
            }
            HookVerdict::Proceed {
                platform_task_id,
                session,
            } => {
                let Some(task) = self.tasks.get(&platform_task_id).filter(|t| t.state == TaskState::Active) else {
                    self.record(SimEventKind::WorkerArrival, i, json!({ "outcome": "task-unavailable" }));
                    return;
                };
                let group = task.group.clone();
                let w = &mut self.workers[i];
                if w.first_task.is_none() {
                    w.first_task = Some(platform_task_id.clone());
                    w.first_group = group;
                }
                let pages = w.sessions.get(w.session_idx).copied().unwrap_or(0);
                w.visit = Some(Visit {
                    task: platform_task_id,
                    session,
                    pages_left: pages,
                    queue: VecDeque::new(),
                });
                self.next_judgment(i);
            }
        }
    }

    /// Draws the worker's next answer in the current visit, or ends the visit.
    fn next_judgment(&mut self, i: usize) {
        loop {
            let w = &mut self.workers[i];
            let Some(visit) = w.visit.as_mut() else { return };
            if let Some(unit) = visit.queue.pop_front() {
                let task_id = visit.task.clone();
                let session = visit.session;
                let task = &self.tasks[&task_id];
                let ctx = match &w.first_group {
                    Some(first) if w.session_idx > 0 => {
                        BehaviorContext::returning(first, task.group.as_deref().unwrap_or_default())
                    }
                    _ => BehaviorContext::new_worker(task.group.as_deref().unwrap_or_default()),
                };
                let b = simulate_worker_behavior(&self.profile, &self.kinds, w.speed, &ctx, &mut w.rng);
                let answer = answer_for(&task.units[unit], &task.options, self.profile.truth_field.as_deref(), b.correct, &mut w.rng);
                let ms = (b.decision_time * 1000.0).round().max(1.0) as u64;
                w.pending = Some(Pending {
                    task: task_id,
                    unit,
                    answer,
                    ms,
                    session,
                });
                let at = self.now + Duration::milliseconds(ms as i64);
                self.push(at, Ev::Judge(i));
                return;
            }
            if visit.pages_left == 0 {
                self.end_visit(i);
                return;
            }
            let task_id = visit.task.clone();
            let task = &self.tasks[&task_id];
            let page = *w.page_index.get(&task_id).unwrap_or(&0);
            let seen = w.seen.entry(task_id.clone()).or_default();
            let gold_pool: Vec<usize> = task.gold.iter().copied().filter(|u| !seen.contains(u)).collect();
            let mut regular_pool: Vec<usize> = task.regular.iter().copied().filter(|u| !seen.contains(u)).collect();
            regular_pool.sort_by_key(|u| (task.votes[*u], *u));
            let plan = build_page(&task.paging, page, gold_pool.len(), regular_pool.len());
            let Some(plan) = plan.filter(|p| !p.is_empty()) else {
                self.end_visit(i);
                return;
            };
            let mut gold: Vec<usize> = gold_pool.choose_multiple(&mut w.rng, plan.gold.len()).copied().collect();
            gold.sort();
            let mut units: Vec<usize> = plan.regular.iter().map(|k| regular_pool[*k]).collect();
            for g in gold {
                let at = w.rng.random_range(0..=units.len());
                units.insert(at, g);
            }
            seen.extend(units.iter().copied());
            w.page_index.insert(task_id, page + 1);
            let visit = w.visit.as_mut().expect("visit");
            visit.pages_left -= 1;
            visit.queue.extend(units);
        }
    }

    fn end_visit(&mut self, i: usize) {
        let w = &mut self.workers[i];
        w.visit = None;
        w.pending = None;
        w.session_idx += 1;
        if w.session_idx < w.sessions.len() {
            let mean_ms = self.profile.return_delay_hours * 3_600_000.0;
            let delay = Exp::new(1.0 / mean_ms).expect("positive rate").sample(&mut w.rng);
            let at = self.now + Duration::milliseconds(delay.round() as i64);
            self.push(at, Ev::Return(i));
        }
    }

    fn judge(&mut self, i: usize, hook: &dyn TaskPageHook) {
        let Some(p) = self.workers[i].pending.take() else { return };
        let active = self.tasks.get(&p.task).is_some_and(|t| t.state == TaskState::Active);
        let w = &self.workers[i];
        let accepted = active
            && hook.submit(&SubmitAttempt {
                platform_task_id: p.task.clone(),
                platform_worker_id: w.pid.clone(),
                fingerprint: w.fingerprint.clone(),
                country: w.country.clone(),
                at: self.now,
            });
        if !accepted {
            self.stats.rejected += 1;
            self.record(
                SimEventKind::JudgmentSubmitted,
                i,
                json!({ "task": p.task, "accepted": false }),
            );
            self.end_visit(i);
            return;
        }
        let task = self.tasks.get_mut(&p.task).expect("active task");
        let unit_id = task.units[p.unit].id.clone();
        task.votes[p.unit] += 1;
        task.log.push(Submission {
            unit_id: unit_id.clone(),
            worker_id: w.pid.clone(),
            fingerprint: w.fingerprint.clone(),
            answer: p.answer,
            decision_time_ms: p.ms,
            timestamp: self.now,
            country: Some(w.country.clone()),
            session: Some(p.session),
        });
        self.stats.accepted += 1;
        self.record(
            SimEventKind::JudgmentSubmitted,
            i,
            json!({ "task": p.task, "unit": unit_id, "accepted": true }),
        );
        self.next_judgment(i);
    }
}

fn answer_for(unit: &DataUnit, options: &[String], truth_field: Option<&str>, correct: bool, rng: &mut ChaCha8Rng) -> Value {
    let truth: Value = match (&unit.gold, truth_field.and_then(|f| unit.payload.get(f))) {
        (Some(g), _) => g.expected_answer.clone(),
        (None, Some(v)) => v.clone(),
        (None, None) => options.first().cloned().map(Value::String).unwrap_or_else(|| "ok".into()),
    };
    if correct {
        return truth;
    }
    let wrong: Vec<&String> = options.iter().filter(|o| Value::String((*o).clone()) != truth).collect();
    match wrong.choose(rng) {
        Some(o) => Value::String((*o).clone()),
        None => Value::String("other".into()),
    }
}

impl Adapter for SimPlatform {
    fn id(&self) -> &str {
        SIM_ADAPTER_ID
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::all(true)
    }

    fn publish(&self, request: &PublishRequest) -> Result<TaskHandle, PlatformError> {
        let mut sim = self.inner.lock().unwrap();
        sim.stats.publish_calls += 1;
        if let Some(id) = sim.tokens.get(&request.idempotency_token) {
            return Ok(sim.tasks[id].handle.clone());
        }
        sim.stats.tasks_created += 1;
        let id = format!("sim-task-{}", sim.stats.tasks_created);
        let handle = TaskHandle {
            adapter_id: SIM_ADAPTER_ID.to_string(),
            platform_task_id: id.clone(),
            created_at: sim.now,
        };
        let (gold, regular): (Vec<usize>, Vec<usize>) = (0..request.units.len()).partition(|k| request.units[*k].is_gold());
        let options = request
            .payload
            .fragments
            .iter()
            .find(|f| f.kind == FragmentKind::Choice)
            .map(|f| f.options.clone())
            .unwrap_or_default();
        if let Some(g) = &request.group {
            let kinds = crate::worker::group_kinds(std::slice::from_ref(g), &sim.profile.kinds);
            sim.kinds.extend(kinds);
        }
        let task = SimTask {
            handle: handle.clone(),
            group: request.group.as_ref().map(|g| g.id.clone()),
            state: TaskState::Active,
            paging: request.payload.paging,
            votes: vec![0; request.units.len()],
            units: request.units.clone(),
            gold,
            regular,
            options,
            log: Vec::new(),
        };
        sim.tasks.insert(id.clone(), task);
        sim.tokens.insert(request.idempotency_token.clone(), id);
        Ok(handle)
    }

    fn status(&self, handle: &TaskHandle) -> Result<TaskProgress, PlatformError> {
        let sim = self.inner.lock().unwrap();
        let t = sim
            .tasks
            .get(&handle.platform_task_id)
            .ok_or_else(|| PlatformError::UnknownTask(handle.platform_task_id.clone()))?;
        Ok(TaskProgress {
            state: t.state,
            submissions: t.log.len() as u64,
        })
    }

    fn pause(&self, handle: &TaskHandle) -> Result<(), PlatformError> {
        self.set_state(handle, TaskState::Paused)
    }

    fn resume(&self, handle: &TaskHandle) -> Result<(), PlatformError> {
        self.set_state(handle, TaskState::Active)
    }

    fn fetch_judgments(&self, handle: &TaskHandle, since: u64) -> Result<(Vec<Submission>, u64), PlatformError> {
        let sim = self.inner.lock().unwrap();
        let t = sim
            .tasks
            .get(&handle.platform_task_id)
            .ok_or_else(|| PlatformError::UnknownTask(handle.platform_task_id.clone()))?;
        let from = (since as usize).min(t.log.len());
        Ok((t.log[from..].to_vec(), t.log.len() as u64))
    }

    fn cancel(&self, handle: &TaskHandle) -> Result<(), PlatformError> {
        self.set_state(handle, TaskState::Cancelled)
    }

    fn worker_country(&self, platform_worker_id: &str) -> Result<Option<String>, PlatformError> {
        Ok(self.inner.lock().unwrap().countries.get(platform_worker_id).cloned())
    }
}

impl SimPlatform {
    fn set_state(&self, handle: &TaskHandle, state: TaskState) -> Result<(), PlatformError> {
        let mut sim = self.inner.lock().unwrap();
        let t = sim
            .tasks
            .get_mut(&handle.platform_task_id)
            .ok_or_else(|| PlatformError::UnknownTask(handle.platform_task_id.clone()))?;
        if t.state != TaskState::Cancelled {
            t.state = state;
        }
        Ok(())
    }
}
