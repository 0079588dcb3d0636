//! Time-window gating, progress checkpoints and per-window balance.
//!
//! All times are UTC. Windows are `[start, end)` in whole hours and may wrap
//! midnight; a wrapping window belongs to the weekday on which it starts.

use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc, Weekday};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub windows: Vec<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<CheckpointEvery>,
    /// Calendar span the run is spread over, in days. Honored as configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread_over_days: Option<u32>,
    #[serde(default)]
    pub balance_across_groups: bool,
    /// How far (in judgments) one window may lead the least-filled window of
    /// the same group while balancing is on.
    #[serde(default = "default_slack")]
    pub balance_slack: u64,
}

fn default_slack() -> u64 {
    10
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            windows: Vec::new(),
            checkpoint_every: None,
            spread_over_days: None,
            balance_across_groups: false,
            balance_slack: default_slack(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Window {
    /// Empty means every day.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub days: Vec<Weekday>,
    pub start_hour: u8,
    pub end_hour: u8,
}

impl Window {
    pub fn daily(start_hour: u8, end_hour: u8) -> Self {
        Self {
            days: Vec::new(),
            start_hour,
            end_hour,
        }
    }

    fn on_day(&self, day: Weekday) -> bool {
        self.days.is_empty() || self.days.contains(&day)
    }

    pub fn contains(&self, now: DateTime<Utc>) -> bool {
        let h = now.hour() as u8;
        let day = now.weekday();
        if self.start_hour < self.end_hour {
            self.on_day(day) && h >= self.start_hour && h < self.end_hour
        } else {
            (h >= self.start_hour && self.on_day(day)) || (h < self.end_hour && self.on_day(day.pred()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CheckpointEvery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgments: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minutes: Option<u64>,
}

impl Schedule {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, w) in self.windows.iter().enumerate() {
            if w.start_hour > 23 || w.end_hour > 23 {
                out.push(format!("window {i}: hours must be in 0..24"));
            }
            if w.start_hour == w.end_hour {
                out.push(format!("window {i}: start equals end"));
            }
        }
        if let Some(c) = &self.checkpoint_every {
            if c.judgments == Some(0) || c.minutes == Some(0) {
                out.push("checkpointEvery values must be positive".to_string());
            }
        }
        out
    }

    /// Index of the first window containing `now`; an unscheduled run is
    /// always inside its single implicit window 0.
    pub fn window_at(&self, now: DateTime<Utc>) -> Option<usize> {
        if self.windows.is_empty() {
            return Some(0);
        }
        self.windows.iter().position(|w| w.contains(now))
    }

    pub fn window_count(&self) -> usize {
        self.windows.len().max(1)
    }
}

/// True iff `now` falls in some window (start inclusive, end exclusive). An
/// empty window list never gates.
pub fn is_active(schedule: &Schedule, now: DateTime<Utc>) -> bool {
    schedule.window_at(now).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    PauseRun,
    ResumeRun,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SchedulerState {
    pub run_id: String,
    pub active: bool,
    pub paused_by_user: bool,
    pub last_checkpoint_at: DateTime<Utc>,
    pub judgments_since_checkpoint: u64,
    pub checkpoints: u64,
    /// window index -> group -> accepted judgments
    pub per_window_counts: BTreeMap<usize, BTreeMap<String, u64>>,
}

impl SchedulerState {
    /// A run starts out running; the first tick outside every window pauses it.
    pub fn new(run_id: &str, now: DateTime<Utc>) -> Self {
        Self {
            run_id: run_id.to_string(),
            active: true,
            paused_by_user: false,
            last_checkpoint_at: now,
            judgments_since_checkpoint: 0,
            checkpoints: 0,
            per_window_counts: BTreeMap::new(),
        }
    }

    pub fn count(&self, window: usize, group: &str) -> u64 {
        self.per_window_counts
            .get(&window)
            .and_then(|m| m.get(group))
            .copied()
            .unwrap_or(0)
    }

    pub fn record_judgment(&mut self, schedule: &Schedule, group: &str, at: DateTime<Utc>) {
        let window = schedule.window_at(at).unwrap_or(0);
        *self
            .per_window_counts
            .entry(window)
            .or_default()
            .entry(group.to_string())
            .or_default() += 1;
        self.judgments_since_checkpoint += 1;
    }

    /// Whether a judgment for `group` may be accepted at `now`: inside a
    /// window, not user-paused, and (when balancing) the current window does
    /// not lead the group's least-filled window by more than the slack.
    pub fn admits(&self, schedule: &Schedule, group: &str, now: DateTime<Utc>) -> bool {
        if self.paused_by_user {
            return false;
        }
        let Some(window) = schedule.window_at(now) else {
            return false;
        };
        if !schedule.balance_across_groups || schedule.window_count() < 2 {
            return true;
        }
        let least = (0..schedule.window_count())
            .map(|w| self.count(w, group))
            .min()
            .unwrap_or(0);
        self.count(window, group) + 1 <= least + schedule.balance_slack.max(1)
    }
}

/// Advances the scheduler to `now` and returns the commands for the engine.
/// Pause and resume are emitted only on transitions, so the stream
/// alternates and re-applying it is harmless.
pub fn on_tick(state: &mut SchedulerState, schedule: &Schedule, now: DateTime<Utc>) -> Vec<Command> {
    let mut out = Vec::new();
    let should_run = is_active(schedule, now) && !state.paused_by_user;
    if state.active && !should_run {
        state.active = false;
        out.push(Command::PauseRun);
    } else if !state.active && should_run {
        state.active = true;
        out.push(Command::ResumeRun);
    }
    if let Some(every) = schedule.checkpoint_every {
        let by_count = every
            .judgments
            .is_some_and(|n| state.judgments_since_checkpoint >= n);
        let by_time = every
            .minutes
            .is_some_and(|m| now - state.last_checkpoint_at >= Duration::minutes(m as i64));
        if by_count || by_time {
            state.judgments_since_checkpoint = 0;
            state.last_checkpoint_at = now;
            state.checkpoints += 1;
            out.push(Command::Checkpoint);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroupBalance {
    pub counts: Vec<u64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WindowBalance {
    pub per_group: BTreeMap<String, GroupBalance>,
    /// Maximum over groups of `(max - min) / mean` of the group's window counts.
    pub score: f64,
}

pub fn window_balance(state: &SchedulerState, window_count: usize) -> WindowBalance {
    let n = window_count.max(1);
    let mut groups: Vec<&String> = state.per_window_counts.values().flat_map(|m| m.keys()).collect();
    groups.sort();
    groups.dedup();
    let mut per_group = BTreeMap::new();
    let mut score = 0.0f64;
    for g in groups {
        let counts: Vec<u64> = (0..n).map(|w| state.count(w, g)).collect();
        let s = imbalance(&counts);
        score = score.max(s);
        per_group.insert(g.clone(), GroupBalance { counts, score: s });
    }
    WindowBalance { per_group, score }
}

fn imbalance(counts: &[u64]) -> f64 {
    if counts.len() < 2 {
        return 0.0;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mean = total as f64 / counts.len() as f64;
    let max = *counts.iter().max().unwrap_or(&0);
    let min = *counts.iter().min().unwrap_or(&0);
    (max - min) as f64 / mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(h: u32, m: u32, s: u32) -> DateTime<Utc> {
        // 2024-01-03 is a Wednesday.
        Utc.with_ymd_and_hms(2024, 1, 3, h, m, s).unwrap()
    }

    fn sched(windows: Vec<Window>) -> Schedule {
        Schedule {
            windows,
            ..Schedule::default()
        }
    }

    #[test]
    fn boundaries_are_start_inclusive_end_exclusive() {
        let s = sched(vec![Window::daily(14, 18)]);
        assert!(!is_active(&s, at(13, 59, 59)));
        assert!(is_active(&s, at(14, 0, 0)));
        assert!(is_active(&s, at(17, 59, 59)));
        assert!(!is_active(&s, at(18, 0, 0)));
    }

    #[test]
    fn wrapping_window() {
        let s = sched(vec![Window::daily(22, 2)]);
        assert!(is_active(&s, at(23, 30, 0)));
        assert!(is_active(&s, at(1, 59, 0)));
        assert!(!is_active(&s, at(2, 0, 0)));
        assert!(!is_active(&s, at(21, 0, 0)));
    }

    #[test]
    fn wrapping_window_belongs_to_start_day() {
        let s = sched(vec![Window {
            days: vec![Weekday::Tue],
            start_hour: 22,
            end_hour: 2,
        }]);
        // Wednesday 01:00 is the tail of Tuesday's window.
        assert!(is_active(&s, at(1, 0, 0)));
        // Wednesday 23:00 would start Wednesday's window.
        assert!(!is_active(&s, at(23, 0, 0)));
    }

    #[test]
    fn empty_schedule_is_always_active() {
        assert!(is_active(&Schedule::default(), at(3, 0, 0)));
    }

    #[test]
    fn validation() {
        assert!(sched(vec![Window::daily(5, 5)]).validate().len() == 1);
        assert!(sched(vec![Window::daily(24, 5)]).validate().len() == 1);
        assert!(sched(vec![Window::daily(22, 2)]).validate().is_empty());
    }

    #[test]
    fn tick_transitions() {
        let s = sched(vec![Window::daily(14, 18)]);
        let mut st = SchedulerState::new("r", at(15, 0, 0));
        assert!(on_tick(&mut st, &s, at(15, 0, 0)).is_empty());
        assert_eq!(on_tick(&mut st, &s, at(18, 0, 0)), vec![Command::PauseRun]);
        assert!(on_tick(&mut st, &s, at(19, 0, 0)).is_empty());
        let next_day = at(14, 0, 0) + Duration::days(1);
        assert_eq!(on_tick(&mut st, &s, next_day), vec![Command::ResumeRun]);
    }

    #[test]
    fn checkpoint_by_judgment_count() {
        let mut s = Schedule::default();
        s.checkpoint_every = Some(CheckpointEvery {
            judgments: Some(50),
            minutes: None,
        });
        let mut st = SchedulerState::new("r", at(0, 0, 0));
        for _ in 0..49 {
            st.record_judgment(&s, "A", at(1, 0, 0));
        }
        assert!(on_tick(&mut st, &s, at(1, 0, 0)).is_empty());
        st.record_judgment(&s, "A", at(1, 0, 0));
        assert_eq!(on_tick(&mut st, &s, at(1, 0, 0)), vec![Command::Checkpoint]);
        assert!(on_tick(&mut st, &s, at(1, 0, 0)).is_empty());
    }

    #[test]
    fn balance_scores() {
        let mut st = SchedulerState::new("r", at(0, 0, 0));
        st.per_window_counts.entry(0).or_default().insert("A".into(), 100);
        let b = window_balance(&st, 2);
        assert!((b.score - 2.0).abs() < 1e-12);
        assert_eq!(b.per_group["A"].counts, vec![100, 0]);

        st.per_window_counts.entry(1).or_default().insert("A".into(), 100);
        assert_eq!(window_balance(&st, 2).score, 0.0);
        assert_eq!(window_balance(&st, 1).score, 0.0);
    }

    #[test]
    fn balancing_limits_lead_of_a_window() {
        let s = Schedule {
            windows: vec![Window::daily(10, 14), Window::daily(22, 2)],
            balance_across_groups: true,
            balance_slack: 2,
            ..Schedule::default()
        };
        let mut st = SchedulerState::new("r", at(10, 0, 0));
        assert!(st.admits(&s, "A", at(11, 0, 0)));
        st.record_judgment(&s, "A", at(11, 0, 0));
        assert!(st.admits(&s, "A", at(11, 0, 0)));
        st.record_judgment(&s, "A", at(11, 0, 0));
        assert!(!st.admits(&s, "A", at(11, 0, 0)));
        assert!(st.admits(&s, "B", at(11, 0, 0)));
        assert!(st.admits(&s, "A", at(23, 0, 0)));
        assert!(!st.admits(&s, "A", at(15, 0, 0)));
    }
}
