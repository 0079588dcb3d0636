use std::collections::BTreeMap;

use chrono::{DateTime, Duration, DurationRound, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::profile::PopulationProfile;
use crate::digest::mix_seed;

pub(crate) const ARRIVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimEventKind {
    WorkerArrival,
    JudgmentSubmitted,
    WorkerReturns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimEvent {
    pub time: DateTime<Utc>,
    pub seq: u64,
    pub kind: SimEventKind,
    pub worker: String,
    #[serde(default)]
    pub payload: Value,
}

/// Local hour of a UTC instant in a country `offset` hours east of UTC.
pub fn local_hour(t: DateTime<Utc>, offset: i32) -> u32 {
    (t.hour() as i32 + offset).rem_euclid(24) as u32
}

/// Expected arrivals in the hour starting at `hour` (UTC), per country.
pub fn hourly_rates(profile: &PopulationProfile, hour: DateTime<Utc>) -> BTreeMap<String, f64> {
    profile
        .normalized_weights()
        .into_iter()
        .map(|(c, w)| {
            let off = profile.countries[&c].utc_offset;
            let rate = profile.arrival_rate_per_hour * w * profile.diurnal(&c, local_hour(hour, off));
            (c, rate)
        })
        .collect()
}

/// Inhomogeneous Poisson arrivals over `[t0, t1)`: for every UTC hour and
/// country, a Poisson count with mean `rate * weight * diurnal(local hour)`
/// (scaled by the covered part of the hour), placed uniformly in the hour.
/// Workers are numbered `sim-<n>` in arrival order.
pub fn simulate_arrivals(profile: &PopulationProfile, t0: DateTime<Utc>, t1: DateTime<Utc>) -> Vec<SimEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(profile.seed, ARRIVAL_STREAM));
    let mut raw: Vec<(DateTime<Utc>, String)> = Vec::new();
    let mut hour = t0.duration_trunc(Duration::hours(1)).expect("hour truncation");
    while hour < t1 {
        let next = hour + Duration::hours(1);
        let lo = hour.max(t0);
        let hi = next.min(t1);
        let span_ms = (hi - lo).num_milliseconds();
        let frac = span_ms as f64 / 3_600_000.0;
        for (country, rate) in hourly_rates(profile, hour) {
            let mean = rate * frac;
            if mean <= 0.0 {
                continue;
            }
            let n = Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64;
            for _ in 0..n {
                let at = lo + Duration::milliseconds(rng.random_range(0..span_ms.max(1)));
                raw.push((at, country.clone()));
            }
        }
        hour = next;
    }
    raw.sort();
    raw.into_iter()
        .enumerate()
        .map(|(i, (time, country))| SimEvent {
            time,
            seq: i as u64,
            kind: SimEventKind::WorkerArrival,
            worker: format!("sim-{i}"),
            payload: json!({ "country": country }),
        })
        .collect()
}

/// Where a visit happens relative to the worker's first one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorContext {
    /// Group of the first visit; `None` for a new worker.
    pub from_group: Option<String>,
    pub to_group: String,
}

impl BehaviorContext {
    pub fn new_worker(group: &str) -> Self {
        Self {
            from_group: None,
            to_group: group.to_string(),
        }
    }

    pub fn returning(from: &str, to: &str) -> Self {
        Self {
            from_group: Some(from.to_string()),
            to_group: to.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Behavior {
    pub decision_time: f64,
    pub correct: bool,
}

/// Decision time is a lognormal draw scaled by the worker's speed, the
/// group multiplier, the same-condition speedup for returners and the
/// crossover multiplier for workers who switched condition. Correctness is
/// Bernoulli(base accuracy) regardless of history.
pub fn simulate_worker_behavior(
    profile: &PopulationProfile,
    kinds: &BTreeMap<String, String>,
    worker_speed: f64,
    ctx: &BehaviorContext,
    rng: &mut impl Rng,
) -> Behavior {
    let dt = profile.decision_time;
    let base = if dt.sigma > 0.0 {
        LogNormal::new(dt.median_seconds.ln(), dt.sigma)
            .expect("valid lognormal")
            .sample(rng)
    } else {
        dt.median_seconds
    };
    let kind = |g: &str| kinds.get(g).map(String::as_str);
    let mut t = base * worker_speed;
    if let Some(k) = kind(&ctx.to_group) {
        t *= profile.group_multipliers.get(k).copied().unwrap_or(1.0);
    }
    match &ctx.from_group {
        Some(from) if *from == ctx.to_group => t *= profile.returning_speedup,
        Some(from) => {
            if let (Some(a), Some(b)) = (kind(from), kind(&ctx.to_group)) {
                t *= profile.crossover_multiplier(a, b);
            }
        }
        None => {}
    }
    let correct = rng.random_bool(profile.base_accuracy.clamp(0.0, 1.0));
    Behavior {
        decision_time: t,
        correct,
    }
}

/// Per-worker speed factor (lognormal, median 1).
pub fn worker_speed(profile: &PopulationProfile, rng: &mut impl Rng) -> f64 {
    if profile.worker_speed_sigma > 0.0 {
        LogNormal::new(0.0, profile.worker_speed_sigma)
            .expect("valid lognormal")
            .sample(rng)
    } else {
        1.0
    }
}
