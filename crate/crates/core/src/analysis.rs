//! Bias diagnostics over a judgment log: returning and crossover workers,
//! country dominance, robust z-score comparisons of worker cohorts and the
//! share of data a cleanup policy would discard.
//!
//! A *participation* is one worker's judgments in one block during one
//! visit. A worker's earliest participation makes them *new*; every later
//! one is returning, either to the same group or across groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::Judgment;
use crate::scheduler::{window_balance, Schedule, SchedulerState, WindowBalance};
use crate::worker::TrustConfig;

/// Scale that makes the MAD a consistent estimator of a normal sigma.
pub const MAD_SCALE: f64 = 1.4826;
/// IQR of a standard normal.
const IQR_SCALE: f64 = 1.348_979_500_392_163_5;
pub const MIN_SAMPLE: usize = 5;
pub const REPORT_VERSION: u32 = 1;
pub const VALID_DEFINITION: &str =
    "reference population (valid contributions): judgments from trusted, policy-compliant workers in their first participation";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("degenerate reference: median absolute deviation is 0")]
    DegenerateReference,
    #[error("reference too small: {0} values (need {MIN_SAMPLE})")]
    SmallReference(usize),
    #[error("empty judgment log")]
    EmptyLog,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

/// Linearly interpolated quantile of the sorted sample.
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(xs: &[f64]) -> Option<f64> {
    let m = median(xs)?;
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

pub fn iqr(xs: &[f64]) -> Option<f64> {
    Some(quantile(xs, 0.75)? - quantile(xs, 0.25)?)
}

/// `(x - median(ref)) / (1.4826 * MAD(ref))` for every value.
pub fn robust_z(values: &[f64], reference: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    robust_z_scaled(values, reference, MAD_SCALE)
}

pub fn robust_z_scaled(values: &[f64], reference: &[f64], scale: f64) -> Result<Vec<f64>, AnalysisError> {
    if reference.len() < MIN_SAMPLE {
        return Err(AnalysisError::SmallReference(reference.len()));
    }
    let m = median(reference).unwrap_or(0.0);
    let d = mad(reference).unwrap_or(0.0) * scale;
    if d <= 0.0 {
        return Err(AnalysisError::DegenerateReference);
    }
    Ok(values.iter().map(|x| (x - m) / d).collect())
}

/// Fallback for a degenerate MAD: the reference IQR rescaled to a normal
/// sigma. Still degenerate when the IQR is 0 as well.
pub fn robust_z_iqr(values: &[f64], reference: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if reference.len() < MIN_SAMPLE {
        return Err(AnalysisError::SmallReference(reference.len()));
    }
    let m = median(reference).unwrap_or(0.0);
    let d = iqr(reference).unwrap_or(0.0) / IQR_SCALE;
    if d <= 0.0 {
        return Err(AnalysisError::DegenerateReference);
    }
    Ok(values.iter().map(|x| (x - m) / d).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cohort {
    New,
    ReturningSame,
    SupportToBase,
    BaseToSupport,
    BadToGood,
    /// Crossovers between groups whose kinds fit none of the above.
    CrossoverOther,
    Untrusted,
}

impl Cohort {
    pub const ALL: [Cohort; 7] = [
        Cohort::New,
        Cohort::ReturningSame,
        Cohort::SupportToBase,
        Cohort::BaseToSupport,
        Cohort::BadToGood,
        Cohort::CrossoverOther,
        Cohort::Untrusted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::New => "new",
            Cohort::ReturningSame => "returning-same",
            Cohort::SupportToBase => "support->base",
            Cohort::BaseToSupport => "base->support",
            Cohort::BadToGood => "bad->good",
            Cohort::CrossoverOther => "crossover-other",
            Cohort::Untrusted => "untrusted",
        }
    }

    pub fn is_returning(self) -> bool {
        !matches!(self, Cohort::New | Cohort::Untrusted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CleanupPolicy {
    DropReturning,
    DropCrossover,
    DropUntrusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    DecisionTime,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnalysisConfig {
    pub top_k: usize,
    pub mad_scale: f64,
    /// Standardize against each group's own reference before pooling.
    pub per_condition: bool,
    /// Group id -> kind (`base`, `good`, `bad`); drives the crossover cohorts.
    pub kinds: BTreeMap<String, String>,
    pub trust: TrustConfig,
    pub cleanup: BTreeSet<CleanupPolicy>,
    /// When present, window balance is computed from judgment timestamps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            mad_scale: MAD_SCALE,
            per_condition: false,
            kinds: BTreeMap::new(),
            trust: TrustConfig::default(),
            cleanup: BTreeSet::from([CleanupPolicy::DropReturning]),
            schedule: None,
        }
    }
}

/// One worker's judgments in one block and visit, in log order.
#[derive(Debug, Clone, PartialEq)]
pub struct Participation<'a> {
    pub worker: &'a str,
    pub block: &'a str,
    pub group: &'a str,
    pub session: u32,
    pub cohort: Cohort,
    pub judgments: Vec<&'a Judgment>,
}

impl Participation<'_> {
    pub fn all_valid(&self) -> bool {
        self.judgments.iter().all(|j| j.valid)
    }

    /// Share of gold answered correctly, if any gold was seen.
    pub fn gold_accuracy(&self) -> Option<f64> {
        let gold: Vec<bool> = self.judgments.iter().filter_map(|j| j.gold_correct).collect();
        (!gold.is_empty()).then(|| gold.iter().filter(|c| **c).count() as f64 / gold.len() as f64)
    }
}

/// Workers whose gold record in the log fails the trust rule.
pub fn untrusted_workers<'a>(log: &'a [Judgment], trust: &TrustConfig) -> BTreeSet<&'a str> {
    let mut gold: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for j in log {
        let e = gold.entry(j.worker_id.as_str()).or_default();
        if let Some(c) = j.gold_correct {
            e.1 += 1;
            if c {
                e.0 += 1;
            }
        }
    }
    gold.into_iter()
        .filter(|(_, (c, t))| !trust.is_trusted(*c, *t))
        .map(|(w, _)| w)
        .collect()
}

fn kind_cohort(from: Option<&str>, to: Option<&str>) -> Cohort {
    let support = |k: Option<&str>| matches!(k, Some("good" | "bad"));
    match (from, to) {
        (Some("bad"), Some("good")) => Cohort::BadToGood,
        (f, Some("base")) if support(f) => Cohort::SupportToBase,
        (Some("base"), t) if support(t) => Cohort::BaseToSupport,
        _ => Cohort::CrossoverOther,
    }
}

/// Splits the log into participations and labels each with its cohort.
/// Participations are ordered by worker, then by first judgment.
pub fn participations<'a>(log: &'a [Judgment], cfg: &AnalysisConfig) -> Vec<Participation<'a>> {
    let untrusted = untrusted_workers(log, &cfg.trust);
    let mut by_key: BTreeMap<(&str, &str, u32), (usize, Vec<&Judgment>)> = BTreeMap::new();
    for (i, j) in log.iter().enumerate() {
        by_key
            .entry((j.worker_id.as_str(), j.block_id.as_str(), j.session))
            .or_insert_with(|| (i, Vec::new()))
            .1
            .push(j);
    }
    let mut per_worker: BTreeMap<&str, Vec<(usize, &str, u32, Vec<&Judgment>)>> = BTreeMap::new();
    for ((w, b, s), (first, js)) in by_key {
        per_worker.entry(w).or_default().push((first, b, s, js));
    }
    let mut out = Vec::new();
    for (worker, mut parts) in per_worker {
        parts.sort_by_key(|p| {
            let t = p.3.iter().map(|j| j.submitted_at).min();
            (t, p.0)
        });
        let first_group = parts[0].3[0].group_id.as_str();
        let kind = |g: &str| cfg.kinds.get(g).map(String::as_str);
        for (i, (_, block, session, judgments)) in parts.into_iter().enumerate() {
            let group = judgments[0].group_id.as_str();
            let cohort = if untrusted.contains(worker) {
                Cohort::Untrusted
            } else if i == 0 {
                Cohort::New
            } else if group == first_group {
                Cohort::ReturningSame
            } else {
                kind_cohort(kind(first_group), kind(group))
            };
            out.push(Participation {
                worker,
                block,
                group,
                session,
                cohort,
                judgments,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CohortFractions {
    pub workers: usize,
    pub returning_workers: usize,
    pub crossover_workers: usize,
    pub returning_fraction: f64,
    pub crossover_fraction: f64,
}

fn worker_sets(log: &[Judgment]) -> (BTreeSet<&str>, BTreeSet<&str>, usize) {
    let mut parts: BTreeMap<&str, BTreeSet<(&str, u32)>> = BTreeMap::new();
    let mut groups: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for j in log {
        parts
            .entry(j.worker_id.as_str())
            .or_default()
            .insert((j.block_id.as_str(), j.session));
        groups.entry(j.worker_id.as_str()).or_default().insert(j.group_id.as_str());
    }
    let returning = parts.iter().filter(|(_, p)| p.len() >= 2).map(|(w, _)| *w).collect();
    let crossover = groups.iter().filter(|(_, g)| g.len() >= 2).map(|(w, _)| *w).collect();
    (returning, crossover, parts.len())
}

pub fn cohort_fractions(log: &[Judgment]) -> CohortFractions {
    let (returning, crossover, workers) = worker_sets(log);
    let frac = |n: usize| if workers == 0 { 0.0 } else { n as f64 / workers as f64 };
    CohortFractions {
        workers,
        returning_workers: returning.len(),
        crossover_workers: crossover.len(),
        returning_fraction: frac(returning.len()),
        crossover_fraction: frac(crossover.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CountryShare {
    pub country: String,
    pub judgments: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Dominance {
    pub k: usize,
    pub top_k_share: f64,
    /// Share descending, then country code ascending.
    pub shares: Vec<CountryShare>,
}

pub fn dominance(log: &[Judgment], k: usize) -> Dominance {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for j in log {
        *counts.entry(j.country.as_str()).or_default() += 1;
    }
    let total = log.len().max(1) as f64;
    let mut shares: Vec<CountryShare> = counts
        .into_iter()
        .map(|(c, n)| CountryShare {
            country: c.to_string(),
            judgments: n,
            share: n as f64 / total,
        })
        .collect();
    shares.sort_by(|a, b| b.judgments.cmp(&a.judgments).then_with(|| a.country.cmp(&b.country)));
    let top = shares.iter().take(k).map(|s| s.judgments).sum::<usize>();
    Dominance {
        k,
        top_k_share: if log.is_empty() { 0.0 } else { top as f64 / total },
        shares,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiscardEstimate {
    pub policies: BTreeSet<CleanupPolicy>,
    pub total: usize,
    pub discarded: usize,
    pub fraction: f64,
    /// Fraction each policy would discard on its own.
    pub per_policy: BTreeMap<CleanupPolicy, f64>,
}

fn matches_policy(
    p: CleanupPolicy,
    j: &Judgment,
    returning: &BTreeSet<&str>,
    crossover: &BTreeSet<&str>,
    untrusted: &BTreeSet<&str>,
) -> bool {
    let w = j.worker_id.as_str();
    match p {
        CleanupPolicy::DropReturning => returning.contains(w),
        CleanupPolicy::DropCrossover => crossover.contains(w),
        CleanupPolicy::DropUntrusted => untrusted.contains(w),
    }
}

/// Fraction of judgments a cleanup would drop. Dropping a returning or
/// crossover worker drops all their judgments, first visit included.
pub fn estimate_discard(log: &[Judgment], policies: &BTreeSet<CleanupPolicy>, trust: &TrustConfig) -> DiscardEstimate {
    let (returning, crossover, _) = worker_sets(log);
    let untrusted = untrusted_workers(log, trust);
    let total = log.len();
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    let discarded = log
        .iter()
        .filter(|j| policies.iter().any(|p| matches_policy(*p, j, &returning, &crossover, &untrusted)))
        .count();
    let per_policy = policies
        .iter()
        .map(|p| {
            let n = log
                .iter()
                .filter(|j| matches_policy(*p, j, &returning, &crossover, &untrusted))
                .count();
            (*p, frac(n))
        })
        .collect();
    DiscardEstimate {
        policies: policies.clone(),
        total,
        discarded,
        fraction: frac(discarded),
        per_policy,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    Mad,
    /// MAD was 0; the IQR was used instead.
    Iqr,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ZScoreSummary {
    pub cohort: Cohort,
    pub metric: Metric,
    pub n: usize,
    /// Absent when `n` is below the minimum sample or the reference is
    /// degenerate.
    pub median_z: Option<f64>,
    pub interquartile_range: Option<f64>,
    pub scaling: Scaling,
}

/// Raw values of one metric for a cohort, each tagged with its group:
/// decision times per judgment, gold accuracy per worker.
pub fn metric_values(parts: &[Participation<'_>], cohort: Cohort, metric: Metric) -> Vec<(String, f64)> {
    let mine = parts.iter().filter(|p| p.cohort == cohort);
    match metric {
        Metric::DecisionTime => mine
            .flat_map(|p| p.judgments.iter().map(|j| (p.group.to_string(), j.decision_time)))
            .collect(),
        Metric::Accuracy => {
            let mut per_worker: BTreeMap<(&str, &str), (u32, u32)> = BTreeMap::new();
            for p in mine {
                for j in &p.judgments {
                    if let Some(c) = j.gold_correct {
                        let e = per_worker.entry((p.worker, p.group)).or_default();
                        e.1 += 1;
                        e.0 += u32::from(c);
                    }
                }
            }
            per_worker
                .into_iter()
                .map(|((_, g), (c, t))| (g.to_string(), f64::from(c) / f64::from(t)))
                .collect()
        }
    }
}

/// Per-worker gold accuracy for new workers and for returning visits
/// (same group or crossover).
pub fn accuracy_new_vs_returning(parts: &[Participation<'_>]) -> (Vec<f64>, Vec<f64>) {
    let new = metric_values(parts, Cohort::New, Metric::Accuracy)
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let mut returning: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for p in parts.iter().filter(|p| p.cohort.is_returning()) {
        for c in p.judgments.iter().filter_map(|j| j.gold_correct) {
            let e = returning.entry(p.worker).or_default();
            e.1 += 1;
            e.0 += u32::from(c);
        }
    }
    let returning = returning
        .into_values()
        .map(|(c, t)| f64::from(c) / f64::from(t))
        .collect();
    (new, returning)
}

fn reference_values(parts: &[Participation<'_>], metric: Metric) -> Vec<(String, f64)> {
    let valid: Vec<Participation<'_>> = parts
        .iter()
        .filter(|p| p.cohort == Cohort::New && p.all_valid())
        .cloned()
        .collect();
    metric_values(&valid, Cohort::New, metric)
}

/// z-values with the scaling used: MAD first, IQR when MAD is 0.
fn standardize(values: &[f64], reference: &[f64], scale: f64) -> Option<(Vec<f64>, Scaling)> {
    match robust_z_scaled(values, reference, scale) {
        Ok(z) => Some((z, Scaling::Mad)),
        Err(AnalysisError::DegenerateReference) => robust_z_iqr(values, reference).ok().map(|z| (z, Scaling::Iqr)),
        Err(_) => None,
    }
}

/// Robust z-values of a cohort's metric, pooled first or per condition.
pub fn cohort_z(parts: &[Participation<'_>], cohort: Cohort, metric: Metric, cfg: &AnalysisConfig) -> (Vec<f64>, Scaling) {
    let values = metric_values(parts, cohort, metric);
    let reference = reference_values(parts, metric);
    if !cfg.per_condition {
        let v: Vec<f64> = values.iter().map(|x| x.1).collect();
        let r: Vec<f64> = reference.iter().map(|x| x.1).collect();
        return standardize(&v, &r, cfg.mad_scale).unwrap_or((Vec::new(), Scaling::Degenerate));
    }
    let mut out = Vec::new();
    let mut scaling = Scaling::Mad;
    let groups: BTreeSet<&str> = values.iter().map(|x| x.0.as_str()).collect();
    for g in groups {
        let v: Vec<f64> = values.iter().filter(|x| x.0 == g).map(|x| x.1).collect();
        let r: Vec<f64> = reference.iter().filter(|x| x.0 == g).map(|x| x.1).collect();
        match standardize(&v, &r, cfg.mad_scale) {
            Some((z, s)) => {
                out.extend(z);
                if s == Scaling::Iqr {
                    scaling = Scaling::Iqr;
                }
            }
            None => scaling = Scaling::Degenerate,
        }
    }
    (out, scaling)
}

fn summarize(parts: &[Participation<'_>], cohort: Cohort, metric: Metric, cfg: &AnalysisConfig) -> ZScoreSummary {
    let n = metric_values(parts, cohort, metric).len();
    if n < MIN_SAMPLE {
        return ZScoreSummary {
            cohort,
            metric,
            n,
            median_z: None,
            interquartile_range: None,
            scaling: Scaling::Mad,
        };
    }
    let (z, scaling) = cohort_z(parts, cohort, metric, cfg);
    ZScoreSummary {
        cohort,
        metric,
        n,
        median_z: median(&z),
        interquartile_range: iqr(&z),
        scaling: if z.is_empty() { Scaling::Degenerate } else { scaling },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CohortSize {
    pub cohort: Cohort,
    pub participations: usize,
    pub workers: usize,
    pub judgments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BiasReport {
    pub report_version: u32,
    pub reference_population: String,
    pub pooling: String,
    pub total_judgments: usize,
    pub total_workers: usize,
    pub total_participations: usize,
    pub returning_worker_fraction: f64,
    pub crossover_worker_fraction: f64,
    pub dominance: Dominance,
    pub cohorts: Vec<CohortSize>,
    pub z_scores: Vec<ZScoreSummary>,
    pub discard: DiscardEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_balance: Option<WindowBalance>,
    /// Non-fatal problems, such as a degenerate reference.
    pub flags: Vec<String>,
}

impl BiasReport {
    pub fn cohort(&self, c: Cohort) -> Option<&CohortSize> {
        self.cohorts.iter().find(|x| x.cohort == c)
    }

    pub fn z(&self, c: Cohort, m: Metric) -> Option<&ZScoreSummary> {
        self.z_scores.iter().find(|x| x.cohort == c && x.metric == m)
    }
}

/// Per-group window counts of a log under `schedule`.
pub fn log_window_balance(log: &[Judgment], schedule: &Schedule) -> WindowBalance {
    let mut st = SchedulerState::new("", chrono::DateTime::<chrono::Utc>::UNIX_EPOCH);
    for j in log {
        st.record_judgment(schedule, &j.group_id, j.submitted_at);
    }
    window_balance(&st, schedule.window_count())
}

pub fn build_report(log: &[Judgment], cfg: &AnalysisConfig) -> Result<BiasReport, AnalysisError> {
    if log.is_empty() {
        return Err(AnalysisError::EmptyLog);
    }
    let parts = participations(log, cfg);
    let fractions = cohort_fractions(log);
    let mut cohorts = Vec::new();
    let mut z_scores = Vec::new();
    let mut flags = Vec::new();
    for c in Cohort::ALL {
        let mine: Vec<&Participation<'_>> = parts.iter().filter(|p| p.cohort == c).collect();
        if mine.is_empty() {
            continue;
        }
        let workers: BTreeSet<&str> = mine.iter().map(|p| p.worker).collect();
        cohorts.push(CohortSize {
            cohort: c,
            participations: mine.len(),
            workers: workers.len(),
            judgments: mine.iter().map(|p| p.judgments.len()).sum(),
        });
        for m in [Metric::DecisionTime, Metric::Accuracy] {
            let s = summarize(&parts, c, m, cfg);
            if s.scaling != Scaling::Mad {
                flags.push(format!(
                    "{} {}: {} reference",
                    c.as_str(),
                    metric_name(m),
                    match s.scaling {
                        Scaling::Iqr => "degenerate MAD, IQR-scaled",
                        _ => "degenerate",
                    }
                ));
            }
            z_scores.push(s);
        }
    }
    Ok(BiasReport {
        report_version: REPORT_VERSION,
        reference_population: VALID_DEFINITION.to_string(),
        pooling: if cfg.per_condition { "per-condition" } else { "pooled" }.to_string(),
        total_judgments: log.len(),
        total_workers: fractions.workers,
        total_participations: parts.len(),
        returning_worker_fraction: fractions.returning_fraction,
        crossover_worker_fraction: fractions.crossover_fraction,
        dominance: dominance(log, cfg.top_k),
        cohorts,
        z_scores,
        discard: estimate_discard(log, &cfg.cleanup, &cfg.trust),
        window_balance: cfg.schedule.as_ref().map(|s| log_window_balance(log, s)),
        flags,
    })
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::DecisionTime => "decision-time",
        Metric::Accuracy => "accuracy",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Plain-text summary table of a report.
pub fn render_text(r: &BiasReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "bias report v{}", r.report_version);
    let _ = writeln!(s, "{}", r.reference_population);
    let _ = writeln!(s, "z-scores: {}", r.pooling);
    let _ = writeln!(
        s,
        "judgments {}  workers {}  participations {}",
        r.total_judgments, r.total_workers, r.total_participations
    );
    let _ = writeln!(
        s,
        "returning workers {:.3}  crossover workers {:.3}",
        r.returning_worker_fraction, r.crossover_worker_fraction
    );
    let top: Vec<String> = r
        .dominance
        .shares
        .iter()
        .take(r.dominance.k)
        .map(|c| format!("{} {:.3}", c.country, c.share))
        .collect();
    let _ = writeln!(s, "top-{} share {:.3} ({})", r.dominance.k, r.dominance.top_k_share, top.join(", "));
    let policies: Vec<String> = r
        .discard
        .per_policy
        .iter()
        .map(|(p, f)| format!("{} {f:.3}", serde_json::to_value(p).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()))
        .collect();
    let _ = writeln!(s, "discarded {:.3} ({})", r.discard.fraction, policies.join(", "));
    if let Some(b) = &r.window_balance {
        let _ = writeln!(s, "window balance {:.3}", b.score);
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<16} {:>6} {:>8} {:>10} {:>8} {:>10} {:>8}",
        "cohort", "parts", "judg", "time z", "iqr", "acc z", "iqr"
    );
    for c in &r.cohorts {
        let t = r.z(c.cohort, Metric::DecisionTime);
        let a = r.z(c.cohort, Metric::Accuracy);
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>8} {:>10} {:>8} {:>10} {:>8}",
            c.cohort.as_str(),
            c.participations,
            c.judgments,
            opt(t.and_then(|z| z.median_z)),
            opt(t.and_then(|z| z.interquartile_range)),
            opt(a.and_then(|z| z.median_z)),
            opt(a.and_then(|z| z.interquartile_range)),
        );
    }
    for f in &r.flags {
        let _ = writeln!(s, "flag: {f}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};
    use proptest::prelude::*;
    use statrs::statistics::{Data, OrderStatistics};

    fn j(worker: &str, group: &str, session: u32, minute: i64) -> Judgment {
        Judgment {
            unit_id: format!("u{minute}"),
            worker_id: worker.into(),
            group_id: group.into(),
            block_id: format!("do-{group}"),
            answer: "include".into(),
            decision_time: 20.0,
            submitted_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::minutes(minute),
            is_gold: false,
            gold_correct: None,
            valid: true,
            country: "VE".into(),
            session,
        }
    }

    /// Median and MAD through statrs, as an oracle independent of `quantile`.
    fn oracle_z(x: f64, reference: &[f64]) -> f64 {
        let mut data = Data::new(reference.to_vec());
        let m = data.median();
        let mut dev = Data::new(reference.iter().map(|r| (r - m).abs()).collect::<Vec<_>>());
        (x - m) / (1.4826 * dev.median())
    }

    #[test]
    fn robust_z_fixture_matches_oracle() {
        let reference = [10.0, 12.0, 14.0, 16.0, 18.0];
        let z = robust_z(&[20.0], &reference).unwrap()[0];
        assert!((z - oracle_z(20.0, &reference)).abs() < 1e-9);
        // Frozen from the oracle.
        assert!((z - 2.023_472_278_429_786).abs() < 1e-9);
        assert_eq!(robust_z(&[14.0], &reference).unwrap(), vec![0.0]);
    }

    #[test]
    fn degenerate_and_small_references() {
        assert_eq!(robust_z(&[1.0], &[3.0; 6]), Err(AnalysisError::DegenerateReference));
        assert_eq!(robust_z(&[1.0], &[1.0, 2.0]), Err(AnalysisError::SmallReference(2)));
        assert_eq!(robust_z_iqr(&[1.0], &[3.0; 6]), Err(AnalysisError::DegenerateReference));
        let z = robust_z_iqr(&[20.0], &[10.0, 12.0, 14.0, 16.0, 18.0]).unwrap()[0];
        assert!((z - 6.0 * IQR_SCALE / 4.0).abs() < 1e-12);
    }

    #[test]
    fn fractions_on_hand_counted_log() {
        let log = vec![
            j("w1", "A", 0, 0),
            j("w2", "A", 0, 1),
            j("w2", "B", 1, 2),
            j("w3", "A", 0, 3),
            j("w3", "A", 1, 4),
        ];
        let f = cohort_fractions(&log);
        assert_eq!((f.returning_workers, f.crossover_workers, f.workers), (2, 1, 3));
        assert!((f.returning_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert!((f.crossover_fraction - 1.0 / 3.0).abs() < 1e-12);
        let single = vec![j("w1", "A", 0, 0), j("w2", "B", 0, 1)];
        let f = cohort_fractions(&single);
        assert_eq!((f.returning_fraction, f.crossover_fraction), (0.0, 0.0));
    }

    #[test]
    fn discard_examples() {
        let log = vec![j("w1", "A", 0, 0), j("w2", "A", 0, 1), j("w2", "B", 1, 2)];
        let t = TrustConfig::default();
        let d = estimate_discard(&log, &BTreeSet::from([CleanupPolicy::DropReturning]), &t);
        assert_eq!(d.discarded, 2);
        assert!((d.fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(estimate_discard(&log, &BTreeSet::new(), &t).fraction, 0.0);
    }

    #[test]
    fn dominance_examples() {
        let mut log = Vec::new();
        for (c, n) in [("VE", 285), ("EG", 118), ("UA", 78), ("ZZ", 519)] {
            for i in 0..n {
                let mut x = j(&format!("{c}{i}"), "A", 0, i);
                x.country = c.into();
                log.push(x);
            }
        }
        let d = dominance(&log, 3);
        // The rest is one bucket here, so pick the three named ones explicitly.
        let named: f64 = d.shares.iter().filter(|s| s.country != "ZZ").map(|s| s.share).sum();
        assert!((named - 0.481).abs() < 1e-12);
        assert_eq!(d.shares[0].country, "ZZ");

        let uniform: Vec<Judgment> = (0..10)
            .map(|i| {
                let mut x = j("w", "A", 0, i);
                x.country = format!("C{i}");
                x
            })
            .collect();
        assert!((dominance(&uniform, 3).top_k_share - 0.3).abs() < 1e-12);
        assert_eq!(dominance(&uniform, 3).shares[0].country, "C0");
        assert_eq!(dominance(&log[..5], 3).top_k_share, 1.0);
    }

    #[test]
    fn crossover_cohorts_follow_kinds() {
        let cfg = AnalysisConfig {
            kinds: BTreeMap::from([
                ("B".into(), "base".into()),
                ("G".into(), "good".into()),
                ("X".into(), "bad".into()),
            ]),
            ..AnalysisConfig::default()
        };
        let log = vec![
            j("w1", "X", 0, 0),
            j("w1", "G", 1, 1),
            j("w2", "B", 0, 2),
            j("w2", "G", 1, 3),
            j("w3", "G", 0, 4),
            j("w3", "B", 1, 5),
            j("w4", "G", 0, 6),
            j("w4", "G", 1, 7),
            j("w5", "G", 0, 8),
            j("w5", "X", 1, 9),
        ];
        let parts = participations(&log, &cfg);
        let of = |w: &str| parts.iter().filter(|p| p.worker == w).map(|p| p.cohort).collect::<Vec<_>>();
        assert_eq!(of("w1"), vec![Cohort::New, Cohort::BadToGood]);
        assert_eq!(of("w2"), vec![Cohort::New, Cohort::BaseToSupport]);
        assert_eq!(of("w3"), vec![Cohort::New, Cohort::SupportToBase]);
        assert_eq!(of("w4"), vec![Cohort::New, Cohort::ReturningSame]);
        assert_eq!(of("w5"), vec![Cohort::New, Cohort::CrossoverOther]);
    }

    #[test]
    fn untrusted_workers_form_their_own_cohort() {
        let mut log = Vec::new();
        for i in 0..4 {
            let mut x = j("bad", "A", 0, i);
            x.is_gold = true;
            x.gold_correct = Some(i == 0);
            log.push(x);
        }
        log.push(j("good", "A", 0, 10));
        let parts = participations(&log, &AnalysisConfig::default());
        assert_eq!(parts.iter().find(|p| p.worker == "bad").unwrap().cohort, Cohort::Untrusted);
        assert_eq!(parts.iter().find(|p| p.worker == "good").unwrap().cohort, Cohort::New);
    }

    #[test]
    fn report_is_deterministic_and_flags_small_samples() {
        let log: Vec<Judgment> = (0..30)
            .map(|i| {
                let mut x = j(&format!("w{}", i % 10), "A", (i / 10) as u32, i);
                x.decision_time = 10.0 + (i % 7) as f64;
                x
            })
            .collect();
        let a = build_report(&log, &AnalysisConfig::default()).unwrap();
        let b = build_report(&log, &AnalysisConfig::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.total_participations, 30);
        assert!(render_text(&a).contains("returning-same"));
        assert_eq!(build_report(&[], &AnalysisConfig::default()), Err(AnalysisError::EmptyLog));
    }

    fn arb_log() -> impl Strategy<Value = Vec<Judgment>> {
        prop::collection::vec((0u8..8, 0u8..4, 0u32..3, 0u8..5, 1.0f64..60.0, prop::option::of(any::<bool>())), 1..80)
            .prop_map(|rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, (w, g, s, c, t, gold))| {
                        let mut x = j(&format!("w{w}"), &format!("G{g}"), s, i as i64);
                        x.country = format!("C{c}");
                        x.decision_time = t;
                        x.is_gold = gold.is_some();
                        x.gold_correct = gold;
                        x
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn reference_against_itself_is_standard(v in prop::collection::vec(-1e3f64..1e3, 5..60)) {
            if let Ok(z) = robust_z(&v, &v) {
                prop_assert!(median(&z).unwrap().abs() < 1e-9);
                prop_assert!((mad(&z).unwrap() * MAD_SCALE - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn cohorts_partition_participations(log in arb_log()) {
            let parts = participations(&log, &AnalysisConfig::default());
            let keys: BTreeSet<(&str, &str, u32)> =
                log.iter().map(|j| (j.worker_id.as_str(), j.block_id.as_str(), j.session)).collect();
            prop_assert_eq!(parts.len(), keys.len());
            prop_assert_eq!(parts.iter().map(|p| p.judgments.len()).sum::<usize>(), log.len());
            let r = build_report(&log, &AnalysisConfig::default()).unwrap();
            prop_assert_eq!(r.cohorts.iter().map(|c| c.participations).sum::<usize>(), keys.len());
            prop_assert!((0.0..=1.0).contains(&r.returning_worker_fraction));
            prop_assert!(r.crossover_worker_fraction <= r.returning_worker_fraction);
        }

        #[test]
        fn crossover_workers_are_returning(log in arb_log()) {
            let (returning, crossover, _) = worker_sets(&log);
            prop_assert!(crossover.is_subset(&returning));
        }

        #[test]
        fn discard_is_monotone(log in arb_log(), a in prop::collection::btree_set(0usize..3, 0..3), extra in 0usize..3) {
            let all = [CleanupPolicy::DropReturning, CleanupPolicy::DropCrossover, CleanupPolicy::DropUntrusted];
            let small: BTreeSet<CleanupPolicy> = a.iter().map(|i| all[*i]).collect();
            let mut big = small.clone();
            big.insert(all[extra]);
            let t = TrustConfig::default();
            prop_assert!(estimate_discard(&log, &big, &t).fraction >= estimate_discard(&log, &small, &t).fraction);
        }

        #[test]
        fn dominance_shares_sum_to_one(log in arb_log(), k in 1usize..6) {
            let d = dominance(&log, k);
            prop_assert!((d.shares.iter().map(|s| s.share).sum::<f64>() - 1.0).abs() < 1e-9);
            for w in d.shares.windows(2) {
                prop_assert!(w[0].share > w[1].share || (w[0].share == w[1].share && w[0].country < w[1].country));
            }
        }
    }
}
