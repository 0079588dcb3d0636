use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CountryProfile {
    pub weight: f64,
    /// Whole hours east of UTC.
    pub utc_offset: i32,
    /// 24 activity multipliers by local hour; falls back to the profile's
    /// default curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diurnal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LogNormalSpec {
    pub median_seconds: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PageBudget {
    pub min: u32,
    pub max: u32,
}

/// Parametric worker population driving the simulated platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PopulationProfile {
    pub countries: BTreeMap<String, CountryProfile>,
    pub default_diurnal: Vec<f64>,
    /// Expected arrivals per hour at activity multiplier 1 (weights are
    /// normalized to sum to 1).
    pub arrival_rate_per_hour: f64,
    pub return_probability: f64,
    /// Probability that a returning worker lands in another condition.
    pub cross_condition_probability: f64,
    /// Mean of the exponential delay before a return visit.
    pub return_delay_hours: f64,
    /// Total pages a worker is willing to do, split across visits.
    pub page_budget: PageBudget,
    pub decision_time: LogNormalSpec,
    /// Per-worker speed factor: lognormal with median 1 and this sigma.
    #[serde(default)]
    pub worker_speed_sigma: f64,
    /// Decision-time multiplier by group kind.
    #[serde(default)]
    pub group_multipliers: BTreeMap<String, f64>,
    pub returning_speedup: f64,
    /// Keyed `"<from-kind>-><to-kind>"`. Estimates; only their direction is
    /// grounded.
    #[serde(default)]
    pub crossover_multipliers: BTreeMap<String, f64>,
    /// Group id or level value -> kind (e.g. base, good, bad).
    #[serde(default)]
    pub kinds: BTreeMap<String, String>,
    pub base_accuracy: f64,
    #[serde(default)]
    pub fingerprint_collision_rate: f64,
    /// Payload field holding the true answer of non-gold units, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_field: Option<String>,
    pub seed: u64,
}

pub fn crossover_key(from: &str, to: &str) -> String {
    format!("{from}->{to}")
}

const TOP: [(&str, f64, i32); 3] = [("VE", 0.285, -4), ("EG", 0.118, 2), ("UA", 0.078, 2)];

const TAIL: [(&str, i32); 30] = [
    ("IN", 5),
    ("BR", -3),
    ("RU", 3),
    ("PH", 8),
    ("ID", 7),
    ("RS", 1),
    ("BD", 6),
    ("PK", 5),
    ("TR", 3),
    ("MX", -6),
    ("CO", -5),
    ("AR", -3),
    ("NG", 1),
    ("KE", 3),
    ("VN", 7),
    ("RO", 2),
    ("BG", 2),
    ("MA", 1),
    ("TN", 1),
    ("PE", -5),
    ("CL", -4),
    ("EC", -5),
    ("BA", 1),
    ("MK", 1),
    ("LK", 5),
    ("NP", 6),
    ("DZ", 1),
    ("PL", 1),
    ("ES", 1),
    ("IT", 1),
];

pub const TAIL_RATIO: f64 = 0.87;

/// Daytime-heavy activity curve by local hour.
pub fn day_curve() -> Vec<f64> {
    (0..24)
        .map(|h| match h {
            0..=5 => 0.25,
            6..=8 => 0.6,
            9..=17 => 1.0,
            18..=21 => 0.8,
            _ => 0.45,
        })
        .collect()
}

impl Default for PopulationProfile {
    fn default() -> Self {
        Self::calibrated()
    }
}

impl PopulationProfile {
    /// Default population: three dominant countries followed by a geometric
    /// tail, 38% returning workers of whom 79% switch condition, 24 s median
    /// decision time and a returning-same speedup of 14/24.
    pub fn calibrated() -> Self {
        let mut countries = BTreeMap::new();
        for (c, w, off) in TOP {
            countries.insert(
                c.to_string(),
                CountryProfile {
                    weight: w,
                    utc_offset: off,
                    diurnal: None,
                },
            );
        }
        let top: f64 = TOP.iter().map(|t| t.1).sum();
        let n = TAIL.len() as i32;
        let first = (1.0 - top) * (1.0 - TAIL_RATIO) / (1.0 - TAIL_RATIO.powi(n));
        for (i, (c, off)) in TAIL.iter().enumerate() {
            countries.insert(
                c.to_string(),
                CountryProfile {
                    weight: first * TAIL_RATIO.powi(i as i32),
                    utc_offset: *off,
                    diurnal: None,
                },
            );
        }
        let kinds = [
            ("base", "base"),
            ("hl-0", "bad"),
            ("hl-33", "bad"),
            ("hl-66", "good"),
            ("hl-100", "good"),
            ("hl-aggr", "good"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let crossover_multipliers = [
            ("good", "base", 0.8),
            ("bad", "base", 0.8),
            ("base", "good", 0.8),
            ("base", "bad", 0.8),
            ("bad", "good", 1.35),
            ("good", "bad", 0.95),
            ("good", "good", 0.85),
            ("bad", "bad", 0.85),
        ]
        .into_iter()
        .map(|(f, t, m)| (crossover_key(f, t), m))
        .collect();
        let group_multipliers = [("base", 1.0), ("good", 0.95), ("bad", 1.05)]
            .into_iter()
            .map(|(k, m)| (k.to_string(), m))
            .collect();
        Self {
            countries,
            default_diurnal: day_curve(),
            arrival_rate_per_hour: 19.25,
            return_probability: 0.38,
            cross_condition_probability: 0.30 / 0.38,
            return_delay_hours: 8.0,
            page_budget: PageBudget { min: 2, max: 4 },
            decision_time: LogNormalSpec {
                median_seconds: 24.0,
                sigma: 0.5,
            },
            worker_speed_sigma: 0.25,
            group_multipliers,
            returning_speedup: 14.0 / 24.0,
            crossover_multipliers,
            kinds,
            base_accuracy: 0.9,
            fingerprint_collision_rate: 0.0,
            truth_field: None,
            seed: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let p: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let problems = p.validate();
        if problems.is_empty() {
            Ok(p)
        } else {
            Err(problems.join("; "))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let prob = |name: &str, v: f64, out: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} must be in [0, 1]"));
            }
        };
        prob("returnProbability", self.return_probability, &mut out);
        prob("crossConditionProbability", self.cross_condition_probability, &mut out);
        prob("baseAccuracy", self.base_accuracy, &mut out);
        prob("fingerprintCollisionRate", self.fingerprint_collision_rate, &mut out);
        if self.countries.is_empty() {
            out.push("countries must not be empty".into());
        }
        for (c, p) in &self.countries {
            if !(p.weight > 0.0) {
                out.push(format!("country {c}: weight must be > 0"));
            }
            if let Some(d) = &p.diurnal {
                check_curve(&format!("country {c}"), d, &mut out);
            }
        }
        check_curve("defaultDiurnal", &self.default_diurnal, &mut out);
        let positive = [
            ("arrivalRatePerHour", self.arrival_rate_per_hour),
            ("returnDelayHours", self.return_delay_hours),
            ("decisionTime.medianSeconds", self.decision_time.median_seconds),
            ("returningSpeedup", self.returning_speedup),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                out.push(format!("{name} must be > 0"));
            }
        }
        if self.decision_time.sigma < 0.0 || self.worker_speed_sigma < 0.0 {
            out.push("sigmas must be >= 0".into());
        }
        for (k, m) in self.group_multipliers.iter().chain(&self.crossover_multipliers) {
            if !(*m > 0.0) {
                out.push(format!("multiplier {k} must be > 0"));
            }
        }
        if self.page_budget.min == 0 || self.page_budget.min > self.page_budget.max {
            out.push("pageBudget must satisfy 1 <= min <= max".into());
        }
        out
    }

    /// Weights normalized to sum to 1.
    pub fn normalized_weights(&self) -> BTreeMap<String, f64> {
        let total: f64 = self.countries.values().map(|c| c.weight).sum();
        self.countries
            .iter()
            .map(|(k, c)| (k.clone(), c.weight / total))
            .collect()
    }

    pub fn diurnal(&self, country: &str, local_hour: u32) -> f64 {
        let curve = self
            .countries
            .get(country)
            .and_then(|c| c.diurnal.as_ref())
            .unwrap_or(&self.default_diurnal);
        curve[(local_hour % 24) as usize]
    }

    pub fn crossover_multiplier(&self, from_kind: &str, to_kind: &str) -> f64 {
        self.crossover_multipliers
            .get(&crossover_key(from_kind, to_kind))
            .copied()
            .unwrap_or(1.0)
    }
}

fn check_curve(name: &str, curve: &[f64], out: &mut Vec<String>) {
    if curve.len() != 24 {
        out.push(format!("{name}: diurnal curve needs 24 values"));
    }
    if curve.iter().any(|v| !(*v >= 0.0)) {
        out.push(format!("{name}: diurnal values must be >= 0"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_profile_is_valid_and_headed_by_three_countries() {
        let p = PopulationProfile::calibrated();
        assert!(p.validate().is_empty(), "{:?}", p.validate());
        let w = p.normalized_weights();
        let total: f64 = w.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((w["VE"] - 0.285).abs() < 1e-9);
        assert!((w["EG"] - 0.118).abs() < 1e-9);
        assert!((w["UA"] - 0.078).abs() < 1e-9);
        let mut sorted: Vec<f64> = w.values().copied().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((sorted[..3].iter().sum::<f64>() - 0.481).abs() < 1e-9);
        assert!((p.cross_condition_probability * p.return_probability - 0.30).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_and_strictness() {
        let p = PopulationProfile::calibrated();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(PopulationProfile::from_json(&text).unwrap(), p);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["bogus"] = 1.into();
        assert!(PopulationProfile::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_values_reported() {
        let mut p = PopulationProfile::calibrated();
        p.return_probability = 1.5;
        p.countries.get_mut("VE").unwrap().weight = 0.0;
        p.crossover_multipliers.insert("a->b".into(), -1.0);
        assert_eq!(p.validate().len(), 3);
    }
}
