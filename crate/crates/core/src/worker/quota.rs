use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Share key for countries outside every bucket.
pub const REST_BUCKET: &str = "rest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Enforcement {
    HardBlock,
    SoftRotate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CountryBucket {
    pub head_country: String,
    pub members: BTreeSet<String>,
    #[serde(default)]
    pub current_judgments: u64,
}

impl CountryBucket {
    pub fn single(country: &str) -> Self {
        Self {
            head_country: country.to_string(),
            members: BTreeSet::from([country.to_string()]),
            current_judgments: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct QuotaConfig {
    pub buckets: Vec<CountryBucket>,
    pub max_share_per_bucket: f64,
    pub enforcement: Enforcement,
    /// Optional cap for the implicit rest bucket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_cap: Option<f64>,
    #[serde(default)]
    pub rest_judgments: u64,
    /// Group sets rotated across buckets in soft-rotate mode. Empty means
    /// the groups are dealt round-robin into one set per bucket.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_sets: Vec<Vec<String>>,
}

impl QuotaConfig {
    pub fn hard(buckets: Vec<CountryBucket>, max_share: f64) -> Self {
        Self {
            buckets,
            max_share_per_bucket: max_share,
            enforcement: Enforcement::HardBlock,
            rest_cap: None,
            rest_judgments: 0,
            group_sets: Vec::new(),
        }
    }

    pub fn validate(&self, groups: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.max_share_per_bucket > 0.0 && self.max_share_per_bucket <= 1.0) {
            out.push("maxSharePerBucket must be in (0, 1]".to_string());
        }
        if let Some(c) = self.rest_cap {
            if !(c > 0.0 && c <= 1.0) {
                out.push("restCap must be in (0, 1]".to_string());
            }
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for b in &self.buckets {
            if !b.members.contains(&b.head_country) {
                out.push(format!("bucket {}: head country is not a member", b.head_country));
            }
            for m in &b.members {
                if let Some(other) = seen.insert(m, &b.head_country) {
                    out.push(format!("country {m} is in buckets {other} and {}", b.head_country));
                }
            }
        }
        for set in &self.group_sets {
            for g in set {
                if !groups.contains(g) {
                    out.push(format!("group set names unknown group {g}"));
                }
            }
        }
        out
    }

    /// Head country of the bucket holding `country`, if any.
    pub fn bucket_of(&self, country: &str) -> Option<&str> {
        self.buckets
            .iter()
            .find(|b| b.members.contains(country))
            .map(|b| b.head_country.as_str())
    }

    pub fn total(&self) -> u64 {
        self.rest_judgments + self.buckets.iter().map(|b| b.current_judgments).sum::<u64>()
    }

    fn counter(&mut self, country: &str) -> &mut u64 {
        match self.buckets.iter_mut().find(|b| b.members.contains(country)) {
            Some(b) => &mut b.current_judgments,
            None => &mut self.rest_judgments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QuotaCheck {
    pub allowed: bool,
    pub bucket: String,
    /// Judgment share per bucket head, plus the rest bucket.
    pub bucket_shares: BTreeMap<String, f64>,
}

/// Judgment shares per bucket and whether `country` may contribute now. Only
/// hard-block mode refuses; with no judgments yet everything is allowed.
pub fn check_quota(config: &QuotaConfig, country: &str) -> QuotaCheck {
    let total = config.total();
    let share = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    let mut bucket_shares: BTreeMap<String, f64> = config
        .buckets
        .iter()
        .map(|b| (b.head_country.clone(), share(b.current_judgments)))
        .collect();
    bucket_shares.insert(REST_BUCKET.to_string(), share(config.rest_judgments));
    let bucket = config.bucket_of(country).unwrap_or(REST_BUCKET).to_string();
    let cap = if bucket == REST_BUCKET {
        config.rest_cap
    } else {
        Some(config.max_share_per_bucket)
    };
    let allowed = total == 0
        || config.enforcement != Enforcement::HardBlock
        || cap.is_none_or(|c| bucket_shares[&bucket] < c);
    QuotaCheck {
        allowed,
        bucket,
        bucket_shares,
    }
}

/// Bucket head -> groups offered at rotation step `checkpoint`. Set `j` goes
/// to bucket `(j + checkpoint) mod B`, so over `B` consecutive steps every
/// set visits every bucket once.
pub fn rotation_mapping(config: &QuotaConfig, groups: &[String], checkpoint: u64) -> BTreeMap<String, Vec<String>> {
    let heads: Vec<&str> = config.buckets.iter().map(|b| b.head_country.as_str()).collect();
    let mut out: BTreeMap<String, Vec<String>> = heads.iter().map(|h| (h.to_string(), Vec::new())).collect();
    let b = heads.len();
    if b == 0 {
        return out;
    }
    let sets: Vec<Vec<String>> = if config.group_sets.is_empty() {
        let mut sets = vec![Vec::new(); b];
        for (i, g) in groups.iter().enumerate() {
            sets[i % b].push(g.clone());
        }
        sets
    } else {
        config.group_sets.clone()
    };
    for (j, set) in sets.into_iter().enumerate() {
        let target = (j + (checkpoint % b as u64) as usize) % b;
        out.get_mut(heads[target]).expect("head present").extend(set);
    }
    for v in out.values_mut() {
        v.sort();
        v.dedup();
    }
    out
}

/// Live quota state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QuotaState {
    pub config: QuotaConfig,
    pub rotations: u64,
    /// Edit waiting for the next checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_max_share: Option<f64>,
    /// Current bucket -> group mapping (soft-rotate only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mapping: BTreeMap<String, Vec<String>>,
}

impl QuotaState {
    pub fn new(config: QuotaConfig, groups: &[String]) -> Self {
        let mapping = if config.enforcement == Enforcement::SoftRotate {
            rotation_mapping(&config, groups, 0)
        } else {
            BTreeMap::new()
        };
        Self {
            config,
            rotations: 0,
            pending_max_share: None,
            mapping,
        }
    }

    /// Grants one judgment slot to `country` if its bucket is under the cap
    /// (hard-block) and counts it. With `enforce` off it only counts.
    pub fn admit(&mut self, country: &str, enforce: bool) -> bool {
        if enforce && !check_quota(&self.config, country).allowed {
            return false;
        }
        *self.config.counter(country) += 1;
        true
    }

    /// Groups a new worker from `country` may be assigned to, or `None` when
    /// unrestricted (hard-block mode, rest bucket).
    pub fn allowed_groups(&self, country: &str) -> Option<&[String]> {
        if self.config.enforcement != Enforcement::SoftRotate {
            return None;
        }
        let head = self.config.bucket_of(country)?;
        self.mapping.get(head).map(Vec::as_slice)
    }

    /// Applies pending edits and, in soft-rotate mode, advances the rotation.
    /// Returns the applied edit and the new mapping, if any.
    pub fn on_checkpoint(&mut self, groups: &[String]) -> (Option<f64>, Option<BTreeMap<String, Vec<String>>>) {
        let applied = self.pending_max_share.take();
        if let Some(s) = applied {
            self.config.max_share_per_bucket = s;
        }
        let rotated = if self.config.enforcement == Enforcement::SoftRotate {
            self.rotations += 1;
            self.mapping = rotation_mapping(&self.config, groups, self.rotations);
            Some(self.mapping.clone())
        } else {
            None
        };
        (applied, rotated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skewed_counts() -> QuotaConfig {
        let mut c = QuotaConfig::hard(
            vec![
                CountryBucket::single("VE"),
                CountryBucket::single("EG"),
                CountryBucket::single("UA"),
            ],
            0.25,
        );
        c.buckets[0].current_judgments = 285;
        c.buckets[1].current_judgments = 118;
        c.buckets[2].current_judgments = 78;
        c.rest_judgments = 519;
        c
    }

    #[test]
    fn skewed_shares() {
        let q = check_quota(&skewed_counts(), "VE");
        let top3: f64 = ["VE", "EG", "UA"].iter().map(|c| q.bucket_shares[*c]).sum();
        assert!((top3 - 0.481).abs() < 1e-12);
        assert!((q.bucket_shares["VE"] - 0.285).abs() < 1e-12);
        assert!(!q.allowed);
        assert!(check_quota(&skewed_counts(), "EG").allowed);
        assert!(check_quota(&skewed_counts(), "BR").allowed);
    }

    #[test]
    fn empty_state_allows_everyone() {
        let mut c = skewed_counts();
        for b in &mut c.buckets {
            b.current_judgments = 0;
        }
        c.rest_judgments = 0;
        assert!(check_quota(&c, "VE").allowed);
    }

    #[test]
    fn rest_cap_applies() {
        let mut c = skewed_counts();
        c.rest_cap = Some(0.5);
        assert!(!check_quota(&c, "BR").allowed);
    }

    #[test]
    fn soft_mode_never_refuses() {
        let mut c = skewed_counts();
        c.enforcement = Enforcement::SoftRotate;
        assert!(check_quota(&c, "VE").allowed);
    }

    #[test]
    fn overlapping_buckets_rejected() {
        let mut c = skewed_counts();
        c.buckets[1].members.insert("VE".into());
        assert!(!c.validate(&[]).is_empty());
        let mut c = skewed_counts();
        c.buckets[0].head_country = "XX".into();
        assert!(!c.validate(&[]).is_empty());
    }

    fn soft(buckets: &[&str]) -> QuotaConfig {
        let mut c = QuotaConfig::hard(buckets.iter().map(|b| CountryBucket::single(b)).collect(), 0.5);
        c.enforcement = Enforcement::SoftRotate;
        c
    }

    fn pair_counts(c: &QuotaConfig, groups: &[String], steps: u64) -> BTreeMap<(String, String), u32> {
        let mut seen = BTreeMap::new();
        for t in 0..steps {
            for (head, gs) in rotation_mapping(c, groups, t) {
                *seen.entry((head, gs.join("+"))).or_default() += 1;
            }
        }
        seen
    }

    #[test]
    fn latin_square_three_by_three() {
        let c = soft(&["VE", "EG", "UA"]);
        let groups: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let seen = pair_counts(&c, &groups, 3);
        assert_eq!(seen.len(), 9);
        assert!(seen.values().all(|&n| n == 1));
    }

    #[test]
    fn three_buckets_two_sets_six_steps() {
        let mut c = soft(&["VE", "EG", "UA"]);
        c.group_sets = vec![vec!["a".into()], vec!["b".into()]];
        let groups: Vec<String> = vec!["a".into(), "b".into()];
        let seen = pair_counts(&c, &groups, 6);
        for head in ["VE", "EG", "UA"] {
            for set in ["a", "b"] {
                assert_eq!(seen.get(&(head.to_string(), set.to_string())), Some(&2), "{head}/{set}");
            }
        }
    }

    #[test]
    fn single_bucket_is_identity() {
        let c = soft(&["VE"]);
        let groups: Vec<String> = vec!["a".into(), "b".into()];
        for t in 0..4 {
            assert_eq!(rotation_mapping(&c, &groups, t)["VE"], groups);
        }
    }

    #[test]
    fn admit_counts_and_blocks() {
        let mut s = QuotaState::new(QuotaConfig::hard(vec![CountryBucket::single("VE")], 0.5), &[]);
        assert!(s.admit("VE", true));
        assert!(!s.admit("VE", true));
        assert!(s.admit("BR", true));
        assert!(!s.admit("VE", true));
        assert!(s.admit("BR", true));
        assert!(s.admit("VE", true));
        assert_eq!(s.config.total(), 4);
    }

    #[test]
    fn edits_wait_for_checkpoint() {
        let mut s = QuotaState::new(QuotaConfig::hard(vec![CountryBucket::single("VE")], 0.25), &[]);
        s.pending_max_share = Some(0.15);
        assert_eq!(s.config.max_share_per_bucket, 0.25);
        let (applied, rotated) = s.on_checkpoint(&[]);
        assert_eq!(applied, Some(0.15));
        assert!(rotated.is_none());
        assert_eq!(s.config.max_share_per_bucket, 0.15);
    }
}
