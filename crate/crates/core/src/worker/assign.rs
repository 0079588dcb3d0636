use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::mix_seed;

/// Balanced block randomization: groups are handed out in shuffled
/// permutations, a fresh one drawn each time the previous is used up. Over
/// any prefix the per-group counts differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BalancedAssigner {
    groups: Vec<String>,
    seed: u64,
    /// Index of the current permutation.
    round: u64,
    perm: Vec<usize>,
    pos: usize,
    counts: Vec<u64>,
}

impl BalancedAssigner {
    pub fn new(mut groups: Vec<String>, seed: u64) -> Self {
        groups.sort();
        groups.dedup();
        let n = groups.len();
        Self {
            groups,
            seed,
            round: 0,
            perm: Vec::new(),
            pos: 0,
            counts: vec![0; n],
        }
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn counts(&self) -> impl Iterator<Item = (&str, u64)> {
        self.groups.iter().map(String::as_str).zip(self.counts.iter().copied())
    }

    pub fn next_group(&mut self) -> Option<String> {
        if self.groups.is_empty() {
            return None;
        }
        if self.pos >= self.perm.len() {
            let mut perm: Vec<usize> = (0..self.groups.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.round));
            perm.shuffle(&mut rng);
            self.perm = perm;
            self.pos = 0;
            self.round += 1;
        }
        let g = self.perm[self.pos];
        self.pos += 1;
        self.counts[g] += 1;
        Some(self.groups[g].clone())
    }
}
