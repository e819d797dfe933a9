//! Exhaustive check that the pairwise descent reward and the negative Spearman
//! statistic share their maximisers: strictly decreasing entropy sequences.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::rewards::{entropy_descent_reward, r_scc, EntropySequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerK {
    pub k: usize,
    pub permutations: usize,
    pub r_ent_maximisers: usize,
    pub r_scc_maximisers: usize,
    pub strictly_decreasing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub values: Vec<f64>,
    pub r_ent: f64,
    pub r_scc: f64,
    pub strictly_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub k_max: usize,
    pub total_permutations: usize,
    pub per_k: Vec<PerK>,
    pub counterexamples: Vec<Counterexample>,
    pub passed: bool,
}

impl Theorem1Report {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "argmax equivalence of R_ent and r_SCC, K = 2..{}\n{:>3} {:>8} {:>8} {:>8} {:>8}\n",
            self.k_max, "K", "perms", "R_ent=1", "r_SCC=1", "desc"
        );
        for p in &self.per_k {
            out += &format!(
                "{:>3} {:>8} {:>8} {:>8} {:>8}\n",
                p.k, p.permutations, p.r_ent_maximisers, p.r_scc_maximisers, p.strictly_decreasing
            );
        }
        out += &format!(
            "total permutations: {}\ncounterexamples: {}\nresult: {}\n",
            self.total_permutations,
            self.counterexamples.len(),
            if self.passed { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Enumerates every permutation of `K` distinct values for `K = 2..=k_max`.
pub fn theorem1_check(k_max: usize) -> Theorem1Report {
    let mut per_k = Vec::new();
    let mut counterexamples = Vec::new();
    let mut total = 0;
    for k in 2..=k_max {
        let base: Vec<f64> = (1..=k).map(|v| v as f64 * 0.37 + 0.1).collect();
        let mut row = PerK { k, permutations: 0, r_ent_maximisers: 0, r_scc_maximisers: 0, strictly_decreasing: 0 };
        for perm in base.iter().copied().permutations(k) {
            let h = EntropySequence::new(perm.clone()).expect("positive entropies");
            let r_ent = entropy_descent_reward(&h);
            let rep = r_scc(&h).expect("k >= 2");
            // integer form of r_scc = 1: 6 Σδ² = 2 K (K² − 1)
            let sum_sq: u64 = rep.delta_squares.iter().sum();
            let scc_max = 6 * sum_sq == 2 * (k * (k * k - 1)) as u64;
            let desc = perm.windows(2).all(|w| w[0] > w[1]);
            let ent_max = r_ent == 1.0;
            row.permutations += 1;
            row.r_ent_maximisers += ent_max as usize;
            row.r_scc_maximisers += scc_max as usize;
            row.strictly_decreasing += desc as usize;
            if ent_max != desc || scc_max != desc || (rep.r_scc == 1.0) != scc_max {
                counterexamples.push(Counterexample { values: perm, r_ent, r_scc: rep.r_scc, strictly_decreasing: desc });
            }
        }
        total += row.permutations;
        per_k.push(row);
    }
    let passed = counterexamples.is_empty() && k_max >= 2;
    Theorem1Report { k_max, total_permutations: total, per_k, counterexamples, passed }
}
