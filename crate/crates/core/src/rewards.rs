//! Block-entropy rewards, the negative Spearman statistic, indicator and task
//! rewards, and their weighted aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-6;

/// Mean natural-log Shannon entropy over the per-position distributions of one block.
pub fn block_entropy<V: AsRef<[f64]>>(distributions: &[V]) -> Result<f64> {
    if distributions.is_empty() {
        return Err(Error::Domain("block entropy of an empty block".into()));
    }
    let mut total = 0.0;
    for (j, dist) in distributions.iter().enumerate() {
        let dist = dist.as_ref();
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL || dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain(format!("distribution {j} is not normalized (sum {sum})")));
        }
        total += shannon_entropy(dist);
    }
    Ok(total / distributions.len() as f64)
}

pub fn shannon_entropy(dist: &[f64]) -> f64 {
    dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>().max(0.0)
}

/// Per-block entropies in block order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySequence {
    pub values: Vec<f64>,
}

impl EntropySequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("entropy sequence needs at least one block".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!("invalid block entropy {v}")));
        }
        Ok(Self { values })
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsccReport {
    pub r_scc: f64,
    /// Ascending entropy rank of each block (1 = lowest entropy).
    pub rank_vector: Vec<usize>,
    pub delta_squares: Vec<u64>,
    pub k: usize,
}

/// Ascending ranks with ties broken by block index.
pub fn entropy_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Negative Spearman rank correlation between block index and block entropy.
/// `+1` means strictly descending entropy.
pub fn r_scc(h: &EntropySequence) -> Result<RsccReport> {
    let k = h.k();
    if k < 2 {
        return Err(Error::Domain("r_scc needs at least two blocks".into()));
    }
    let rank_vector = entropy_ranks(&h.values);
    let delta_squares: Vec<u64> = rank_vector
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let d = (i + 1) as i64 - r as i64;
            (d * d) as u64
        })
        .collect();
    let sum: u64 = delta_squares.iter().sum();
    let kf = k as f64;
    let r = -(1.0 - 6.0 * sum as f64 / (kf * (kf * kf - 1.0)));
    Ok(RsccReport { r_scc: r, rank_vector, delta_squares, k })
}

/// Fraction of adjacent block pairs whose entropy strictly drops; 0 for a single block.
pub fn entropy_descent_reward(h: &EntropySequence) -> f64 {
    let k = h.k();
    if k < 2 {
        return 0.0;
    }
    let drops = h.values.windows(2).filter(|w| w[0] > w[1]).count();
    drops as f64 / (k - 1) as f64
}

/// Logarithmic reward for reaching `k_target` blocks.
pub fn indicator_reward(k: usize, k_target: usize) -> f64 {
    let k_target = k_target.max(1);
    if k >= k_target {
        1.0
    } else {
        ((k + 1) as f64).ln() / ((k_target + 1) as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta_ind: f64,
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta_ind: 1.0, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ent: f64,
    pub r_ind: f64,
    pub r_task: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

pub fn total_reward(r_ent: f64, r_ind: f64, r_task: f64, w: RewardWeights) -> Result<RewardBreakdown> {
    if w.alpha < 0.0 || w.beta_ind < 0.0 || w.gamma < 0.0 {
        return Err(Error::Domain(format!("reward weights must be non-negative: {w:?}")));
    }
    Ok(RewardBreakdown {
        r_ent,
        r_ind,
        r_task,
        alpha: w.alpha,
        beta: w.beta_ind,
        gamma: w.gamma,
        total: w.alpha * r_ent + w.beta_ind * r_ind + w.gamma * r_task,
    })
}

/// Parsed `a ± b ± c [= v]` expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expression {
    pub operands: Vec<i64>,
    pub value: i64,
    pub stated: Option<i64>,
}

/// Parses integers joined by binary `+`/`-`, evaluated left to right, with an
/// optional `= value` suffix. Whitespace is ignored.
pub fn parse_expression(text: &str) -> Option<Expression> {
    let cleaned: String = text.replace('\u{2212}', "-").chars().filter(|c| !c.is_whitespace()).collect();
    let (lhs, rhs) = match cleaned.split_once('=') {
        Some((l, r)) => (l, Some(r)),
        None => (cleaned.as_str(), None),
    };
    let stated = match rhs {
        Some(r) => Some(parse_signed(r)?),
        None => None,
    };
    let mut operands = Vec::new();
    let mut value: i64 = 0;
    let mut sign = 1i64;
    let mut rest = lhs;
    loop {
        let end = rest.find(['+', '-']).unwrap_or(rest.len());
        let n = parse_int(&rest[..end])?;
        operands.push(n);
        value = value.checked_add(sign.checked_mul(n)?)?;
        if end == rest.len() {
            break;
        }
        sign = if rest.as_bytes()[end] == b'+' { 1 } else { -1 };
        rest = &rest[end + 1..];
    }
    Some(Expression { operands, value, stated })
}

fn parse_signed(s: &str) -> Option<i64> {
    match s.strip_prefix('-') {
        Some(digits) => parse_int(digits).map(|v| -v),
        None => parse_int(s),
    }
}

fn parse_int(s: &str) -> Option<i64> {
    if s.is_empty() || s.len() > 12 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// Extracts the final expression from rendered model output: text before the
/// first `<eos>`, then whatever follows the last `Answer:`, or the last
/// non-empty `\block` segment when no answer marker is present.
pub fn final_expression_text(output: &str) -> &str {
    let body = output.split("<eos>").next().unwrap_or("");
    let body = body.trim_end_matches("<pad>");
    if let Some(idx) = body.rfind("Answer:") {
        let tail = &body[idx + "Answer:".len()..];
        return tail.split("\\block").next().unwrap_or("");
    }
    body.split("\\block").map(str::trim).filter(|s| !s.is_empty()).last().unwrap_or("")
}

/// 1.0 for an expression using exactly the given numbers that reaches the
/// target, 0.1 when the numbers are right but the value is not, 0 otherwise.
pub fn countdown_task_reward(output_text: &str, numbers: &[i64], target: i64) -> f64 {
    let Some(expr) = parse_expression(final_expression_text(output_text)) else {
        return 0.0;
    };
    let mut used = expr.operands.clone();
    let mut given = numbers.to_vec();
    used.sort_unstable();
    given.sort_unstable();
    if used != given {
        0.0
    } else if expr.value == target {
        1.0
    } else {
        0.1
    }
}

/// Alternative intrinsic rewards, each rescaled into [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub enum AltReward<'a> {
    /// `1 - mean(H_k) / ln V`.
    AvgEntropy { entropies: &'a [f64], vocab_size: usize },
    /// `min(K, K_target) / K_target`.
    FormatCount { k: usize, k_target: usize },
    /// `1 - mean(size) / cap`.
    BlockSize { sizes: &'a [usize], max_block_cap: usize },
}

pub fn alt_reward(kind: &AltReward<'_>) -> f64 {
    match *kind {
        AltReward::AvgEntropy { entropies, vocab_size } => {
            if entropies.is_empty() {
                return 0.0;
            }
            let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
            (1.0 - mean / (vocab_size as f64).ln()).clamp(0.0, 1.0)
        }
        AltReward::FormatCount { k, k_target } => {
            let t = k_target.max(1);
            k.min(t) as f64 / t as f64
        }
        AltReward::BlockSize { sizes, max_block_cap } => {
            if sizes.is_empty() {
                return 0.0;
            }
            let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
            (1.0 - mean / max_block_cap.max(1) as f64).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmedStats {
    pub mean_r_scc: f64,
    pub proportion_positive: f64,
}

/// Mean r_scc and the fraction of samples with strictly positive r_scc.
pub fn r_med_stats(scores: &[f64]) -> Result<RmedStats> {
    if scores.is_empty() {
        return Err(Error::Domain("r_med statistics of an empty list".into()));
    }
    let n = scores.len() as f64;
    Ok(RmedStats {
        mean_r_scc: scores.iter().sum::<f64>() / n,
        proportion_positive: scores.iter().filter(|&&s| s > 0.0).count() as f64 / n,
    })
}
