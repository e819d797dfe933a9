//! Diagnostics over evaluation traces: r_SCC binning, hard-sample comparison
//! and decoding overhead.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{generate, DecodeConfig};
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::rewards::{r_med_stats, RmedStats};
use crate::seq::{find_boundary, TokenId, Vocabulary};
use crate::trace::SampleRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: Vec<Bin>,
    /// Spearman correlation between bin midpoints and accuracies of non-empty bins.
    pub rank_correlation: Option<f64>,
}

/// Ranks starting at 1, tied values sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Spearman correlation with average ranks; `None` if either side is constant
/// or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Equal-width bins over [-1, 1]; the last bin is closed on the right.
pub fn bin_by_rscc(records: &[SampleRecord], bins: usize) -> Result<BinReport> {
    if bins == 0 {
        return Err(Error::Domain("need at least one bin".into()));
    }
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    for r in records {
        if !(-1.0..=1.0).contains(&r.r_scc) {
            return Err(Error::Domain(format!("r_scc {} outside [-1, 1]", r.r_scc)));
        }
        let b = (((r.r_scc + 1.0) / width) as usize).min(bins - 1);
        counts[b] += 1;
        hits[b] += r.correct as usize;
    }
    let bins: Vec<Bin> = (0..bins)
        .map(|b| Bin {
            lo: -1.0 + b as f64 * width,
            hi: -1.0 + (b + 1) as f64 * width,
            count: counts[b],
            accuracy: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
        })
        .collect();
    let (mids, accs): (Vec<f64>, Vec<f64>) =
        bins.iter().filter_map(|b| b.accuracy.map(|a| ((b.lo + b.hi) / 2.0, a))).unzip();
    Ok(BinReport { rank_correlation: spearman(&mids, &accs), bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardSampleReport {
    /// Instances the baseline got wrong.
    pub hard_count: usize,
    /// Of those, how many the method gets right.
    pub fixed_count: usize,
    /// Mean of method minus baseline r_SCC over the hard set; 0 when it is empty.
    pub mean_rscc_delta: f64,
}

pub fn hard_sample_compare(baseline: &[SampleRecord], method: &[SampleRecord]) -> Result<HardSampleReport> {
    let by_key: HashMap<&str, &SampleRecord> =
        method.iter().map(|r| (r.instance_fingerprint.as_str(), r)).collect();
    if by_key.len() != method.len() || baseline.len() != method.len() {
        return Err(Error::Domain("record sets differ in size or repeat fingerprints".into()));
    }
    let mut hard = 0;
    let mut fixed = 0;
    let mut delta = 0.0;
    for b in baseline {
        let m = by_key
            .get(b.instance_fingerprint.as_str())
            .ok_or_else(|| Error::Domain(format!("fingerprint {} missing from method records", b.instance_fingerprint)))?;
        if !b.correct {
            hard += 1;
            fixed += m.correct as usize;
            delta += m.r_scc - b.r_scc;
        }
    }
    Ok(HardSampleReport {
        hard_count: hard,
        fixed_count: fixed,
        mean_rscc_delta: if hard > 0 { delta / hard as f64 } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub fixed_ns_per_token: Vec<f64>,
    pub dynamic_ns_per_token: Vec<f64>,
    /// dynamic / fixed, per run.
    pub ratios: Vec<f64>,
    /// Ratio of summed dynamic time per token to summed fixed time per token.
    pub ratio: f64,
}

/// Wall-clock per committed token of one pass over `prompts`.
pub fn time_per_token(params: &ModelParams, vocab: &Vocabulary, prompts: &[Vec<TokenId>], cfg: &DecodeConfig) -> Result<f64> {
    let mut tokens = 0usize;
    let clock = Instant::now();
    for (i, p) in prompts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let (_, trace) = generate(params, vocab, p, cfg, &mut rng)?;
        tokens += trace.generated_len();
    }
    Ok(clock.elapsed().as_nanos() as f64 / tokens.max(1) as f64)
}

/// Alternates fixed and dynamic passes `runs` times.
pub fn bench_overhead(
    params: &ModelParams,
    vocab: &Vocabulary,
    prompts: &[Vec<TokenId>],
    fixed: &DecodeConfig,
    dynamic: &DecodeConfig,
    runs: usize,
) -> Result<OverheadReport> {
    if fixed.max_window != dynamic.max_window {
        return Err(Error::Config("overhead comparison needs equal windows".into()));
    }
    if runs == 0 || prompts.is_empty() {
        return Err(Error::Domain("need at least one run and one prompt".into()));
    }
    let mut f = Vec::with_capacity(runs);
    let mut d = Vec::with_capacity(runs);
    for _ in 0..runs {
        f.push(time_per_token(params, vocab, prompts, fixed)?);
        d.push(time_per_token(params, vocab, prompts, dynamic)?);
    }
    let ratios = f.iter().zip(&d).map(|(a, b)| b / a).collect();
    let ratio = d.iter().sum::<f64>() / f.iter().sum::<f64>();
    Ok(OverheadReport { fixed_ns_per_token: f, dynamic_ns_per_token: d, ratios, ratio })
}

/// Nanoseconds per boundary scan over an indicator-free window, best of `rounds`.
pub fn scan_cost(window_len: usize, reps: usize, rounds: usize) -> f64 {
    let window = vec![5 as TokenId; window_len];
    let mut best = f64::INFINITY;
    for _ in 0..rounds {
        let clock = Instant::now();
        let mut found = 0usize;
        for _ in 0..reps {
            found += find_boundary(std::hint::black_box(&window), 1, window_len, 3).unwrap_or(0);
        }
        std::hint::black_box(found);
        best = best.min(clock.elapsed().as_nanos() as f64 / reps as f64);
    }
    best
}

/// Least-squares line through the points: (slope, intercept, r²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let r = pearson(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx, r * r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_rscc: f64,
    pub r_med: RmedStats,
    pub bins: BinReport,
    pub hard: Option<HardSampleReport>,
}

pub fn analyze(records: &[SampleRecord], baseline: Option<&[SampleRecord]>, bins: usize) -> Result<AnalysisReport> {
    if records.is_empty() {
        return Err(Error::Domain("no sample records to analyse".into()));
    }
    let scores: Vec<f64> = records.iter().map(|r| r.r_scc).collect();
    let r_med = r_med_stats(&scores)?;
    Ok(AnalysisReport {
        samples: records.len(),
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64,
        mean_rscc: r_med.mean_r_scc,
        r_med,
        bins: bin_by_rscc(records, bins)?,
        hard: baseline.map(|b| hard_sample_compare(b, records)).transpose()?,
    })
}

impl AnalysisReport {
    /// Plot-ready bin table followed by summary rows.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("bin,lo,hi,count,accuracy\n");
        for (i, b) in self.bins.bins.iter().enumerate() {
            s.push_str(&format!("{},{},{},{},{}\n", i, b.lo, b.hi, b.count, opt(b.accuracy)));
        }
        s.push_str("\nmetric,value\n");
        s.push_str(&format!("samples,{}\n", self.samples));
        s.push_str(&format!("accuracy,{}\n", self.accuracy));
        s.push_str(&format!("mean_r_scc,{}\n", self.mean_rscc));
        s.push_str(&format!("r_med,{}\n", self.r_med.proportion_positive));
        s.push_str(&format!("bin_rank_correlation,{}\n", opt(self.bins.rank_correlation)));
        if let Some(h) = self.hard {
            s.push_str(&format!("hard_count,{}\n", h.hard_count));
            s.push_str(&format!("hard_fixed,{}\n", h.fixed_count));
            s.push_str(&format!("hard_mean_r_scc_delta,{}\n", h.mean_rscc_delta));
        }
        s
    }
}
