//! Brute-force reference implementations of the rewards, written without
//! reusing any library code path.

use itertools::Itertools;

/// Spearman rho between block index and entropy, negated, from the Pearson
/// correlation of rank vectors. Ranks are found by counting smaller values.
pub fn r_scc(h: &[f64]) -> f64 {
    let k = h.len();
    let ranks: Vec<f64> = (0..k)
        .map(|i| (0..k).filter(|&j| h[j] < h[i] || (h[j] == h[i] && j < i)).count() as f64 + 1.0)
        .collect();
    let idx: Vec<f64> = (1..=k).map(|i| i as f64).collect();
    let mean = (k as f64 + 1.0) / 2.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..k {
        sxy += (idx[i] - mean) * (ranks[i] - mean);
        sxx += (idx[i] - mean).powi(2);
        syy += (ranks[i] - mean).powi(2);
    }
    -sxy / (sxx * syy).sqrt()
}

pub fn entropy_descent(h: &[f64]) -> f64 {
    if h.len() < 2 {
        return 0.0;
    }
    let mut hits = 0usize;
    for i in 1..h.len() {
        if h[i] < h[i - 1] {
            hits += 1;
        }
    }
    hits as f64 / (h.len() - 1) as f64
}

pub fn indicator(k: usize, k_target: usize) -> f64 {
    let kt = k_target.max(1);
    if k >= kt {
        1.0
    } else {
        ((k + 1) as f64).log2() / ((kt + 1) as f64).log2()
    }
}

/// Mean entropy in nats, via log-sum over explicit loops.
pub fn block_entropy(dists: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for d in dists {
        let mut h = 0.0;
        for &p in d {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / dists.len() as f64
}

fn canonical(n: i64) -> String {
    n.to_string()
}

/// Text between the last `Answer:` (or the last non-empty segment) and the
/// end of the first `<eos>`-terminated region, found by character scanning.
fn extract(output: &str) -> String {
    let body = match output.find("<eos>") {
        Some(i) => &output[..i],
        None => output,
    };
    let mut body = body.to_string();
    while body.ends_with("<pad>") {
        body.truncate(body.len() - 5);
    }
    let marker = "Answer:";
    let mut last = None;
    let mut from = 0;
    while let Some(i) = body[from..].find(marker) {
        last = Some(from + i);
        from += i + 1;
    }
    if let Some(i) = last {
        let tail = &body[i + marker.len()..];
        return tail.split("\\block").next().unwrap_or("").to_string();
    }
    let segs: Vec<String> = body.split("\\block").map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    segs.last().cloned().unwrap_or_default()
}

/// Enumerates every ordering and sign pattern of the given numbers and
/// compares the canonical expression text.
pub fn countdown_reward(output: &str, numbers: &[i64], target: i64) -> f64 {
    let text: String = extract(output).replace('\u{2212}', "-").chars().filter(|c| !c.is_whitespace()).collect();
    let (lhs, rhs) = match text.find('=') {
        Some(i) => (text[..i].to_string(), Some(text[i + 1..].to_string())),
        None => (text.clone(), None),
    };
    if let Some(r) = rhs {
        let digits = r.strip_prefix('-').unwrap_or(&r);
        if digits.is_empty() || digits.len() > 12 || !digits.chars().all(|c| c.is_ascii_digit()) {
            return 0.0;
        }
    }
    let n = numbers.len();
    for perm in numbers.iter().permutations(n) {
        for signs in 0..(1u32 << (n - 1)) {
            let mut s = canonical(*perm[0]);
            let mut v = *perm[0];
            for (j, &x) in perm.iter().enumerate().skip(1) {
                let minus = signs >> (j - 1) & 1 == 1;
                s.push(if minus { '-' } else { '+' });
                s.push_str(&canonical(*x));
                v += if minus { -x } else { *x };
            }
            if s == lhs {
                return if v == target { 1.0 } else { 0.1 };
            }
        }
    }
    0.0
}
