//! Random case generators shared by the oracle tests.

use rand::seq::SliceRandom;
use rand::Rng;

/// Entropy sequences with frequent ties and K = 1..=8.
pub fn entropy_seq<R: Rng>(rng: &mut R) -> Vec<f64> {
    let k = rng.gen_range(1..=8);
    if rng.gen_bool(0.3) {
        (0..k).map(|_| rng.gen_range(0..4) as f64 * 0.5).collect()
    } else {
        (0..k).map(|_| rng.gen_range(0.0..3.0)).collect()
    }
}

/// Normalized distributions, some with exact zeros.
pub fn distributions<R: Rng>(rng: &mut R) -> Vec<Vec<f64>> {
    let n = rng.gen_range(1..=6);
    let v = rng.gen_range(2..=22);
    (0..n)
        .map(|_| {
            let mut d: Vec<f64> = (0..v)
                .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0f64).powi(3) })
                .collect();
            if d.iter().all(|&p| p == 0.0) {
                d[0] = 1.0;
            }
            let s: f64 = d.iter().sum();
            d.iter_mut().for_each(|p| *p /= s);
            d
        })
        .collect()
}

/// Rendered model outputs around a three-number instance: exact solutions,
/// wrong values, wrong operands, malformed text and extraction variants.
pub fn countdown_output<R: Rng>(rng: &mut R) -> (String, Vec<i64>, i64) {
    let mut numbers: Vec<i64> = Vec::new();
    while numbers.len() < 3 {
        let n = rng.gen_range(1..100);
        if !numbers.contains(&n) {
            numbers.push(n);
        }
    }
    let mut order = numbers.clone();
    order.shuffle(rng);
    let signs: Vec<bool> = (0..2).map(|_| rng.gen_bool(0.5)).collect();
    let value = order[0] + (1..3).map(|j| if signs[j - 1] { -order[j] } else { order[j] }).sum::<i64>();
    let target = if rng.gen_bool(0.6) { value } else { value + rng.gen_range(1..5) };
    let mut operands = order.clone();
    match rng.gen_range(0..10) {
        0 => operands[rng.gen_range(0..3)] = rng.gen_range(1..100),
        1 => operands.push(rng.gen_range(1..10)),
        2 => {
            operands.pop();
        }
        _ => {}
    }
    let mut expr = operands[0].to_string();
    for (j, op) in operands.iter().enumerate().skip(1) {
        let minus = signs.get(j - 1).copied().unwrap_or(false);
        expr.push_str(if rng.gen_bool(0.2) { " " } else { "" });
        expr.push(if minus { '-' } else { '+' });
        expr.push_str(&op.to_string());
    }
    match rng.gen_range(0..12) {
        0 => expr = expr.replacen('+', "++", 1),
        1 => expr.insert(0, '-'),
        2 => expr = expr.replace('-', "\u{2212}"),
        _ => {}
    }
    match rng.gen_range(0..6) {
        0 => {}
        1 => expr.push_str("=x"),
        2 => expr.push_str(&format!("=-{}", rng.gen_range(0..50))),
        _ => expr.push_str(&format!("={}", if rng.gen_bool(0.8) { value } else { value + 1 })),
    }
    let out = match rng.gen_range(0..6) {
        0 => expr,
        1 => format!("1+2=3\\block{expr}<eos><pad><pad>"),
        2 => format!("{}+{}=9\\blockAnswer:{expr}<eos>Answer:1+1", order[0], order[1]),
        3 => format!("Answer:9\\blockAnswer:{expr}\\block<pad>"),
        4 => format!("{expr}\\block  \\block<eos>"),
        _ => format!("Answer:{expr}"),
    };
    (out, numbers, target)
}
