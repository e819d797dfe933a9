//! Synthetic reasoning tasks: three-number Countdown and arithmetic chains.
//!
//! Both render as fixed ASCII templates over [`Vocabulary::standard`]. Reference
//! solutions put an indicator after every arithmetic step and finish with an
//! `Answer:` segment, so a solution with `s` steps spans `s + 1` blocks.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rewards::{countdown_task_reward, final_expression_text, parse_expression};
use crate::seq::{Sequence, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Countdown3,
    ArithChain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub prompt: Vec<TokenId>,
    /// Countdown target, or the final value of a chain.
    pub answer: i64,
    /// Numbers as listed in the prompt.
    pub numbers: Vec<i64>,
    /// Signed terms of the reference solution, first term positive.
    pub solution: Vec<i64>,
    pub steps: usize,
    pub fingerprint: String,
}

fn fingerprint(kind: TaskKind, prompt_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind:?}\n{prompt_text}"));
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders `a ± b ± …` from signed terms.
fn render_terms(terms: &[i64]) -> String {
    let mut s = terms[0].to_string();
    for &t in &terms[1..] {
        s.push(if t < 0 { '-' } else { '+' });
        s.push_str(&t.abs().to_string());
    }
    s
}

/// Step-by-step text: one `x±y=z\block` per step, then `Answer:`.
fn solution_text(terms: &[i64], answer_expr: &str) -> String {
    let mut out = String::new();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        let next = acc + t;
        out.push_str(&format!("{}={next}\\block", render_terms(&[acc, t])));
        acc = next;
    }
    out.push_str("Answer:");
    out.push_str(answer_expr);
    out
}

fn partials_non_negative(terms: &[i64]) -> bool {
    let mut acc = 0;
    terms.iter().all(|t| {
        acc += t;
        acc >= 0
    })
}

impl TaskInstance {
    /// A Countdown instance whose reference solution uses `solution` (signed
    /// terms over a permutation of `numbers`).
    pub fn countdown(vocab: &Vocabulary, numbers: [i64; 3], solution: [i64; 3]) -> Result<Self> {
        let mut used: Vec<i64> = solution.iter().map(|t| t.abs()).collect();
        let mut given = numbers.to_vec();
        used.sort_unstable();
        given.sort_unstable();
        if used != given || solution[0] <= 0 {
            return Err(Error::Domain(format!("solution {solution:?} does not use numbers {numbers:?}")));
        }
        if numbers.iter().any(|n| !(1..=99).contains(n)) {
            return Err(Error::Domain(format!("numbers {numbers:?} outside 1..99")));
        }
        let target: i64 = solution.iter().sum();
        let text = format!("Numbers: {} {} {} Target: {target}", numbers[0], numbers[1], numbers[2]);
        Ok(Self {
            kind: TaskKind::Countdown3,
            prompt: vocab.tokenize(&text)?,
            answer: target,
            numbers: numbers.to_vec(),
            solution: solution.to_vec(),
            steps: 2,
            fingerprint: fingerprint(TaskKind::Countdown3, &text),
        })
    }

    pub fn arith_chain(vocab: &Vocabulary, terms: &[i64]) -> Result<Self> {
        if terms.len() < 3 || terms[0] <= 0 {
            return Err(Error::Domain(format!("chain needs >= 2 steps and a positive start, got {terms:?}")));
        }
        let text = format!("Compute: {}", render_terms(terms));
        Ok(Self {
            kind: TaskKind::ArithChain,
            prompt: vocab.tokenize(&text)?,
            answer: terms.iter().sum(),
            numbers: terms.iter().map(|t| t.abs()).collect(),
            solution: terms.to_vec(),
            steps: terms.len() - 1,
            fingerprint: fingerprint(TaskKind::ArithChain, &text),
        })
    }

    pub fn reference_text(&self) -> String {
        let answer_expr = match self.kind {
            TaskKind::Countdown3 => format!("{}={}", render_terms(&self.solution), self.answer),
            TaskKind::ArithChain => self.answer.to_string(),
        };
        format!("{}<eos>", solution_text(&self.solution, &answer_expr))
    }

    /// Reference completion, terminated by EOS.
    pub fn reference_completion(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        vocab.tokenize(&self.reference_text()).expect("reference solutions use vocabulary glyphs")
    }

    /// Reference completion for arbitrary signed terms over this prompt.
    fn completion_for(&self, vocab: &Vocabulary, terms: &[i64]) -> Vec<TokenId> {
        let value: i64 = terms.iter().sum();
        let text = format!("{}<eos>", solution_text(terms, &format!("{}={value}", render_terms(terms))));
        vocab.tokenize(&text).expect("solution glyphs")
    }
}

/// Task reward and correctness of a generated window.
pub fn verify(instance: &TaskInstance, vocab: &Vocabulary, generated: &[TokenId]) -> (bool, f64) {
    let text = vocab.render(generated);
    match instance.kind {
        TaskKind::Countdown3 => {
            let r = countdown_task_reward(&text, &instance.numbers, instance.answer);
            (r == 1.0, r)
        }
        TaskKind::ArithChain => match parse_expression(final_expression_text(&text)) {
            Some(e) if e.operands.len() == 1 && e.value == instance.answer => (true, 1.0),
            _ => (false, 0.0),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub min_number: i64,
    pub max_number: i64,
    pub chain_steps: usize,
    /// Largest chain operand.
    pub chain_max_operand: i64,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the train/test split generator.
    pub data_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { min_number: 1, max_number: 9, chain_steps: 3, chain_max_operand: 9, n_train: 1200, n_test: 256, data_seed: 1 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.min_number && self.min_number + 2 <= self.max_number && self.max_number <= 99) {
            return Err(Error::Config(format!(
                "countdown numbers must span at least 3 values inside 1..99, got {}..{}",
                self.min_number, self.max_number
            )));
        }
        if self.chain_steps < 2 || self.chain_max_operand < 1 {
            return Err(Error::Config("chains need >= 2 steps and positive operands".into()));
        }
        Ok(())
    }
}

/// Draws 3 distinct numbers and a sign pattern with non-negative running
/// totals and a positive target.
fn draw_countdown<R: Rng + ?Sized>(rng: &mut R, cfg: &TaskConfig) -> ([i64; 3], [i64; 3]) {
    loop {
        let pool: Vec<i64> = (cfg.min_number..=cfg.max_number).collect();
        let picked: Vec<i64> = pool.choose_multiple(rng, 3).copied().collect();
        let numbers = [picked[0], picked[1], picked[2]];
        let mut order = numbers;
        order.shuffle(rng);
        let s1 = if rng.gen_bool(0.5) { 1 } else { -1 };
        let s2 = if rng.gen_bool(0.5) { 1 } else { -1 };
        let solution = [order[0], s1 * order[1], s2 * order[2]];
        if partials_non_negative(&solution) && solution.iter().sum::<i64>() >= 1 {
            return (numbers, solution);
        }
    }
}

pub fn gen_countdown<R: Rng + ?Sized>(rng: &mut R, n: usize, cfg: &TaskConfig) -> Result<Vec<TaskInstance>> {
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    (0..n)
        .map(|_| {
            let (numbers, solution) = draw_countdown(rng, cfg);
            TaskInstance::countdown(&vocab, numbers, solution)
        })
        .collect()
}

pub fn gen_arith_chain<R: Rng + ?Sized>(rng: &mut R, n: usize, steps: usize, max_operand: i64) -> Result<Vec<TaskInstance>> {
    if steps < 2 {
        return Err(Error::Domain("chains need at least 2 steps".into()));
    }
    let vocab = Vocabulary::standard();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut terms = vec![rng.gen_range(1..=max_operand)];
        for _ in 0..steps {
            let x = rng.gen_range(1..=max_operand);
            terms.push(if rng.gen_bool(0.5) { x } else { -x });
        }
        if partials_non_negative(&terms) {
            out.push(TaskInstance::arith_chain(&vocab, &terms)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: String,
    pub seed: u64,
    pub instances: Vec<TaskInstance>,
}

impl Dataset {
    pub fn fingerprints(&self) -> HashSet<&str> {
        self.instances.iter().map(|i| i.fingerprint.as_str()).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Generates disjoint train and test Countdown splits. Duplicates within a
/// split are dropped too, so every fingerprint is unique.
pub fn countdown_splits(seed: u64, cfg: &TaskConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut fill = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<TaskInstance>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::Config(format!("number range too small for {n} distinct instances")));
            }
            let inst = gen_countdown(rng, 1, cfg)?.pop().expect("one instance");
            if seen.insert(inst.fingerprint.clone()) {
                out.push(inst);
            }
        }
        Ok(out)
    };
    let test = fill(cfg.n_test, &mut rng)?;
    let train = fill(cfg.n_train, &mut rng)?;
    Ok((
        Dataset { split: "train".into(), seed, instances: train },
        Dataset { split: "test".into(), seed, instances: test },
    ))
}

/// Per-instance rng stream derived from a run seed and an instance fingerprint.
pub fn instance_rng(seed: u64, fingerprint: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(fingerprint.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_countdown: usize,
    pub n_chain: usize,
    /// Share of Countdown completions that actually reach the target; the rest
    /// are arithmetically valid expressions over the same numbers.
    pub correct_fraction: f64,
    pub window: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_countdown: 8000, n_chain: 2000, correct_fraction: 0.3, window: 32 }
    }
}

/// Pretraining sequences: prompt plus a solution padded with EOS to `window`.
pub fn pretraining_corpus<R: Rng + ?Sized>(
    rng: &mut R,
    train: &[TaskInstance],
    task: &TaskConfig,
    cfg: &CorpusConfig,
) -> Result<Vec<Sequence>> {
    let vocab = Vocabulary::standard();
    let mut out = Vec::with_capacity(cfg.n_countdown + cfg.n_chain);
    let countdown: Vec<&TaskInstance> = train.iter().filter(|i| i.kind == TaskKind::Countdown3).collect();
    if cfg.n_countdown > 0 && countdown.is_empty() {
        return Err(Error::Domain("no countdown instances to build a corpus from".into()));
    }
    let mut push = |prompt: &[TokenId], mut completion: Vec<TokenId>| -> Result<()> {
        if completion.len() > cfg.window {
            return Err(Error::TooLong { len: completion.len(), max_len: cfg.window });
        }
        completion.resize(cfg.window, vocab.eos_id);
        let mut tokens = prompt.to_vec();
        tokens.extend(completion);
        out.push(Sequence::new(tokens, prompt.len())?);
        Ok(())
    };
    for _ in 0..cfg.n_countdown {
        let inst = countdown[rng.gen_range(0..countdown.len())];
        let completion = if rng.gen_bool(cfg.correct_fraction) {
            inst.reference_completion(&vocab)
        } else {
            let terms = loop {
                let mut order = inst.numbers.clone();
                order.shuffle(rng);
                let t = [order[0], order[1] * sign(rng), order[2] * sign(rng)];
                if partials_non_negative(&t) {
                    break t;
                }
            };
            inst.completion_for(&vocab, &terms)
        };
        push(&inst.prompt, completion)?;
    }
    for inst in gen_arith_chain(rng, cfg.n_chain, task.chain_steps, task.chain_max_operand)? {
        push(&inst.prompt, inst.reference_completion(&vocab))?;
    }
    out.shuffle(rng);
    Ok(out)
}

fn sign<R: Rng + ?Sized>(rng: &mut R) -> i64 {
    if rng.gen_bool(0.5) {
        1
    } else {
        -1
    }
}
