//! Semi-autoregressive block decoding.
//!
//! Fixed mode denoises constant-size blocks left to right. Dynamic mode opens a
//! provisional block of `min(remaining, max_block_cap)` positions and closes it
//! as soon as an indicator token is committed; anything committed past the
//! indicator is re-masked and regenerated by the next block.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{forward, ForwardOutput, ModelParams};
use crate::seq::{find_boundary, BlockPartition, BlockSpan, Sequence, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remasking {
    LowConfidence,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Block size in fixed mode.
    pub block_size: usize,
    /// Denoising steps per block.
    pub steps: usize,
    /// Generation window length (positions after the prompt).
    pub max_window: usize,
    /// 0 selects the argmax token.
    pub temperature: f64,
    pub remasking: Remasking,
    pub max_block_cap: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Dynamic,
            block_size: 16,
            steps: 16,
            max_window: 32,
            temperature: 0.0,
            remasking: Remasking::LowConfidence,
            max_block_cap: 16,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("decode steps must be >= 1".into()));
        }
        if self.mode == DecodeMode::Fixed && self.block_size == 0 {
            return Err(Error::Config("fixed block size must be >= 1".into()));
        }
        if self.mode == DecodeMode::Dynamic && self.max_block_cap == 0 {
            return Err(Error::Config("max_block_cap must be >= 1".into()));
        }
        if self.max_window == 0 {
            return Err(Error::Config("max_window must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub span: BlockSpan,
    pub tokens: Vec<TokenId>,
    /// Per-position entropies (nats) from the forward pass at `t_star`.
    pub entropies: Vec<f64>,
    /// 1-based step at which the block boundary was fixed.
    pub t_star: usize,
}

impl BlockResult {
    pub fn mean_entropy(&self) -> f64 {
        self.entropies.iter().sum::<f64>() / self.entropies.len() as f64
    }
}

/// Final commitments made during one denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub step: usize,
    /// 1-based local window positions.
    pub positions: Vec<usize>,
    pub confidences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub blocks: Vec<BlockResult>,
    pub steps: Vec<StepLog>,
    pub sequence: Sequence,
    pub block_wall_ns: Vec<u64>,
    pub eos_reached: bool,
    /// Window positions left unused after generation stopped.
    pub unused: usize,
    pub forward_passes: usize,
}

impl DecodeTrace {
    /// Number of generated positions (sum of block sizes).
    pub fn generated_len(&self) -> usize {
        self.blocks.iter().map(|b| b.span.size).sum()
    }

    pub fn completion(&self) -> &[TokenId] {
        let p = self.sequence.prompt_len;
        &self.sequence.tokens[p..p + self.generated_len()]
    }

    /// Partition of the generated prefix.
    pub fn partition(&self) -> BlockPartition {
        BlockPartition { spans: self.blocks.iter().map(|b| b.span).collect(), window_len: self.generated_len() }
    }

    pub fn position_entropies(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.entropies.iter().copied()).collect()
    }

    pub fn block_entropies(&self) -> Vec<f64> {
        self.blocks.iter().map(BlockResult::mean_entropy).collect()
    }
}

/// Picks which of the masked candidates to commit. Returns indices into
/// `confidences`, ascending.
pub fn select_commit<R: Rng + ?Sized>(
    confidences: &[f64],
    n_commit: usize,
    mode: Remasking,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n_commit == 0 {
        return Err(Error::Domain("n_commit must be >= 1".into()));
    }
    if n_commit > confidences.len() {
        return Err(Error::Domain(format!(
            "cannot commit {n_commit} of {} masked positions",
            confidences.len()
        )));
    }
    let mut chosen = match mode {
        Remasking::LowConfidence => {
            let mut order: Vec<usize> = (0..confidences.len()).collect();
            order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
            order.truncate(n_commit);
            order
        }
        Remasking::Random => rand::seq::index::sample(rng, confidences.len(), n_commit).into_vec(),
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Candidate token and its model probability at one masked position.
fn propose<R: Rng + ?Sized>(
    out: &ForwardOutput,
    pos: usize,
    banned: &[TokenId],
    temperature: f64,
    rng: &mut R,
) -> (TokenId, f64) {
    let row = out.log_probs.row(pos);
    let allowed = |v: usize| !banned.contains(&(v as TokenId));
    let tok = if temperature <= 0.0 {
        let mut best = usize::MAX;
        for v in (0..row.len()).filter(|&v| allowed(v)) {
            if best == usize::MAX || row[v] > row[best] {
                best = v;
            }
        }
        best
    } else {
        let mx = (0..row.len()).filter(|&v| allowed(v)).map(|v| row[v]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (0..row.len())
            .map(|v| if allowed(v) { ((row[v] - mx) / temperature).exp() } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = 0;
        for (v, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                pick = v;
                if u < *w {
                    break;
                }
                u -= w;
            }
        }
        pick
    };
    (tok as TokenId, row[tok].exp())
}

struct BlockRun {
    result: BlockResult,
    logs: Vec<StepLog>,
    forwards: usize,
}

/// Denoises one block. In dynamic mode the block may close early at an indicator.
#[allow(clippy::too_many_arguments)]
fn run_block<R: Rng + ?Sized>(
    params: &ModelParams,
    vocab: &Vocabulary,
    context: &mut Sequence,
    k: usize,
    start: usize,
    size: usize,
    dynamic: bool,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<BlockRun> {
    let p0 = context.prompt_len;
    let window_len = context.window_len();
    let abs = |local0: usize| p0 + local0;
    let span0 = start - 1..start - 1 + size;
    let banned = [vocab.mask_id, vocab.pad_id];
    let banned_fill = [vocab.mask_id, vocab.pad_id, vocab.indicator_id];

    let mut logs: Vec<StepLog> = Vec::new();
    let mut forwards = 0;
    let mut last: Option<(ForwardOutput, usize)> = None;

    for t in 1..=cfg.steps {
        let masked: Vec<usize> = span0.clone().filter(|&i| context.tokens[abs(i)] == vocab.mask_id).collect();
        if masked.is_empty() {
            break;
        }
        let out = forward(params, &context.tokens)?;
        forwards += 1;
        let proposals: Vec<(TokenId, f64)> =
            masked.iter().map(|&i| propose(&out, abs(i), &banned, cfg.temperature, rng)).collect();
        let confidences: Vec<f64> = proposals.iter().map(|p| p.1).collect();
        let n_commit = masked.len().div_ceil(cfg.steps - t + 1);
        let chosen = select_commit(&confidences, n_commit, cfg.remasking, rng)?;
        let mut log = StepLog { k, step: t, positions: Vec::new(), confidences: Vec::new() };
        for &c in &chosen {
            context.tokens[abs(masked[c])] = proposals[c].0;
            log.positions.push(masked[c] + 1);
            log.confidences.push(proposals[c].1);
        }
        logs.push(log);

        if dynamic {
            if let Some(d) = find_boundary(context.window(), start, window_len, vocab.indicator_id) {
                // overshoot past the indicator goes back to the pool
                for i in start - 1 + d..span0.end {
                    context.tokens[abs(i)] = vocab.mask_id;
                }
                let cut = start - 1 + d;
                for l in &mut logs {
                    let keep: Vec<bool> = l.positions.iter().map(|&p| p <= cut).collect();
                    let mut it = keep.iter();
                    l.positions.retain(|_| *it.next().unwrap());
                    let mut it = keep.iter();
                    l.confidences.retain(|_| *it.next().unwrap());
                }
                // finalise positions inside the block that are still masked
                let tail = logs.last_mut().expect("current step log");
                for i in start - 1..cut {
                    if context.tokens[abs(i)] == vocab.mask_id {
                        let (tok, conf) = propose(&out, abs(i), &banned_fill, cfg.temperature, rng);
                        context.tokens[abs(i)] = tok;
                        tail.positions.push(i + 1);
                        tail.confidences.push(conf);
                    }
                }
                tail.positions.sort_unstable();
                logs.retain(|l| !l.positions.is_empty());
                let entropies = (start - 1..cut).map(|i| out.entropy(abs(i))).collect();
                let span = BlockSpan { k, start, size: d, contains_indicator: true };
                let tokens = context.window()[start - 1..cut].to_vec();
                return Ok(BlockRun { result: BlockResult { span, tokens, entropies, t_star: t }, logs, forwards });
            }
        }
        last = Some((out, t));
    }

    let (out, t_star) = last.expect("a block with at least one position runs at least one step");
    let entropies = span0.clone().map(|i| out.entropy(abs(i))).collect();
    let tokens = context.window()[span0.clone()].to_vec();
    let contains_indicator = tokens.contains(&vocab.indicator_id);
    let span = BlockSpan { k, start, size, contains_indicator };
    logs.retain(|l| !l.positions.is_empty());
    Ok(BlockRun { result: BlockResult { span, tokens, entropies, t_star }, logs, forwards })
}

/// Denoises a fixed span. All span positions must be masked on entry.
pub fn decode_block_fixed<R: Rng + ?Sized>(
    params: &ModelParams,
    vocab: &Vocabulary,
    context: &mut Sequence,
    span: BlockSpan,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<BlockResult> {
    check_span(context, span.start, span.size)?;
    Ok(run_block(params, vocab, context, span.k, span.start, span.size, false, cfg, rng)?.result)
}

/// Denoises a dynamic block starting at `block_start` (1-based local).
pub fn decode_block_dynamic<R: Rng + ?Sized>(
    params: &ModelParams,
    vocab: &Vocabulary,
    context: &mut Sequence,
    k: usize,
    block_start: usize,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<BlockResult> {
    let size = (context.window_len() + 1 - block_start.max(1)).min(cfg.max_block_cap);
    check_span(context, block_start, size)?;
    Ok(run_block(params, vocab, context, k, block_start, size, true, cfg, rng)?.result)
}

fn check_span(context: &Sequence, start: usize, size: usize) -> Result<()> {
    if start == 0 || size == 0 || start + size - 1 > context.window_len() {
        return Err(Error::Domain(format!(
            "block [{start}, +{size}) outside window of {}",
            context.window_len()
        )));
    }
    Ok(())
}

/// Generates a completion block by block until EOS or the window is exhausted.
pub fn generate<R: Rng + ?Sized>(
    params: &ModelParams,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<(Sequence, DecodeTrace)> {
    cfg.validate()?;
    let window = cfg.max_window;
    if prompt.len() + window > params.config.max_len {
        return Err(Error::TooLong { len: prompt.len() + window, max_len: params.config.max_len });
    }
    let mut context = Sequence::masked_window(prompt, window, vocab.mask_id);
    let mut blocks = Vec::new();
    let mut steps = Vec::new();
    let mut block_wall_ns = Vec::new();
    let mut forward_passes = 0;
    let mut eos_reached = false;
    let mut cursor = 0;
    while cursor < window {
        let k = blocks.len() + 1;
        let start = cursor + 1;
        let clock = Instant::now();
        let run = match cfg.mode {
            DecodeMode::Fixed => {
                let size = cfg.block_size.min(window - cursor);
                run_block(params, vocab, &mut context, k, start, size, false, cfg, rng)?
            }
            DecodeMode::Dynamic => {
                let size = (window - cursor).min(cfg.max_block_cap);
                run_block(params, vocab, &mut context, k, start, size, true, cfg, rng)?
            }
        };
        block_wall_ns.push(clock.elapsed().as_nanos() as u64);
        forward_passes += run.forwards;
        steps.extend(run.logs);
        cursor += run.result.span.size;
        let hit_eos = run.result.tokens.contains(&vocab.eos_id);
        blocks.push(run.result);
        if hit_eos {
            eos_reached = true;
            break;
        }
    }
    for t in &mut context.tokens[prompt.len() + cursor..] {
        *t = vocab.pad_id;
    }
    let trace = DecodeTrace {
        blocks,
        steps,
        sequence: context.clone(),
        block_wall_ns,
        eos_reached,
        unused: window - cursor,
        forward_passes,
    };
    Ok((context, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{InitOptions, ModelConfig};
    use crate::seq::validate_partition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, vocab: &Vocabulary) -> ModelParams {
        let cfg = ModelConfig { vocab_size: vocab.size, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_len: 64 };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed), InitOptions::default()).unwrap()
    }

    /// Output bias pushing the model towards `token` everywhere.
    fn bias_towards(p: &mut ModelParams, token: TokenId, amount: f64) {
        let b = p.layout().b_out;
        p.data[b.offset + token as usize] += amount;
    }

    #[test]
    fn select_commit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lc = Remasking::LowConfidence;
        assert_eq!(select_commit(&[0.9, 0.2, 0.5], 2, lc, &mut rng).unwrap(), vec![0, 2]);
        assert_eq!(select_commit(&[0.3, 0.3, 0.3], 1, lc, &mut rng).unwrap(), vec![0]);
        assert_eq!(select_commit(&[0.3, 0.1, 0.8], 3, lc, &mut rng).unwrap(), vec![0, 1, 2]);
        assert!(select_commit(&[0.3], 0, lc, &mut rng).is_err());
        assert!(select_commit(&[0.3], 2, lc, &mut rng).is_err());
        let r = select_commit(&[0.1; 10], 4, Remasking::Random, &mut rng).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fixed_block_commit_schedules() {
        let vocab = Vocabulary::standard();
        let p = model(1, &vocab);
        let prompt = vocab.tokenize("Numbers: 1 2 3 Target: 4").unwrap();
        let span = BlockSpan { k: 1, start: 1, size: 6, contains_indicator: false };

        let cfg = DecodeConfig { mode: DecodeMode::Fixed, block_size: 6, steps: 6, max_window: 12, ..Default::default() };
        let mut ctx = Sequence::masked_window(&prompt, 12, vocab.mask_id);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = run_block(&p, &vocab, &mut ctx, 1, 1, 6, false, &cfg, &mut rng).unwrap();
        assert_eq!(run.logs.len(), 6);
        assert!(run.logs.iter().all(|l| l.positions.len() == 1));
        assert_eq!(run.result.t_star, 6);

        let cfg1 = DecodeConfig { steps: 1, ..cfg };
        let mut ctx = Sequence::masked_window(&prompt, 12, vocab.mask_id);
        let run = run_block(&p, &vocab, &mut ctx, 1, 1, 6, false, &cfg1, &mut rng).unwrap();
        assert_eq!(run.logs.len(), 1);
        assert_eq!(run.logs[0].positions, (1..=6).collect::<Vec<_>>());
        assert!(ctx.window()[..6].iter().all(|&t| t != vocab.mask_id));
        assert!(ctx.window()[6..].iter().all(|&t| t == vocab.mask_id));

        let mut a = Sequence::masked_window(&prompt, 12, vocab.mask_id);
        let mut b = a.clone();
        let ra = decode_block_fixed(&p, &vocab, &mut a, span, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let rb = decode_block_fixed(&p, &vocab, &mut b, span, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn dynamic_block_closes_at_first_indicator() {
        let vocab = Vocabulary::standard();
        let mut p = model(2, &vocab);
        bias_towards(&mut p, vocab.indicator_id, 40.0);
        let prompt = vocab.tokenize("Compute: 1+2").unwrap();
        let cfg = DecodeConfig { mode: DecodeMode::Dynamic, steps: 8, max_window: 16, max_block_cap: 8, ..Default::default() };
        let mut ctx = Sequence::masked_window(&prompt, 16, vocab.mask_id);
        let res = decode_block_dynamic(&p, &vocab, &mut ctx, 1, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(res.t_star, 1);
        assert!(res.span.contains_indicator);
        assert_eq!(*res.tokens.last().unwrap(), vocab.indicator_id);
        assert_eq!(res.tokens.iter().filter(|&&t| t == vocab.indicator_id).count(), 1);
        assert_eq!(res.entropies.len(), res.span.size);
        // everything after the boundary is masked again
        assert!(ctx.window()[res.span.size..].iter().all(|&t| t == vocab.mask_id));
    }

    #[test]
    fn dynamic_fallback_uses_capped_span() {
        let vocab = Vocabulary::standard();
        let mut p = model(3, &vocab);
        bias_towards(&mut p, vocab.indicator_id, -60.0);
        bias_towards(&mut p, vocab.eos_id, -60.0);
        let prompt = vocab.tokenize("Compute: 1+2").unwrap();
        let cfg = DecodeConfig { mode: DecodeMode::Dynamic, steps: 4, max_window: 20, max_block_cap: 8, ..Default::default() };
        let (_, trace) = generate(&p, &vocab, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(trace.partition().sizes(), vec![8, 8, 4]);
        assert!(trace.blocks.iter().all(|b| b.t_star == 4 && !b.span.contains_indicator));
        assert!(!trace.eos_reached);
        assert_eq!(trace.unused, 0);
    }

    #[test]
    fn generation_stops_after_eos_block() {
        let vocab = Vocabulary::standard();
        let mut p = model(4, &vocab);
        bias_towards(&mut p, vocab.eos_id, 40.0);
        let prompt = vocab.tokenize("Compute: 1+2").unwrap();
        let cfg = DecodeConfig { mode: DecodeMode::Fixed, block_size: 4, steps: 4, max_window: 16, ..Default::default() };
        let (seq, trace) = generate(&p, &vocab, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(trace.blocks.len(), 1);
        assert!(trace.eos_reached);
        assert_eq!(trace.unused, 12);
        assert!(seq.window()[4..].iter().all(|&t| t == vocab.pad_id));
    }

    #[test]
    fn every_position_committed_once() {
        let vocab = Vocabulary::standard();
        for seed in 0..20 {
            let mut p = model(seed, &vocab);
            bias_towards(&mut p, vocab.indicator_id, 1.5);
            bias_towards(&mut p, vocab.eos_id, -3.0);
            let prompt = vocab.tokenize("Compute: 7-2").unwrap();
            let cfg = DecodeConfig {
                mode: DecodeMode::Dynamic,
                steps: 3,
                max_window: 24,
                max_block_cap: 10,
                temperature: 1.0,
                ..Default::default()
            };
            let (_, trace) = generate(&p, &vocab, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(validate_partition(&trace.partition()));
            let mut seen: Vec<usize> = trace.steps.iter().flat_map(|s| s.positions.iter().copied()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (1..=trace.generated_len()).collect::<Vec<_>>());
            for b in &trace.blocks {
                assert!(b.entropies.iter().all(|&h| (0.0..=(vocab.size as f64).ln() + 1e-12).contains(&h)));
                let first = b.tokens.iter().position(|&t| t == vocab.indicator_id);
                if b.span.contains_indicator {
                    assert_eq!(first, Some(b.span.size - 1));
                } else {
                    assert_eq!(first, None);
                }
            }
        }
    }
}
