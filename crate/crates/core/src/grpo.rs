//! Group-relative policy optimisation over block-decoded rollouts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{generate, DecodeConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::net::objective::{logprob_dlogits, per_token_logprob_cached};
use crate::net::{backward, per_token_logprob, AdamWConfig, ModelParams, OptimizerState};
use crate::rewards::{
    entropy_descent_reward, indicator_reward, total_reward, EntropySequence, RewardBreakdown, RewardWeights,
};
use crate::seq::{BlockPartition, BlockSpan, TokenId, Vocabulary};
use crate::tasks::{verify, TaskInstance};

pub const EPS_STD: f64 = 1e-8;
/// Largest tolerated share of tokens with a non-finite ratio.
pub const MAX_EXCLUDED_FRAC: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub num_iterations: usize,
    pub p_mask: f64,
    pub decode: DecodeConfig,
    pub weights: RewardWeights,
    pub disable_ent: bool,
    pub disable_ind: bool,
    pub k_target: usize,
    /// Drop the indicator position when averaging block entropies.
    pub entropy_excludes_indicator: bool,
    pub prompts_per_batch: usize,
    /// Optimizer updates in total.
    pub steps: usize,
    pub ref_sync_steps: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 6,
            clip_eps: 0.5,
            kl_beta: 0.0,
            num_iterations: 12,
            p_mask: 0.15,
            decode: DecodeConfig { temperature: 1.0, ..Default::default() },
            weights: RewardWeights::default(),
            disable_ent: false,
            disable_ind: false,
            k_target: 3,
            entropy_excludes_indicator: false,
            prompts_per_batch: 2,
            steps: 2000,
            ref_sync_steps: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 || self.kl_beta.is_nan() || self.kl_beta < 0.0 {
            return Err(Error::Config("clip_eps must be > 0 and kl_beta >= 0".into()));
        }
        if self.num_iterations == 0 || self.prompts_per_batch == 0 || self.ref_sync_steps == 0 {
            return Err(Error::Config("num_iterations, prompts_per_batch and ref_sync_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_mask) {
            return Err(Error::Config("p_mask must lie in [0, 1)".into()));
        }
        self.decode.validate()
    }

    /// Reward weights after the ablation switches.
    pub fn effective_weights(&self) -> RewardWeights {
        RewardWeights {
            alpha: if self.disable_ent { 0.0 } else { self.weights.alpha },
            beta_ind: if self.disable_ind { 0.0 } else { self.weights.beta_ind },
            gamma: self.weights.gamma,
        }
    }
}

/// A frozen copy of the policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: ModelParams,
    step: usize,
}

impl PolicySnapshot {
    pub fn new(params: &ModelParams, step: usize) -> Self {
        Self { params: params.clone(), step }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trace: DecodeTrace,
    pub completion: Vec<TokenId>,
    /// Seed of the prompt-masking stream shared by every log-prob evaluation.
    pub mask_seed: u64,
    pub phi_old: Vec<f64>,
    pub partition: Option<BlockPartition>,
    pub entropies: Option<EntropySequence>,
    pub reward: Option<RewardBreakdown>,
    pub correct: bool,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: Vec<TokenId>,
    pub rollouts: Vec<Rollout>,
}

/// Draws `G` completions from the snapshot and records old-policy log-probs.
pub fn sample_group<R: Rng + ?Sized>(
    snapshot: &PolicySnapshot,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<RolloutGroup> {
    let window = cfg.decode.max_window;
    let mut attempt = || -> Result<Vec<Rollout>> {
        (0..cfg.group_size)
            .map(|_| {
                let (_, trace) = generate(snapshot.params(), vocab, prompt, &cfg.decode, rng)?;
                let completion = trace.completion().to_vec();
                let mask_seed: u64 = rng.gen();
                let phi_old = per_token_logprob(
                    snapshot.params(),
                    prompt,
                    &completion,
                    window,
                    cfg.p_mask,
                    vocab.mask_id,
                    &mut ChaCha8Rng::seed_from_u64(mask_seed),
                )?;
                Ok(Rollout {
                    trace,
                    completion,
                    mask_seed,
                    phi_old,
                    partition: None,
                    entropies: None,
                    reward: None,
                    correct: false,
                    advantage: 0.0,
                })
            })
            .collect()
    };
    let rollouts = match attempt() {
        Ok(r) => r,
        Err(_) => attempt()?,
    };
    Ok(RolloutGroup { prompt: prompt.to_vec(), rollouts })
}

/// Cuts a completion after every indicator, and at `max_block_cap` when none
/// arrives in time.
pub fn reconstruct_partition(completion: &[TokenId], indicator_id: TokenId, max_block_cap: usize) -> Result<BlockPartition> {
    if completion.is_empty() || max_block_cap == 0 {
        return Err(Error::Domain("reconstruction needs a non-empty completion and a positive cap".into()));
    }
    let mut spans = Vec::new();
    let mut start = 0;
    while start < completion.len() {
        let limit = (completion.len() - start).min(max_block_cap);
        let cut = completion[start..start + limit].iter().position(|&t| t == indicator_id);
        let size = cut.map_or(limit, |p| p + 1);
        spans.push(BlockSpan { k: spans.len() + 1, start: start + 1, size, contains_indicator: cut.is_some() });
        start += size;
    }
    Ok(BlockPartition { spans, window_len: completion.len() })
}

/// Mean per-position entropy of each span. With `skip` set, that token's
/// positions are left out unless a block holds nothing else.
pub fn grouped_entropies(
    partition: &BlockPartition,
    position_entropies: &[f64],
    completion: &[TokenId],
    skip: Option<TokenId>,
) -> Result<EntropySequence> {
    if position_entropies.len() != partition.window_len || completion.len() != partition.window_len {
        return Err(Error::Shape(format!(
            "{} entropies / {} tokens for a partition of {}",
            position_entropies.len(),
            completion.len(),
            partition.window_len
        )));
    }
    let values = partition
        .spans
        .iter()
        .map(|s| {
            let all: Vec<f64> = s.offsets().map(|i| position_entropies[i]).collect();
            let kept: Vec<f64> = s
                .offsets()
                .filter(|&i| skip != Some(completion[i]))
                .map(|i| position_entropies[i])
                .collect();
            let use_vals = if kept.is_empty() { all } else { kept };
            use_vals.iter().sum::<f64>() / use_vals.len() as f64
        })
        .collect();
    EntropySequence::new(values)
}

/// Partition and block entropies rebuilt from a rollout's tokens and its
/// recorded per-position entropies.
pub fn reconstruct_blocks(
    completion: &[TokenId],
    position_entropies: &[f64],
    indicator_id: TokenId,
    max_block_cap: usize,
) -> Result<(BlockPartition, EntropySequence)> {
    let partition = reconstruct_partition(completion, indicator_id, max_block_cap)?;
    let h = grouped_entropies(&partition, position_entropies, completion, None)?;
    Ok((partition, h))
}

/// Group-normalised advantages with the population standard deviation.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Domain("advantages need a group of at least 2".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > EPS_STD {
        Ok(rewards.iter().map(|r| (r - mean) / std).collect())
    } else {
        Ok(vec![0.0; rewards.len()])
    }
}

/// Fills in partitions, entropies, rewards and advantages.
pub fn compute_rewards(group: &mut RolloutGroup, task: &TaskInstance, vocab: &Vocabulary, cfg: &GrpoConfig) -> Result<()> {
    let weights = cfg.effective_weights();
    let skip = cfg.entropy_excludes_indicator.then_some(vocab.indicator_id);
    for r in &mut group.rollouts {
        let partition = reconstruct_partition(&r.completion, vocab.indicator_id, cfg.decode.max_block_cap)?;
        let h = grouped_entropies(&partition, &r.trace.position_entropies(), &r.completion, skip)?;
        let (correct, r_task) = verify(task, vocab, &r.completion);
        let r_ent = entropy_descent_reward(&h);
        let r_ind = indicator_reward(h.k(), cfg.k_target);
        r.reward = Some(total_reward(r_ent, r_ind, r_task, weights)?);
        r.correct = correct;
        r.partition = Some(partition);
        r.entropies = Some(h);
    }
    let totals: Vec<f64> = group.rollouts.iter().map(|r| r.reward.expect("just set").total).collect();
    for (r, a) in group.rollouts.iter_mut().zip(advantages(&totals)?) {
        r.advantage = a;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub objective: f64,
    /// Ascent direction of the objective.
    pub grad: Vec<f64>,
    pub excluded: usize,
    pub total_tokens: usize,
}

/// Token contribution and its derivative with respect to `φθ`.
fn token_term(phi: f64, phi_old: f64, phi_ref: Option<f64>, adv: f64, cfg: &GrpoConfig) -> Option<(f64, f64)> {
    let ratio = (phi - phi_old).exp();
    if !ratio.is_finite() || !phi.is_finite() {
        return None;
    }
    let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let (value, mut dphi) = if ratio * adv <= clipped * adv { (ratio * adv, ratio * adv) } else { (clipped * adv, 0.0) };
    let mut value = value;
    if cfg.kl_beta > 0.0 {
        let r_ref = (phi_ref? - phi).exp();
        if !r_ref.is_finite() {
            return None;
        }
        value -= cfg.kl_beta * (r_ref - (phi_ref? - phi) - 1.0);
        dphi -= cfg.kl_beta * (1.0 - r_ref);
    }
    Some((value, dphi))
}

/// Clipped surrogate averaged over every completion token in `groups`, minus
/// the KL penalty, with its gradient.
pub fn grpo_step(
    params: &ModelParams,
    reference: Option<&PolicySnapshot>,
    groups: &[RolloutGroup],
    vocab: &Vocabulary,
    cfg: &GrpoConfig,
) -> Result<StepOutcome> {
    let window = cfg.decode.max_window;
    if cfg.kl_beta > 0.0 && reference.is_none() {
        return Err(Error::Config("kl_beta > 0 needs a reference policy".into()));
    }
    struct Pending {
        cache: crate::net::ForwardCache,
        prompt_len: usize,
        coeffs: Vec<f64>,
        completion: Vec<TokenId>,
    }
    let mut pending = Vec::new();
    let mut objective = 0.0;
    let mut included = 0usize;
    let mut total = 0usize;
    for g in groups {
        for r in &g.rollouts {
            let mut stream = ChaCha8Rng::seed_from_u64(r.mask_seed);
            let (phi, cache) =
                per_token_logprob_cached(params, &g.prompt, &r.completion, window, cfg.p_mask, vocab.mask_id, &mut stream)?;
            let phi_ref = match reference.filter(|_| cfg.kl_beta > 0.0) {
                Some(s) => Some(per_token_logprob(
                    s.params(),
                    &g.prompt,
                    &r.completion,
                    window,
                    cfg.p_mask,
                    vocab.mask_id,
                    &mut ChaCha8Rng::seed_from_u64(r.mask_seed),
                )?),
                None => None,
            };
            let mut coeffs = vec![0.0; phi.len()];
            for j in 0..phi.len() {
                total += 1;
                let pr = phi_ref.as_ref().map(|v| v[j]);
                if let Some((value, d)) = token_term(phi[j], r.phi_old[j], pr, r.advantage, cfg) {
                    objective += value;
                    coeffs[j] = d;
                    included += 1;
                }
            }
            pending.push(Pending { cache, prompt_len: g.prompt.len(), coeffs, completion: r.completion.clone() });
        }
    }
    let excluded = total - included;
    if total == 0 {
        return Err(Error::Domain("no completion tokens in batch".into()));
    }
    if excluded as f64 > MAX_EXCLUDED_FRAC * total as f64 {
        return Err(Error::ExcludedTokens { excluded, total });
    }
    let scale = 1.0 / included.max(1) as f64;
    let mut grad = vec![0.0; params.len()];
    for p in pending {
        let coeffs: Vec<f64> = p.coeffs.iter().map(|c| c * scale).collect();
        let dlogits = logprob_dlogits(&p.cache, p.prompt_len, &p.completion, &coeffs);
        backward(params, &p.cache, &dlogits, &mut grad);
    }
    Ok(StepOutcome { objective: objective * scale, grad, excluded, total_tokens: total })
}

/// Objective value only; used for finite-difference checks.
pub fn grpo_objective(
    params: &ModelParams,
    reference: Option<&PolicySnapshot>,
    groups: &[RolloutGroup],
    vocab: &Vocabulary,
    cfg: &GrpoConfig,
) -> Result<f64> {
    let window = cfg.decode.max_window;
    let mut objective = 0.0;
    let mut included = 0usize;
    for g in groups {
        for r in &g.rollouts {
            let lp = |p: &ModelParams| {
                per_token_logprob(
                    p,
                    &g.prompt,
                    &r.completion,
                    window,
                    cfg.p_mask,
                    vocab.mask_id,
                    &mut ChaCha8Rng::seed_from_u64(r.mask_seed),
                )
            };
            let phi = lp(params)?;
            let phi_ref = match reference.filter(|_| cfg.kl_beta > 0.0) {
                Some(s) => Some(lp(s.params())?),
                None => None,
            };
            for j in 0..phi.len() {
                let pr = phi_ref.as_ref().map(|v| v[j]);
                if let Some((value, _)) = token_term(phi[j], r.phi_old[j], pr, r.advantage, cfg) {
                    objective += value;
                    included += 1;
                }
            }
        }
    }
    Ok(objective / included.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub mean_total: f64,
    pub mean_r_ent: f64,
    pub mean_r_ind: f64,
    pub mean_r_task: f64,
    pub mean_k: f64,
    pub mean_block_size: f64,
    pub objective: f64,
    pub excluded_token_frac: f64,
}

pub fn write_train_log<W: std::io::Write>(rows: &[TrainLogRow], mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "step,mean_total,mean_r_ent,mean_r_ind,mean_r_task,mean_K,mean_block_size,objective,excluded_token_frac"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.mean_total,
            r.mean_r_ent,
            r.mean_r_ind,
            r.mean_r_task,
            r.mean_k,
            r.mean_block_size,
            r.objective,
            r.excluded_token_frac
        )?;
    }
    Ok(())
}

fn batch_means(groups: &[RolloutGroup]) -> [f64; 6] {
    let mut acc = [0.0; 6];
    let mut n = 0.0;
    for r in groups.iter().flat_map(|g| &g.rollouts) {
        let b = r.reward.expect("rewards computed");
        let p = r.partition.as_ref().expect("partition computed");
        acc[0] += b.total;
        acc[1] += b.r_ent;
        acc[2] += b.r_ind;
        acc[3] += b.r_task;
        acc[4] += p.k() as f64;
        acc[5] += p.window_len as f64 / p.k() as f64;
        n += 1.0;
    }
    acc.map(|a| a / n)
}

/// Snapshot, sample, score and update until `cfg.steps` optimizer updates are done.
pub fn rl_train_loop(
    mut params: ModelParams,
    train: &[TaskInstance],
    vocab: &Vocabulary,
    cfg: &GrpoConfig,
) -> Result<(ModelParams, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let mut reference = (cfg.kl_beta > 0.0).then(|| PolicySnapshot::new(&params, 0));
    let mut log = Vec::with_capacity(cfg.steps);
    let mut step = 0;
    let mut batch = 0;
    while step < cfg.steps {
        let old = PolicySnapshot::new(&params, step);
        let groups = (|| -> Result<Vec<RolloutGroup>> {
            let mut groups = Vec::with_capacity(cfg.prompts_per_batch);
            for task in train.choose_multiple(&mut rng, cfg.prompts_per_batch).cloned().collect::<Vec<_>>() {
                let mut g = sample_group(&old, vocab, &task.prompt, cfg, &mut rng)?;
                compute_rewards(&mut g, &task, vocab, cfg)?;
                groups.push(g);
            }
            Ok(groups)
        })()
        .map_err(|e| Error::Batch { batch, source: Box::new(e) })?;
        let means = batch_means(&groups);
        for _ in 0..cfg.num_iterations {
            if step >= cfg.steps {
                break;
            }
            let out = grpo_step(&params, reference.as_ref(), &groups, vocab, cfg)
                .map_err(|e| Error::Batch { batch, source: Box::new(e) })?;
            let descent: Vec<f64> = out.grad.iter().map(|g| -g).collect();
            opt.step(&mut params, &descent).map_err(|e| Error::Batch { batch, source: Box::new(e) })?;
            step += 1;
            if cfg.kl_beta > 0.0 && step % cfg.ref_sync_steps == 0 {
                reference = Some(PolicySnapshot::new(&params, step));
            }
            log.push(TrainLogRow {
                step,
                mean_total: means[0],
                mean_r_ent: means[1],
                mean_r_ind: means[2],
                mean_r_task: means[3],
                mean_k: means[4],
                mean_block_size: means[5],
                objective: out.objective,
                excluded_token_frac: out.excluded as f64 / out.total_tokens as f64,
            });
        }
        batch += 1;
    }
    Ok((params, log))
}
