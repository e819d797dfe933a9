//! Experiment configuration and the pipelines shared by the CLI and tests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{bench_overhead, OverheadReport};
use crate::decode::{generate, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::grpo::{rl_train_loop, GrpoConfig, TrainLogRow};
use crate::net::pretrain::continue_pretraining;
use crate::net::{AdamWConfig, InitOptions, ModelConfig, ModelParams, PretrainConfig, PretrainOutput};
use crate::rewards::RewardWeights;
use crate::seq::{Sequence, Vocabulary};
use crate::tasks::{countdown_splits, instance_rng, pretraining_corpus, CorpusConfig, Dataset, TaskConfig, TaskInstance};
use crate::trace::{block_records, sample_record, SampleRecord, TraceRecord, TRACE_SCHEMA};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: ModelConfig,
    pub pretrain: PretrainConfig,
    pub corpus: CorpusConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoSection {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub num_iterations: usize,
    pub p_mask: f64,
    /// Rollout sampling temperature.
    pub temperature: f64,
    pub prompts_per_batch: usize,
    pub steps: usize,
    pub ref_sync_steps: usize,
    pub optimizer: AdamWConfig,
}

impl Default for GrpoSection {
    fn default() -> Self {
        Self {
            group_size: 6,
            clip_eps: 0.5,
            kl_beta: 0.0,
            num_iterations: 4,
            p_mask: 0.15,
            temperature: 1.0,
            prompts_per_batch: 2,
            steps: 2000,
            ref_sync_steps: 64,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub alpha: f64,
    pub beta_ind: f64,
    pub gamma: f64,
    pub disable_ent: bool,
    pub disable_ind: bool,
    pub k_target: usize,
    pub entropy_excludes_indicator: bool,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_ind: 1.0,
            gamma: 1.0,
            disable_ent: false,
            disable_ind: false,
            k_target: 3,
            entropy_excludes_indicator: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub bins: usize,
    pub bench_runs: usize,
    pub bench_prompts: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { bins: 6, bench_runs: 3, bench_prompts: 64 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub decode: DecodeConfig,
    pub grpo: GrpoSection,
    pub rewards: RewardSection,
    pub task: TaskConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Vocabulary::standard();
        self.model.architecture.validate()?;
        if self.model.architecture.vocab_size != vocab.size {
            return Err(Error::Config(format!("vocab_size must be {}", vocab.size)));
        }
        if self.model.corpus.window != self.decode.max_window {
            return Err(Error::Config("corpus window and decode max_window differ".into()));
        }
        self.task.validate()?;
        self.decode.validate()?;
        self.grpo_config().validate()?;
        if self.analysis.bins == 0 {
            return Err(Error::Config("analysis.bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        let g = self.grpo;
        let r = self.rewards;
        GrpoConfig {
            group_size: g.group_size,
            clip_eps: g.clip_eps,
            kl_beta: g.kl_beta,
            num_iterations: g.num_iterations,
            p_mask: g.p_mask,
            decode: DecodeConfig { temperature: g.temperature, seed: self.seed, ..self.decode },
            weights: RewardWeights { alpha: r.alpha, beta_ind: r.beta_ind, gamma: r.gamma },
            disable_ent: r.disable_ent,
            disable_ind: r.disable_ind,
            k_target: r.k_target,
            entropy_excludes_indicator: r.entropy_excludes_indicator,
            prompts_per_batch: g.prompts_per_batch,
            steps: g.steps,
            ref_sync_steps: g.ref_sync_steps,
            optimizer: g.optimizer,
            seed: self.seed,
        }
    }

    /// Evaluation decoding, optionally switched to another mode or block size.
    pub fn eval_decode(&self, mode: Option<DecodeMode>, block_size: Option<usize>) -> DecodeConfig {
        DecodeConfig {
            mode: mode.unwrap_or(self.decode.mode),
            block_size: block_size.unwrap_or(self.decode.block_size),
            seed: self.seed,
            ..self.decode
        }
    }
}

pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    countdown_splits(cfg.task.data_seed, &cfg.task)
}

pub fn build_corpus(cfg: &ExperimentConfig, train: &Dataset) -> Result<Vec<Sequence>> {
    let mut rng = instance_rng(cfg.seed, "corpus");
    pretraining_corpus(&mut rng, &train.instances, &cfg.task, &cfg.model.corpus)
}

pub fn run_pretrain(cfg: &ExperimentConfig, train: &Dataset) -> Result<PretrainOutput> {
    let corpus = build_corpus(cfg, train)?;
    let mut rng = instance_rng(cfg.seed, "pretrain");
    let params = ModelParams::init(cfg.model.architecture, &mut rng, InitOptions::default())?;
    let pc = PretrainConfig { seed: cfg.seed, ..cfg.model.pretrain };
    continue_pretraining(params, &corpus, Vocabulary::standard().mask_id, &pc, &mut rng)
}

pub fn run_rl(cfg: &ExperimentConfig, params: ModelParams, train: &Dataset) -> Result<(ModelParams, Vec<TrainLogRow>)> {
    rl_train_loop(params, &train.instances, &Vocabulary::standard(), &cfg.grpo_config())
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<TraceRecord>,
    pub samples: Vec<SampleRecord>,
    pub generations: Vec<String>,
}

impl Evaluation {
    pub fn pass_at_1(&self) -> f64 {
        self.samples.iter().filter(|s| s.correct).count() as f64 / self.samples.len().max(1) as f64
    }
}

pub fn mode_label(mode: DecodeMode) -> &'static str {
    match mode {
        DecodeMode::Fixed => "fixed",
        DecodeMode::Dynamic => "dynamic",
    }
}

/// Decodes every test instance and scores it. Each instance draws from its
/// own stream derived from the run seed and its fingerprint.
pub fn evaluate(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    test: &[TaskInstance],
    decode: &DecodeConfig,
) -> Result<Evaluation> {
    let vocab = Vocabulary::standard();
    let mode = mode_label(decode.mode);
    let mut header_cfg = serde_json::to_value(cfg)?;
    header_cfg["decode"] = serde_json::to_value(decode)?;
    let mut records = vec![TraceRecord::Header { schema: TRACE_SCHEMA.into(), config: header_cfg, seed: cfg.seed }];
    let mut samples = Vec::with_capacity(test.len());
    let mut generations = Vec::with_capacity(test.len());
    for (i, inst) in test.iter().enumerate() {
        let mut rng = instance_rng(cfg.seed, &inst.fingerprint);
        let (_, trace) = generate(params, &vocab, &inst.prompt, decode, &mut rng)?;
        let sample = sample_record(i, inst, &trace, mode, cfg.rewards.k_target, &vocab)?;
        records.extend(block_records(i, &trace).into_iter().map(TraceRecord::Block));
        records.push(TraceRecord::Sample(sample.clone()));
        samples.push(sample);
        generations.push(vocab.render(trace.completion()));
    }
    Ok(Evaluation { records, samples, generations })
}

/// Fixed versus dynamic wall-clock per committed token on the first test prompts.
pub fn run_bench(cfg: &ExperimentConfig, params: &ModelParams, test: &[TaskInstance]) -> Result<OverheadReport> {
    let prompts: Vec<_> = test.iter().take(cfg.analysis.bench_prompts).map(|i| i.prompt.clone()).collect();
    let fixed = cfg.eval_decode(Some(DecodeMode::Fixed), None);
    let dynamic = cfg.eval_decode(Some(DecodeMode::Dynamic), None);
    bench_overhead(params, &Vocabulary::standard(), &prompts, &fixed, &dynamic, cfg.analysis.bench_runs)
}
