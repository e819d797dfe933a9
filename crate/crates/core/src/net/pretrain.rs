use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{InitOptions, ModelConfig, ModelParams};
use super::objective::{corrupt, denoising_loss, MaskingSample};
use super::optim::{AdamWConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::seq::{Sequence, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Lower clamp of the masking level, t ~ U[t_min, 1].
    pub t_min: f64,
    pub optimizer: AdamWConfig,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 16,
            t_min: 0.05,
            optimizer: AdamWConfig { lr: 3e-3, clip_norm: Some(1.0), weight_decay: 0.0, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    /// Loss divided by the mean window length; estimates nats per generated token.
    pub per_token: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ModelParams,
    pub curve: Vec<LossPoint>,
}

/// Draws a masking sample with at least one masked generation position.
pub fn sample_masking<R: Rng + ?Sized>(x0: &Sequence, t_min: f64, mask_id: TokenId, rng: &mut R) -> Result<MaskingSample> {
    if x0.window_len() == 0 {
        return Err(Error::Domain("sequence has an empty generation window".into()));
    }
    loop {
        let t = rng.gen_range(t_min..=1.0);
        let s = corrupt(x0, t, mask_id, rng)?;
        if !s.masked.is_empty() {
            return Ok(s);
        }
    }
}

/// corrupt → loss → AdamW, from freshly initialised parameters.
pub fn pretrain(model: ModelConfig, corpus: &[Sequence], mask_id: TokenId, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(model, &mut rng, InitOptions::default())?;
    continue_pretraining(params, corpus, mask_id, cfg, &mut rng)
}

pub fn continue_pretraining(
    mut params: ModelParams,
    corpus: &[Sequence],
    mask_id: TokenId,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainOutput> {
    if corpus.is_empty() {
        return Err(Error::Domain("pretraining corpus is empty".into()));
    }
    if !(cfg.t_min > 0.0 && cfg.t_min <= 1.0) || cfg.batch_size == 0 {
        return Err(Error::Config(format!("bad pretraining config {cfg:?}")));
    }
    let mean_window = corpus.iter().map(|s| s.window_len()).sum::<usize>() as f64 / corpus.len() as f64;
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let x0 = &corpus[rng.gen_range(0..corpus.len())];
                sample_masking(x0, cfg.t_min, mask_id, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let lg = denoising_loss(&params, &batch)?;
        opt.step(&mut params, &lg.grad)?;
        curve.push(LossPoint { step, loss: lg.loss, per_token: lg.loss / mean_window });
    }
    Ok(PretrainOutput { params, curve })
}

pub fn write_loss_csv<W: std::io::Write>(curve: &[LossPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for p in curve {
        writeln!(w, "{},{}", p.step, p.per_token)?;
    }
    Ok(())
}
