use ndarray::Array2;
use rand::Rng;

use super::model::ModelParams;
use super::transformer::{backward, forward, forward_with_cache, ForwardCache};
use crate::error::{Error, Result};
use crate::seq::{Sequence, TokenId};

/// A clean sequence together with its forward-corrupted copy.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingSample {
    pub x0: Sequence,
    pub t: f64,
    pub xt: Sequence,
    /// Absolute positions replaced by the mask token.
    pub masked: Vec<usize>,
}

/// Masks each generation position independently with probability `t`.
pub fn corrupt<R: Rng + ?Sized>(x0: &Sequence, t: f64, mask_id: TokenId, rng: &mut R) -> Result<MaskingSample> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("masking level t must lie in (0, 1], got {t}")));
    }
    let mut xt = x0.clone();
    let mut masked = Vec::new();
    for i in x0.prompt_len..x0.len() {
        if t >= 1.0 || rng.gen::<f64>() < t {
            xt.tokens[i] = mask_id;
            masked.push(i);
        }
    }
    Ok(MaskingSample { x0: x0.clone(), t, xt, masked })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Reweighted masked cross-entropy: `-(1/B) Σ_s (1/t_s) Σ_{i masked} log p(x0_i | xt)`.
pub fn denoising_loss(params: &ModelParams, batch: &[MaskingSample]) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        if sample.masked.is_empty() {
            return Err(Error::Domain("masking sample has no masked generation position".into()));
        }
        let (out, cache) = forward_with_cache(params, &sample.xt.tokens)?;
        let w = scale / sample.t;
        let mut dlogits = Array2::zeros(out.log_probs.raw_dim());
        for &i in &sample.masked {
            let target = sample.x0.tokens[i] as usize;
            loss -= w * out.log_probs[[i, target]];
            add_neg_logprob_grad(&mut dlogits, cache.probs(), i, target, w);
        }
        backward(params, &cache, &dlogits, &mut grad);
    }
    Ok(LossAndGrad { loss, grad })
}

/// Loss only, for finite-difference checks and evaluation.
pub fn denoising_loss_value(params: &ModelParams, batch: &[MaskingSample]) -> Result<f64> {
    let mut loss = 0.0;
    for sample in batch {
        if sample.masked.is_empty() {
            return Err(Error::Domain("masking sample has no masked generation position".into()));
        }
        let out = forward(params, &sample.xt.tokens)?;
        let w = 1.0 / (batch.len() as f64 * sample.t);
        loss -= w * sample.masked.iter().map(|&i| out.log_probs[[i, sample.x0.tokens[i] as usize]]).sum::<f64>();
    }
    Ok(loss)
}

/// Adds `w * d(-log p_target)/dlogits` at row `pos`.
fn add_neg_logprob_grad(dlogits: &mut Array2<f64>, probs: &Array2<f64>, pos: usize, target: usize, w: f64) {
    for v in 0..probs.ncols() {
        dlogits[[pos, v]] += w * probs[[pos, v]];
    }
    dlogits[[pos, target]] -= w;
}

/// Builds the log-probability estimator input: prompt tokens masked at rate
/// `p_mask`, followed by a fully masked window.
pub fn logprob_input<R: Rng + ?Sized>(
    prompt: &[TokenId],
    window_len: usize,
    p_mask: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if !(0.0..1.0).contains(&p_mask) {
        return Err(Error::Domain(format!("p_mask must lie in [0, 1), got {p_mask}")));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + window_len);
    for &t in prompt {
        // one draw per prompt position keeps streams aligned across policies
        let u: f64 = rng.gen();
        tokens.push(if u < p_mask { mask_id } else { t });
    }
    tokens.resize(prompt.len() + window_len, mask_id);
    Ok(tokens)
}

/// One-pass per-token log-probabilities of `completion` under a single input
/// where the whole window is masked and the prompt is randomly masked.
pub fn per_token_logprob<R: Rng + ?Sized>(
    params: &ModelParams,
    prompt: &[TokenId],
    completion: &[TokenId],
    window_len: usize,
    p_mask: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_window(completion.len(), window_len)?;
    let input = logprob_input(prompt, window_len, p_mask, mask_id, rng)?;
    let out = forward(params, &input)?;
    Ok(completion
        .iter()
        .enumerate()
        .map(|(j, &tok)| out.log_prob(prompt.len() + j, tok))
        .collect())
}

/// As [`per_token_logprob`] but keeps the activations for backpropagation.
pub fn per_token_logprob_cached<R: Rng + ?Sized>(
    params: &ModelParams,
    prompt: &[TokenId],
    completion: &[TokenId],
    window_len: usize,
    p_mask: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_window(completion.len(), window_len)?;
    let input = logprob_input(prompt, window_len, p_mask, mask_id, rng)?;
    let (out, cache) = forward_with_cache(params, &input)?;
    let phi = completion
        .iter()
        .enumerate()
        .map(|(j, &tok)| out.log_prob(prompt.len() + j, tok))
        .collect();
    Ok((phi, cache))
}

/// Gradient of `Σ_j coeff_j · log p(completion_j)` w.r.t. logits.
pub fn logprob_dlogits(cache: &ForwardCache, prompt_len: usize, completion: &[TokenId], coeffs: &[f64]) -> Array2<f64> {
    let probs = cache.probs();
    let mut dlogits = Array2::zeros(probs.raw_dim());
    for (j, (&tok, &c)) in completion.iter().zip(coeffs).enumerate() {
        if c != 0.0 {
            add_neg_logprob_grad(&mut dlogits, probs, prompt_len + j, tok as usize, -c);
        }
    }
    dlogits
}

fn check_window(completion_len: usize, window_len: usize) -> Result<()> {
    if completion_len > window_len {
        return Err(Error::Domain(format!(
            "completion of length {completion_len} does not fit window {window_len}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::{InitOptions, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize, prompt: usize) -> Sequence {
        Sequence::new((0..n as u32).map(|i| 4 + i % 8).collect(), prompt).unwrap()
    }

    #[test]
    fn corrupt_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = seq(20, 5);
        let s = corrupt(&x0, 1.0, 1, &mut rng).unwrap();
        assert_eq!(s.masked, (5..20).collect::<Vec<_>>());
        assert_eq!(&s.xt.tokens[..5], &x0.tokens[..5]);
        let s = corrupt(&x0, 1e-12, 1, &mut rng).unwrap();
        assert!(s.masked.is_empty());
        assert!(corrupt(&x0, 0.0, 1, &mut rng).is_err());
        assert!(corrupt(&x0, 1.5, 1, &mut rng).is_err());
    }

    #[test]
    fn corrupt_masks_exactly_the_recorded_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = seq(64, 8);
        let s = corrupt(&x0, 0.4, 1, &mut rng).unwrap();
        for i in 0..64 {
            assert_eq!(s.xt.tokens[i] == 1, s.masked.contains(&i));
            if !s.masked.contains(&i) {
                assert_eq!(s.xt.tokens[i], x0.tokens[i]);
            }
        }
    }

    #[test]
    fn corrupt_rate_statistics() {
        // masked count over a 1000-position window stays within 3 sigma of 500
        let x0 = Sequence::new(vec![5; 1000], 0).unwrap();
        let sigma = (1000.0f64 * 0.25).sqrt();
        let mut worst = 0.0f64;
        let mut total = 0usize;
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = corrupt(&x0, 0.5, 1, &mut rng).unwrap().masked.len();
            total += m;
            worst = worst.max((m as f64 - 500.0).abs() / sigma);
        }
        let mean = total as f64 / 10_000.0;
        assert!((mean - 500.0).abs() < 3.0 * sigma / 100.0, "mean {mean}");
        // 3 sigma excursions are rare; 5 sigma should never happen in 10^4 draws
        assert!(worst < 5.0, "worst excursion {worst} sigma");
    }

    #[test]
    fn uniform_predictor_loss() {
        let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(cfg, &mut rng, InitOptions { zero_output: true, ..Default::default() }).unwrap();
        let x0 = seq(16, 4);
        let s = corrupt(&x0, 0.5, 1, &mut rng).unwrap();
        let m = s.masked.len() as f64;
        let lg = denoising_loss(&p, std::slice::from_ref(&s)).unwrap();
        assert!((lg.loss - m / 0.5 * (12f64).ln()).abs() < 1e-9);
        assert!(lg.grad.iter().all(|g| g.is_finite()));
        let mut empty = s;
        empty.masked.clear();
        assert!(denoising_loss(&p, &[empty]).is_err());
    }

    #[test]
    fn logprob_with_zero_mask_rate_is_deterministic() {
        let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 16 };
        let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3), InitOptions::default()).unwrap();
        let a = per_token_logprob(&p, &[4, 5, 6], &[7, 8], 6, 0.0, 1, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let b = per_token_logprob(&p, &[4, 5, 6], &[7, 8], 6, 0.0, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(per_token_logprob(&p, &[4], &[7, 8], 1, 0.0, 1, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(per_token_logprob(&p, &[4], &[7], 1, 1.0, 1, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
