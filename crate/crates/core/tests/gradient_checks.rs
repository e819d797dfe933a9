use medlab_core::decode::DecodeConfig;
use medlab_core::grpo::{grpo_objective, grpo_step, sample_group, GrpoConfig, PolicySnapshot, RolloutGroup};
use medlab_core::net::{
    corrupt, denoising_loss, denoising_loss_value, InitOptions, MaskingSample, ModelConfig, ModelParams,
};
use medlab_core::seq::{Sequence, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut ChaCha8Rng, vocab_size: usize) -> ModelConfig {
    let n_heads = rng.gen_range(1..=2);
    ModelConfig {
        vocab_size,
        d_model: n_heads * rng.gen_range(2..=4),
        n_layers: rng.gen_range(1..=2),
        n_heads,
        d_ff: rng.gen_range(4..=10),
        max_len: 40,
    }
}

/// Largest relative error over a sample of coordinates. The 1e-5 floor sits
/// above the ~2e-10 rounding noise of a central difference at h = 1e-5.
fn max_rel_error<F: Fn(&ModelParams) -> f64>(p: &ModelParams, grad: &[f64], f: F, rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let idx = rng.gen_range(0..p.len());
        let mut plus = p.clone();
        plus.data[idx] += h;
        let mut minus = p.clone();
        minus.data[idx] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-5);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn denoising_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let cfg = random_config(&mut rng, 12);
        let p = ModelParams::init(cfg, &mut rng, InitOptions::default()).unwrap();
        let batch: Vec<MaskingSample> = (0..2)
            .map(|_| {
                let len = rng.gen_range(6..14);
                let x0 = Sequence::new((0..len).map(|_| rng.gen_range(2..12)).collect(), 3).unwrap();
                loop {
                    let t = rng.gen_range(0.2..1.0);
                    let s = corrupt(&x0, t, 1, &mut rng).unwrap();
                    if !s.masked.is_empty() {
                        break s;
                    }
                }
            })
            .collect();
        let lg = denoising_loss(&p, &batch).unwrap();
        let err = max_rel_error(&p, &lg.grad, |q| denoising_loss_value(q, &batch).unwrap(), &mut rng);
        assert!(err < 1e-4, "relative error {err} for {cfg:?}");
    }
}

fn tiny_groups(seed: u64) -> (ModelParams, Vec<RolloutGroup>, GrpoConfig, Vocabulary) {
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg_model = random_config(&mut rng, vocab.size);
    let old = ModelParams::init(cfg_model, &mut rng, InitOptions::default()).unwrap();
    let mut theta = old.clone();
    for v in &mut theta.data {
        *v += rng.gen_range(-0.05..0.05);
    }
    let cfg = GrpoConfig {
        group_size: 3,
        clip_eps: 1e9,
        kl_beta: 0.0,
        p_mask: 0.3,
        decode: DecodeConfig { max_window: 10, max_block_cap: 5, steps: 3, temperature: 1.0, ..Default::default() },
        ..Default::default()
    };
    let snap = PolicySnapshot::new(&old, 0);
    let prompt = vocab.tokenize("Compute: 3+4").unwrap();
    let mut g = sample_group(&snap, &vocab, &prompt, &cfg, &mut rng).unwrap();
    for r in &mut g.rollouts {
        r.advantage = rng.gen_range(-1.5..1.5);
    }
    (theta, vec![g], cfg, vocab)
}

#[test]
fn unclipped_grpo_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let (theta, groups, cfg, vocab) = tiny_groups(seed);
        let out = grpo_step(&theta, None, &groups, &vocab, &cfg).unwrap();
        let value = grpo_objective(&theta, None, &groups, &vocab, &cfg).unwrap();
        assert!((value - out.objective).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let err = max_rel_error(&theta, &out.grad, |q| grpo_objective(q, None, &groups, &vocab, &cfg).unwrap(), &mut rng);
        assert!(err < 1e-4, "relative error {err} at seed {seed}");
    }
}

#[test]
fn kl_penalised_gradient_matches_finite_differences() {
    let (theta, groups, cfg, vocab) = tiny_groups(7);
    let mut reference = theta.clone();
    for (i, v) in reference.data.iter_mut().enumerate() {
        *v += 0.03 * ((i % 7) as f64 - 3.0) / 3.0;
    }
    let reference = PolicySnapshot::new(&reference, 0);
    let cfg = GrpoConfig { kl_beta: 0.04, clip_eps: 0.2, ..cfg };
    let out = grpo_step(&theta, Some(&reference), &groups, &vocab, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let err = max_rel_error(
        &theta,
        &out.grad,
        |q| grpo_objective(q, Some(&reference), &groups, &vocab, &cfg).unwrap(),
        &mut rng,
    );
    assert!(err < 1e-4, "relative error {err}");
}
