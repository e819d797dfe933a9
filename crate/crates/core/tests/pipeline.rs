use medlab_core::analysis::{analyze, linear_fit, scan_cost};
use medlab_core::decode::DecodeMode;
use medlab_core::experiment::{datasets, evaluate, run_pretrain, ExperimentConfig};
use medlab_core::net::{ModelConfig, PretrainConfig};
use medlab_core::tasks::CorpusConfig;
use medlab_core::trace::{read_trace, write_trace};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.architecture = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, ..ModelConfig::default() };
    cfg.model.pretrain = PretrainConfig { steps: 300, batch_size: 8, ..PretrainConfig::default() };
    cfg.model.corpus = CorpusConfig { n_countdown: 400, n_chain: 100, ..CorpusConfig::default() };
    cfg.task.n_train = 200;
    cfg.task.n_test = 24;
    cfg.decode.steps = 4;
    cfg
}

#[test]
fn pretraining_reduces_loss_and_traces_round_trip() {
    let cfg = tiny();
    let (train, test) = datasets(&cfg).unwrap();
    let out = run_pretrain(&cfg, &train).unwrap();
    let mean = |s: &[medlab_core::net::pretrain::LossPoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
    let n = out.curve.len();
    assert!(mean(&out.curve[n - 50..]) < 0.8 * mean(&out.curve[..50]));

    let decode = cfg.eval_decode(Some(DecodeMode::Dynamic), None);
    let eval = evaluate(&cfg, &out.params, &test.instances, &decode).unwrap();
    assert_eq!(eval.samples.len(), test.instances.len());
    let mut buf = Vec::new();
    write_trace(&mut buf, &eval.records).unwrap();
    let file = read_trace(buf.as_slice()).unwrap();
    assert_eq!(file.samples, eval.samples);
    assert_eq!(file.seed, cfg.seed);
    let again = evaluate(&cfg, &out.params, &test.instances, &decode).unwrap();
    assert_eq!(again.samples, eval.samples);

    let report = analyze(&file.samples, Some(&file.samples), 4).unwrap();
    assert_eq!(report.bins.bins.iter().map(|b| b.count).sum::<usize>(), eval.samples.len());
    assert_eq!(report.hard.unwrap().fixed_count, 0);
}

#[test]
fn boundary_scan_cost_grows_linearly() {
    let lens = [128.0, 256.0, 512.0, 1024.0];
    let cost: Vec<f64> = lens.iter().map(|&l| scan_cost(l as usize, 100_000, 15)).collect();
    let (slope, _, r2) = linear_fit(&lens, &cost).unwrap();
    assert!(slope > 0.0 && r2 > 0.9, "{cost:?} r2 {r2}");
}
