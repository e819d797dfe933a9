//! `medlab`: pretraining, RL post-training, evaluation and analysis runs.
//!
//! Every subcommand that writes a run directory drops `config.json` and
//! `manifest.json` next to its outputs, so the directory alone is enough to
//! rerun it.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use medlab_core::analysis::analyze;
use medlab_core::decode::DecodeMode;
use medlab_core::experiment::{self, ExperimentConfig};
use medlab_core::grpo::write_train_log;
use medlab_core::net::pretrain::write_loss_csv;
use medlab_core::net::{Checkpoint, ModelParams};
use medlab_core::seq::Vocabulary;
use medlab_core::tasks::Dataset;
use medlab_core::theorem1::theorem1_check;
use medlab_core::trace::{read_trace, write_trace};

#[derive(Parser)]
#[command(name = "medlab", version, about = "Toy masked-diffusion reasoning lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixed,
    Dynamic,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fixed => DecodeMode::Fixed,
            ModeArg::Dynamic => DecodeMode::Dynamic,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the datasets and pretrain a denoiser from scratch.
    Pretrain(RunArgs),
    /// GRPO post-training from a checkpoint.
    RlTrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode test prompts and write the rendered completions.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Fixed-mode block size.
        #[arg(long)]
        c: Option<usize>,
        /// Number of test prompts.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Decode the test split and write a trace file.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        c: Option<usize>,
    },
    /// Bin, summarise and compare evaluation traces.
    Analyze {
        #[arg(long)]
        traces: PathBuf,
        /// Trace of the baseline for the hard-sample comparison.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Exhaustive check of the entropy-descent equivalences.
    Theorem1 {
        #[arg(long, default_value_t = 6)]
        kmax: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock per committed token, fixed versus dynamic decoding.
    BenchOverhead {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Bad input (exit 2) versus a failed pipeline (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<medlab_core::Error> for Failure {
    fn from(e: medlab_core::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(Failure::Usage)?;
            ExperimentConfig::from_json(&text)
                .with_context(|| format!("config {}", p.display()))
                .map_err(Failure::Usage)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Creates the run directory and records config and manifest.
fn open_run(out: &Path, cfg: &ExperimentConfig, command: &str) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let manifest = json!({
        "command": command,
        "git_describe": git_describe(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn load_params(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<ModelParams> {
    let (vocab, params) = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .into_parts()?;
    if vocab != Vocabulary::standard() {
        bail!("checkpoint vocabulary does not match the task vocabulary");
    }
    if params.config.max_len < cfg.decode.max_window + 16 {
        bail!("checkpoint max_len {} too small for the decode window", params.config.max_len);
    }
    Ok(params)
}

fn write_dataset(path: &Path, d: &Dataset) -> anyhow::Result<()> {
    fs::write(path, d.to_jsonl()?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Cmd::Pretrain(args) => {
            let cfg = load_config(args.config.as_deref(), args.seed)?;
            open_run(&args.out, &cfg, "pretrain")?;
            let (train, test) = experiment::datasets(&cfg)?;
            write_dataset(&args.out.join("train.jsonl"), &train)?;
            write_dataset(&args.out.join("test.jsonl"), &test)?;
            let out = experiment::run_pretrain(&cfg, &train)?;
            write_loss_csv(&out.curve, fs::File::create(args.out.join("loss.csv"))?)?;
            Checkpoint::new(&Vocabulary::standard(), &out.params).save(&args.out.join("checkpoint.json"))?;
            if let Some(last) = out.curve.last() {
                println!("pretrained {} steps, final loss {:.4} nats/token", out.curve.len(), last.per_token);
            }
        }
        Cmd::RlTrain { run, checkpoint } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            let params = load_params(&checkpoint, &cfg)?;
            open_run(&run.out, &cfg, "rl-train")?;
            let (train, _) = experiment::datasets(&cfg)?;
            let (params, log) = experiment::run_rl(&cfg, params, &train)?;
            write_train_log(&log, fs::File::create(run.out.join("train_log.csv"))?)?;
            Checkpoint::new(&Vocabulary::standard(), &params).save(&run.out.join("checkpoint.json"))?;
            println!("ran {} GRPO steps", log.len());
        }
        Cmd::Generate { run, checkpoint, mode, c, n } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            let params = load_params(&checkpoint, &cfg)?;
            open_run(&run.out, &cfg, "generate")?;
            let (_, test) = experiment::datasets(&cfg)?;
            let subset = &test.instances[..n.min(test.instances.len())];
            let ev = experiment::evaluate(&cfg, &params, subset, &cfg.eval_decode(mode.map(Into::into), c))?;
            let vocab = Vocabulary::standard();
            let mut lines = String::new();
            for ((inst, text), s) in subset.iter().zip(&ev.generations).zip(&ev.samples) {
                let row = json!({
                    "sample_id": s.sample_id,
                    "instance_fingerprint": inst.fingerprint,
                    "prompt": vocab.render(&inst.prompt),
                    "completion": text,
                    "correct": s.correct,
                });
                lines.push_str(&row.to_string());
                lines.push('\n');
                println!("{} => {}", vocab.render(&inst.prompt), text);
            }
            fs::write(run.out.join("generations.jsonl"), lines)?;
        }
        Cmd::Evaluate { run, checkpoint, mode, c } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            let params = load_params(&checkpoint, &cfg)?;
            open_run(&run.out, &cfg, "evaluate")?;
            let (_, test) = experiment::datasets(&cfg)?;
            let decode = cfg.eval_decode(mode.map(Into::into), c);
            let ev = experiment::evaluate(&cfg, &params, &test.instances, &decode)?;
            write_trace(fs::File::create(run.out.join("traces.jsonl"))?, &ev.records)?;
            let summary = json!({
                "mode": experiment::mode_label(decode.mode),
                "block_size": decode.block_size,
                "samples": ev.samples.len(),
                "pass_at_1": ev.pass_at_1(),
            });
            fs::write(run.out.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n")?;
            println!("pass@1 {:.4} over {} instances", ev.pass_at_1(), ev.samples.len());
        }
        Cmd::Analyze { traces, baseline, out, config, bins } => {
            let cfg = load_config(config.as_deref(), None)?;
            let bins = bins.unwrap_or(cfg.analysis.bins);
            if bins == 0 {
                return Err(Failure::Usage(anyhow::anyhow!("--bins must be >= 1")));
            }
            let open = |p: &Path| -> anyhow::Result<_> {
                let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
                Ok(read_trace(BufReader::new(f))?)
            };
            let method = open(&traces)?;
            let base = baseline.as_deref().map(open).transpose()?;
            let report = analyze(&method.samples, base.as_ref().map(|b| b.samples.as_slice()), bins)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n")?;
            print!("{}", report.to_csv());
        }
        Cmd::Theorem1 { kmax, out } => {
            if kmax < 2 {
                return Err(Failure::Usage(anyhow::anyhow!("--kmax must be >= 2")));
            }
            let report = theorem1_check(kmax);
            print!("{}", report.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("theorem1.json"), serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n")?;
                fs::write(dir.join("theorem1.txt"), report.to_text())?;
            }
            if !report.passed {
                return Err(Failure::Pipeline(anyhow::anyhow!("{} counterexamples", report.counterexamples.len())));
            }
        }
        Cmd::BenchOverhead { run, checkpoint } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            let params = load_params(&checkpoint, &cfg)?;
            open_run(&run.out, &cfg, "bench-overhead")?;
            let (_, test) = experiment::datasets(&cfg)?;
            let report = experiment::run_bench(&cfg, &params, &test.instances)?;
            let mut csv = String::from("run,fixed_ns_per_token,dynamic_ns_per_token,ratio\n");
            for i in 0..report.ratios.len() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    i, report.fixed_ns_per_token[i], report.dynamic_ns_per_token[i], report.ratios[i]
                ));
            }
            fs::write(run.out.join("overhead.csv"), csv)?;
            fs::write(run.out.join("overhead.json"), serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n")?;
            println!("dynamic/fixed time per token: {:.3}", report.ratio);
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
fn run_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run_args(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{"model": {"architecture": {"d_model": 16, "n_heads": 2, "d_ff": 32},
        "pretrain": {"steps": 30}, "corpus": {"n_countdown": 200, "n_chain": 50}},
        "grpo": {"steps": 4, "num_iterations": 2}, "task": {"n_train": 200, "n_test": 8},
        "analysis": {"bench_prompts": 2, "bench_runs": 1}}"#;

    fn medlab(args: &[&str]) -> u8 {
        run_args(std::iter::once("medlab").chain(args.iter().copied()))
    }

    fn p(path: &Path) -> &str {
        path.to_str().unwrap()
    }

    #[test]
    fn usage_errors_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(medlab(&["pretrain", "--bogus"]), 2);
        assert_eq!(medlab(&[]), 2);
        let bad = dir.path().join("bad.json");
        fs::write(&bad, r#"{"model": {"depth": 3}}"#).unwrap();
        assert_eq!(medlab(&["pretrain", "--config", p(&bad), "--out", p(&dir.path().join("run"))]), 2);
        let missing = dir.path().join("absent.json");
        assert_eq!(medlab(&["pretrain", "--config", p(&missing), "--out", p(&dir.path().join("run"))]), 2);
    }

    #[test]
    fn missing_checkpoint_is_a_pipeline_failure() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        assert_eq!(medlab(&["evaluate", "--out", p(&out), "--checkpoint", p(&dir.path().join("nope.json"))]), 1);
    }

    #[test]
    fn theorem1_writes_a_passing_report() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(medlab(&["theorem1", "--out", p(dir.path())]), 0);
        let text = fs::read_to_string(dir.path().join("theorem1.txt")).unwrap();
        assert!(text.contains("total permutations: 872") && text.contains("PASS"));
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("tiny.json");
        fs::write(&cfg, TINY).unwrap();
        let read = |run: &str, name: &str| fs::read(dir.path().join(run).join(name)).unwrap();
        for tag in ["a", "b"] {
            let pre = dir.path().join(format!("pre_{tag}"));
            let ev = dir.path().join(format!("ev_{tag}"));
            let an = dir.path().join(format!("an_{tag}"));
            assert_eq!(medlab(&["pretrain", "--config", p(&cfg), "--out", p(&pre)]), 0);
            let ck = pre.join("checkpoint.json");
            assert_eq!(medlab(&["evaluate", "--config", p(&cfg), "--out", p(&ev), "--checkpoint", p(&ck)]), 0);
            let traces = ev.join("traces.jsonl");
            assert_eq!(medlab(&["analyze", "--traces", p(&traces), "--out", p(&an)]), 0);
        }
        for (run, name) in [("pre", "checkpoint.json"), ("pre", "loss.csv"), ("ev", "traces.jsonl"), ("an", "report.csv")] {
            assert_eq!(read(&format!("{run}_a"), name), read(&format!("{run}_b"), name), "{run}/{name}");
        }
    }
}
