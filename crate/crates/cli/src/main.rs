//! `adhoc-fusion`: simulate ad-hoc array data, train and evaluate the
//! stream-fusion layer, verify gradients and export channel weights.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sparsemax_fusion::checkpoint::{load_dataset, save_dataset, Checkpoint, SCHEMA_VERSION};
use sparsemax_fusion::gradcheck::{grad_check_with, SuiteOptions};
use sparsemax_fusion::recognizer::{pretrain_single_channel, PretrainConfig, Recognizer};
use sparsemax_fusion::rng::mix_seed;
use sparsemax_fusion::sim::{make_clean_utterances, make_dataset, FusionSample, Task, TaskSpec, NOISE_CHANNEL_DB};
use sparsemax_fusion::trainer::{evaluate, split_dataset, trace, train_fusion, Report, TrainConfig};
use sparsemax_fusion::{scaling_sparsemax, softmax, sparsemax, AttentionParams, Error, Logits, Rng, SimplexWeights};

use config::{seed_override, RunConfig};

const N_HEADS: usize = 2;
const PRETRAIN_HELDOUT: usize = 400;

/// Process outcome; maps to the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or input files: exit 2.
    Usage(String),
    /// A check ran and failed, or training broke down: exit 1.
    Verification(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Verification(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::TrainingDivergence(_) | Error::NonFiniteLoss { .. } | Error::OracleNoConvergence { .. } => {
                Failure::Verification(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "adhoc-fusion", version, about = "Sparse stream-attention fusion for ad-hoc microphone arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print softmax, sparsemax and scaling sparsemax of a score vector.
    OpsDemo {
        /// Comma-separated scores, e.g. 0.5,0.2,-0.1
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        z: Vec<f64>,
        /// Scale of scaling sparsemax (>= 1).
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        s: f64,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long)]
        verbose: bool,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Negate the analytic gradients (checker sanity test).
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Generate a JSON-lines dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        /// Overrides the channel count of the chosen split.
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the recognizer, train the fusion layer, write checkpoint and report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset of any channel count.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::All)]
        split: EvalSplit,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export mic positions and decoding-averaged channel weights of one sample.
    DumpWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sample_id: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalSplit {
    All,
    Heldout,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::OpsDemo { z, s } => ops_demo(&z, s),
        Command::Gradcheck {
            verbose,
            points,
            seed,
            corrupt_backward,
        } => gradcheck(verbose, points, seed, corrupt_backward),
        Command::Simulate {
            config,
            split,
            channels,
            out,
        } => simulate(config.as_deref(), split, channels, out),
        Command::Train { config, dataset } => train(config.as_deref(), dataset.as_deref()),
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
            out,
        } => evaluate_cmd(&checkpoint, &dataset, split, out),
        Command::DumpWeights {
            checkpoint,
            dataset,
            sample_id,
            out,
        } => dump_weights(&checkpoint, &dataset, sample_id, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            match f {
                Failure::Usage(_) => ExitCode::from(2),
                Failure::Verification(_) => ExitCode::from(1),
            }
        }
    }
}

fn fmt_row(w: &[f64]) -> String {
    let cells: Vec<String> = w.iter().map(|x| format!("{x:.4}")).collect();
    format!("({})", cells.join(", "))
}

fn print_weights(name: &str, p: &SimplexWeights<f64>) {
    let tau = p.tau().map_or("-".to_string(), |t| format!("{t:.4}"));
    let support: Vec<String> = p.support().iter().map(|i| i.to_string()).collect();
    println!(
        "{name:<18} {}  tau {tau}  support [{}]",
        fmt_row(p.weights()),
        support.join(", ")
    );
}

fn ops_demo(z: &[f64], s: f64) -> Result<(), Failure> {
    if !(s.is_finite() && s >= 1.0) {
        return Err(Failure::Usage(format!("--s must be a finite number >= 1, got {s}")));
    }
    let logits = Logits::from_slice(z).map_err(|e| Failure::Usage(format!("--z: {e}")))?;
    println!("z                  {}  s {s}", fmt_row(z));
    print_weights("softmax", &softmax(&logits));
    print_weights("sparsemax", &sparsemax(&logits));
    print_weights("scaling_sparsemax", &scaling_sparsemax(&logits, s)?);
    Ok(())
}

fn gradcheck(verbose: bool, points: usize, seed: u64, corrupt: bool) -> Result<(), Failure> {
    let seed = seed_override()?.unwrap_or(seed);
    let report = grad_check_with(
        &mut Rng::new(seed),
        SuiteOptions {
            points,
            corrupt,
            zero_params: false,
        },
    );
    for e in &report.entries {
        if verbose {
            for (i, err) in e.point_errors.iter().enumerate() {
                let status = if *err < report.tolerance { "ok" } else { "FAIL" };
                println!("  {} #{i:03} rel_err {err:.3e} {status}", e.operator);
            }
        }
        let status = if e.passed { "PASS" } else { "FAIL" };
        let note = e.error.as_deref().map(|m| format!(" ({m})")).unwrap_or_default();
        println!(
            "{status} {:<36} points {:>3}  max rel err {:.3e}{note}",
            e.operator, e.points, e.max_rel_error
        );
    }
    if report.all_passed() {
        println!("gradcheck: all {} operators within {:e}", report.entries.len(), report.tolerance);
        Ok(())
    } else {
        let failed = report.entries.iter().filter(|e| !e.passed).count();
        Err(Failure::Verification(format!("gradcheck: {failed} operator(s) failed")))
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Writes `<dir>/<command>.config.json`.
fn stamp(dir: &Path, command: &str, config: &Value) -> Result<(), Failure> {
    write_json(
        &dir.join(format!("{command}.config.json")),
        &json!({"schema": SCHEMA_VERSION, "command": command, "config": config}),
    )
}

fn task() -> Result<Task, Failure> {
    Ok(Task::new(TaskSpec::default())?)
}

fn generate(cfg: &RunConfig, split: Split, channels: usize, task: &Task) -> Result<Vec<FusionSample>, Failure> {
    let (n, index) = match split {
        Split::Train => (cfg.train_samples, 10),
        Split::Test => (cfg.test_samples, 11),
    };
    Ok(make_dataset(n, channels, &cfg.quality_profile, task, &Rng::new(cfg.seed).child(index))?)
}

fn simulate(config: Option<&Path>, split: Split, channels: Option<usize>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let channels = channels.unwrap_or(match split {
        Split::Train => cfg.channels_train,
        Split::Test => cfg.channels_test,
    });
    if channels == 0 {
        return Err(Failure::Usage("--channels must be >= 1".into()));
    }
    let samples = generate(&cfg, split, channels, &task()?)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("{}.jsonl", split_name(split))));
    let resolved = json!({"run": cfg.to_value(), "split": split, "channels": channels});
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_dataset(&out, &resolved, &samples)?;
    stamp(&cfg.output_dir, "simulate", &resolved)?;

    println!("wrote {} samples x {channels} channels to {}", samples.len(), out.display());
    let noisy: Vec<usize> = samples.iter().map(|s| s.noise_channels().len()).collect();
    println!(
        "channels <= {NOISE_CHANNEL_DB} dB per sample: {} (min {}, max {})",
        fmt_mean(&noisy),
        noisy.iter().min().unwrap_or(&0),
        noisy.iter().max().unwrap_or(&0)
    );
    println!("channel  mean snr dB  min snr dB  max snr dB");
    for k in 0..channels {
        let snr: Vec<f64> = samples.iter().map(|s| s.observations[k].snr_db).collect();
        let mean = snr.iter().sum::<f64>() / snr.len() as f64;
        let lo = snr.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = snr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("{k:>7}  {mean:>11.2}  {lo:>10.2}  {hi:>10.2}");
    }
    Ok(())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn fmt_mean(v: &[usize]) -> String {
    if v.is_empty() {
        return "n/a".into();
    }
    let m = v.iter().sum::<usize>() as f64 / v.len() as f64;
    if m.fract() == 0.0 {
        format!("{m:.0}")
    } else {
        format!("{m:.2}")
    }
}

fn pretrain(cfg: &RunConfig, task: &Task) -> Result<Recognizer, Failure> {
    let root = Rng::new(cfg.seed);
    let train = make_clean_utterances(cfg.pretrain_samples, task, &root.child(1));
    let heldout = make_clean_utterances(PRETRAIN_HELDOUT, task, &root.child(2));
    let pcfg = PretrainConfig {
        seed: mix_seed(cfg.seed, 3),
        ..Default::default()
    };
    let out = pretrain_single_channel(&task.spec, &train, &heldout, &pcfg)?;
    println!("recognizer: held-out clean accuracy {:.4}", out.heldout_accuracy);
    Ok(out.recognizer)
}

fn print_report(label: &str, r: &Report) {
    println!(
        "{label}: variant {} C={} samples {} steps {}",
        r.variant, r.channels, r.samples, r.decoding_steps
    );
    println!(
        "  accuracy {:.4}  loss {:.4}  noise_mass {:.4}  (<0.01 on {:.1}% of steps, <0.02 on {:.1}%)",
        r.task_accuracy,
        r.heldout_loss,
        r.noise_mass,
        100.0 * r.noise_mass_below_1pct,
        100.0 * r.noise_mass_below_2pct
    );
    println!(
        "  mean support {:.2}  steps with a zero weight {:.1}%  selection agreement {:.4}  mean s {:.3}",
        r.mean_support,
        100.0 * r.zero_weight_steps,
        r.selection_agreement,
        r.mean_scale
    );
}

fn train(config: Option<&Path>, dataset: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let task = task()?;
    let mut resolved = cfg.to_value();
    let samples = match dataset {
        Some(path) => {
            let (samples, _) = load_dataset(path)?;
            if samples.is_empty() {
                return Err(Failure::Usage(format!("{}: empty dataset", path.display())));
            }
            resolved["dataset"] = json!(path);
            samples
        }
        None => {
            let samples = generate(&cfg, Split::Train, cfg.channels_train, &task)?;
            let path = cfg.output_dir.join("train.jsonl");
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
            save_dataset(&path, &json!({"run": cfg.to_value(), "split": "train", "channels": cfg.channels_train}), &samples)?;
            resolved["dataset"] = json!(path);
            samples
        }
    };
    let train_channels = samples[0].channels();
    stamp(&cfg.output_dir, "train", &resolved)?;

    let rec = pretrain(&cfg, &task)?;
    let tcfg = TrainConfig {
        variant: cfg.variant,
        learning_rate: cfg.learning_rate,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seed: mix_seed(cfg.seed, 4),
        d_model: task.spec.d_model,
        vocab: task.spec.vocab,
        eval_every: (cfg.steps / 10).max(1),
        n_heads: N_HEADS,
    };
    let outcome = train_fusion(&samples, &rec, &tcfg)?;
    print_report("initial (held-out)", &outcome.initial_report);
    print_report("final (held-out)", &outcome.report);

    let ck = Checkpoint::new(&outcome.params, N_HEADS, train_channels, task.spec.clone(), rec, resolved.clone());
    let ck_path = cfg.output_dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    let report_path = cfg.output_dir.join("report.json");
    write_json(
        &report_path,
        &json!({"schema": SCHEMA_VERSION, "config": resolved, "split": "heldout", "report": outcome.report}),
    )?;
    println!("wrote {} and {}", ck_path.display(), report_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{}: no such checkpoint", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_samples(path: &Path) -> Result<Vec<FusionSample>, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{}: no such dataset", path.display())));
    }
    Ok(load_dataset(path)?.0)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn evaluate_cmd(checkpoint: &Path, dataset: &Path, split: EvalSplit, out: Option<PathBuf>) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let params = ck.fusion_params()?;
    let attn = AttentionParams::new(ck.n_heads, ck.d_model)?;
    let mut samples = load_samples(dataset)?;
    if let EvalSplit::Heldout = split {
        samples = split_dataset(&samples).1;
    }
    if samples.is_empty() {
        return Err(Failure::Usage(format!("{}: no samples to evaluate", dataset.display())));
    }
    let report = evaluate(&params, &ck.recognizer, &attn, &samples)?;
    print_report("evaluation", &report);
    let resolved = json!({
        "checkpoint": checkpoint,
        "checkpoint_config": ck.config,
        "train_channels": ck.train_channels,
        "dataset": dataset,
        "split": split,
    });
    let out = out.unwrap_or_else(|| sibling(checkpoint, "eval_report.json"));
    write_json(
        &out,
        &json!({"schema": SCHEMA_VERSION, "config": resolved, "split": split, "report": report}),
    )?;
    stamp(out.parent().unwrap_or(Path::new(".")), "evaluate", &resolved)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct MicWeight {
    channel_id: usize,
    x: f64,
    y: f64,
    snr_db: f64,
    weight: f64,
}

fn dump_weights(checkpoint: &Path, dataset: &Path, sample_id: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let params = ck.fusion_params()?;
    let attn = AttentionParams::new(ck.n_heads, ck.d_model)?;
    let samples = load_samples(dataset)?;
    let sample = samples
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| Failure::Usage(format!("sample id {sample_id} not in {}", dataset.display())))?;
    let (_, traces) = trace(&params, &ck.recognizer, &attn, std::slice::from_ref(sample))?;
    let c = sample.channels();
    let mut avg = vec![0.0; c];
    for t in &traces {
        for (a, &w) in avg.iter_mut().zip(&t.weights) {
            *a += w;
        }
    }
    let n = traces.len().max(1) as f64;
    let mics: Vec<MicWeight> = (0..c)
        .map(|k| MicWeight {
            channel_id: sample.observations[k].channel_id,
            x: sample.scene.mics[k][0],
            y: sample.scene.mics[k][1],
            snr_db: sample.observations[k].snr_db,
            weight: avg[k] / n,
        })
        .collect();
    let per_step: Vec<&[f64]> = traces.iter().map(|t| &t.weights[..]).collect();
    let resolved = json!({
        "checkpoint": checkpoint,
        "checkpoint_config": ck.config,
        "dataset": dataset,
        "sample_id": sample_id,
    });
    let doc = json!({
        "schema": SCHEMA_VERSION,
        "config": resolved,
        "variant": ck.variant,
        "sample_id": sample_id,
        "speaker": {"x": sample.scene.speaker[0], "y": sample.scene.speaker[1]},
        "mics": mics,
        "step_weights": per_step,
        "step_scale": traces.iter().map(|t| t.s_value).collect::<Vec<_>>(),
    });
    let out = out.unwrap_or_else(|| sibling(checkpoint, &format!("weights_sample{sample_id}.json")));
    write_json(&out, &doc)?;
    stamp(out.parent().unwrap_or(Path::new(".")), "dump-weights", &resolved)?;
    let zeros = per_step.iter().map(|w| w.iter().filter(|&&x| x == 0.0).count()).sum::<usize>();
    println!(
        "wrote {} ({c} mics, {} decoding steps, {zeros} exact-zero weights)",
        out.display(),
        traces.len()
    );
    Ok(())
}
