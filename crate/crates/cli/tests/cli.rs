use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adhoc-fusion"));
    c.env_remove("ADHOC_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One small training run shared by the checkpoint tests.
struct Trained {
    _dir: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config = write_config(
            dir.path(),
            "cfg.json",
            &format!(
                r#"{{"seed": 5, "variant": "sparsemax", "steps": 30, "batch_size": 4,
                    "train_samples": 30, "test_samples": 6, "output_dir": "{}"}}"#,
                out.display()
            ),
        );
        let o = run(&["train", "--config", p(&config)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Trained { _dir: dir, out, config }
    })
}

#[test]
fn ops_demo_sparsemax_row() {
    let o = run(&["ops-demo", "--z", "0.5,0.2,-0.1", "--s", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("sparsemax ")).unwrap();
    assert!(line.contains("(0.6333, 0.3333, 0.0333)"), "{line}");
}

#[test]
fn ops_demo_scaled_row() {
    let o = run(&["ops-demo", "--z", "1,0,0", "--s", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("scaling_sparsemax")).unwrap();
    assert!(line.contains("(0.6667, 0.1667, 0.1667)"), "{line}");
}

#[test]
fn ops_demo_bad_scale_is_usage_error() {
    assert_eq!(run(&["ops-demo", "--z", "1,0", "--s", "0.5"]).status.code(), Some(2));
    assert_eq!(run(&["ops-demo", "--z", "1,x"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_reports() {
    let o = run(&["gradcheck", "--verbose", "--points", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for op in ["sparsemax", "scaling_sparsemax", "scaling_factor", "fusion_backward"] {
        assert!(text.contains(op), "missing {op}");
    }
}

#[test]
fn gradcheck_corrupted_backward_exits_one() {
    let o = run(&["gradcheck", "--points", "5", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_is_deterministic_with_half_noise_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"train_samples": 12, "seed": 9, "output_dir": "x"}"#);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let first = bin().current_dir(dir.path()).args(["simulate", "--config", p(&cfg), "--out", p(&a)]).output().unwrap();
    assert!(first.status.success());
    assert!(stdout(&first).contains("per sample: 8 (min 8, max 8)"), "{}", stdout(&first));
    let second = bin().current_dir(dir.path()).args(["simulate", "--config", p(&cfg), "--out", p(&b)]).output().unwrap();
    assert!(second.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let lines = std::fs::read_to_string(&a).unwrap();
    assert_eq!(lines.lines().count(), 12);
    let first_line: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first_line["schema"], 1);
    assert_eq!(first_line["config"]["run"]["seed"], 9);
    assert!(dir.path().join("x/simulate.config.json").exists());
}

#[test]
fn simulate_test_split_has_thirty_channels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"test_samples": 3, "output_dir": "x"}"#);
    let out = dir.path().join("t.jsonl");
    let o = bin()
        .current_dir(dir.path())
        .args(["simulate", "--config", p(&cfg), "--split", "test", "--out", p(&out)])
        .output()
        .unwrap();
    assert!(o.status.success());
    let line: Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(line["sample"]["observations"].as_array().unwrap().len(), 30);
    assert!(stdout(&o).contains("per sample: 15"), "{}", stdout(&o));
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"seed": 1, "learning_rte": 0.1}"#);
    let o = run(&["simulate", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rte"));
}

#[test]
fn missing_config_exits_two() {
    assert_eq!(run(&["train", "--config", "/nonexistent/cfg.json"]).status.code(), Some(2));
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"seed": 1, "train_samples": 3, "output_dir": "x"}"#);
    let gen = |seed: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut c = bin();
        c.current_dir(dir.path()).args(["simulate", "--config", p(&cfg), "--out", p(&out)]);
        if let Some(s) = seed {
            c.env("ADHOC_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(out).unwrap()
    };
    let base = gen(None, "a.jsonl");
    let over = gen(Some("2"), "b.jsonl");
    assert_ne!(base, over);
    let line: Value = serde_json::from_str(over.lines().next().unwrap()).unwrap();
    assert_eq!(line["config"]["run"]["seed"], 2);

    let bad = bin().env("ADHOC_SEED", "abc").args(["simulate", "--config", p(&cfg)]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_report() {
    let t = trained();
    let ck = read_json(&t.out.join("checkpoint.json"));
    assert_eq!(ck["schema"], 1);
    assert_eq!(ck["variant"], "sparsemax");
    assert_eq!(ck["config"]["seed"], 5);
    assert_eq!(ck["params"]["w_c"]["shape"].as_array().unwrap().len(), 2);
    let report = read_json(&t.out.join("report.json"));
    assert_eq!(report["schema"], 1);
    assert_eq!(report["config"]["steps"], 30);
    let r = &report["report"];
    for key in ["task_accuracy", "noise_mass", "selection_agreement"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(t.out.join("train.config.json").exists());
    assert!(t.out.join("train.jsonl").exists());
}

#[test]
fn heldout_evaluation_reproduces_training_report() {
    let t = trained();
    let out = t.out.join("eval_heldout.json");
    let o = run(&[
        "evaluate",
        "--checkpoint",
        p(&t.out.join("checkpoint.json")),
        "--dataset",
        p(&t.out.join("train.jsonl")),
        "--split",
        "heldout",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut a = read_json(&t.out.join("report.json"))["report"].clone();
    let b = read_json(&out)["report"].clone();
    // curves only exist for training runs
    a["loss_curve"] = Value::Array(vec![]);
    a["eval_curve"] = Value::Array(vec![]);
    assert_eq!(a, b);
}

#[test]
fn evaluate_on_thirty_channels() {
    let t = trained();
    let data = t.out.join("test30.jsonl");
    assert!(run(&["simulate", "--config", p(&t.config), "--split", "test", "--out", p(&data)]).status.success());
    let out = t.out.join("eval30.json");
    let o = run(&[
        "evaluate",
        "--checkpoint",
        p(&t.out.join("checkpoint.json")),
        "--dataset",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out);
    assert_eq!(r["report"]["channels"], 30);
    assert_eq!(r["report"]["simplex_violations"], 0);
    assert!(r["config"].is_object());
}

#[test]
fn evaluate_rejects_missing_checkpoint() {
    let t = trained();
    let o = run(&["evaluate", "--checkpoint", "/nonexistent.json", "--dataset", p(&t.out.join("train.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dump_weights_single_channel_is_one() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"test_samples": 2, "quality_profile": "all-clean", "output_dir": "x"}"#);
    let data = dir.path().join("c1.jsonl");
    let o = bin()
        .current_dir(dir.path())
        .args(["simulate", "--config", p(&cfg), "--split", "test", "--channels", "1", "--out", p(&data)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("w.json");
    let o = run(&[
        "dump-weights",
        "--checkpoint",
        p(&t.out.join("checkpoint.json")),
        "--dataset",
        p(&data),
        "--sample-id",
        "0",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let w = read_json(&out);
    let mics = w["mics"].as_array().unwrap();
    assert_eq!(mics.len(), 1);
    assert_eq!(mics[0]["weight"], 1.0);
    assert!(mics[0]["x"].is_number() && mics[0]["y"].is_number());
    assert!(w["config"].is_object());
}

#[test]
fn dump_weights_sparsemax_has_exact_zero() {
    let t = trained();
    let out = t.out.join("w16.json");
    let o = run(&[
        "dump-weights",
        "--checkpoint",
        p(&t.out.join("checkpoint.json")),
        "--dataset",
        p(&t.out.join("train.jsonl")),
        "--sample-id",
        "4",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let w = read_json(&out);
    let zero_steps = w["step_weights"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|step| step.as_array().unwrap().iter().any(|x| x.as_f64() == Some(0.0)))
        .count();
    assert!(zero_steps > 0);
}

#[test]
fn dump_weights_unknown_sample_fails() {
    let t = trained();
    let o = run(&[
        "dump-weights",
        "--checkpoint",
        p(&t.out.join("checkpoint.json")),
        "--dataset",
        p(&t.out.join("train.jsonl")),
        "--sample-id",
        "100000",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
