//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! stderr (bypassing the harness capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use sparsemax_fusion::gradcheck::grad_check_suite;
use sparsemax_fusion::recognizer::{pretrain_single_channel, PretrainConfig, Recognizer};
use sparsemax_fusion::rng::mix_seed;
use sparsemax_fusion::sim::{make_clean_utterances, make_dataset, QualityProfile, Task, TaskSpec};
use sparsemax_fusion::trainer::{evaluate, train_fusion, Report, TrainConfig, TrainOutcome};
use sparsemax_fusion::{
    project_simplex_oracle, scaling_sparsemax, softmax, sparsemax, Logits, Rng, SimplexWeights, Variant,
};

const SEED: u64 = 7;
const TRAIN_SCENES: usize = 2000;
const TEST_SCENES: usize = 200;
const STEPS: usize = 3000;

fn verdict(name: &str, ok: bool, detail: String) {
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
}

fn random_logits(rng: &mut Rng) -> Vec<f64> {
    let k = 2 + rng.below(63);
    rng.uniform_vec(k, -10.0, 10.0)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn oracle_equivalence() {
    let mut rng = Rng::new(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let z = Logits::new(random_logits(&mut rng)).unwrap();
        let oracle = project_simplex_oracle(&z, 1.0, 1e-13).unwrap();
        worst = worst.max(max_abs_diff(sparsemax(&z).weights(), oracle.weights()));
    }
    let took = start.elapsed();
    verdict(
        "oracle equivalence",
        worst < 1e-9 && took < Duration::from_secs(5),
        format!("max |sparsemax - oracle| = {worst:.2e} over 10^4 vectors in {took:.2?}"),
    );
}

#[test]
fn scaling_identities() {
    let mut rng = Rng::new(2);
    let (mut at_one, mut rescaled) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let raw = random_logits(&mut rng);
        let s = rng.uniform(1.0, 100.0);
        let z = Logits::new(raw.clone()).unwrap();
        at_one = at_one.max(max_abs_diff(scaling_sparsemax(&z, 1.0).unwrap().weights(), sparsemax(&z).weights()));
        let zs = Logits::new(raw.iter().map(|x| x / s).collect()).unwrap();
        rescaled = rescaled.max(max_abs_diff(scaling_sparsemax(&z, s).unwrap().weights(), sparsemax(&zs).weights()));
    }
    verdict(
        "scaling identities",
        at_one < 1e-12 && rescaled < 1e-12,
        format!("s=1 vs sparsemax {at_one:.2e}, scaled vs sparsemax(z/s) {rescaled:.2e} over 10^3 cases"),
    );
}

#[test]
fn simplex_invariants() {
    let mut rng = Rng::new(3);
    let mut worst_sum = 0.0f64;
    let mut negatives = 0usize;
    let mut check = |p: &SimplexWeights| {
        worst_sum = worst_sum.max((p.weights().iter().sum::<f64>() - 1.0).abs());
        negatives += p.weights().iter().filter(|&&w| w < 0.0).count();
    };
    for i in 0..10_000 {
        let raw = match i % 4 {
            0 => vec![rng.uniform(-10.0, 10.0)],
            1 => {
                let pool = rng.uniform_vec::<f64>(3, -10.0, 10.0);
                (0..2 + rng.below(30)).map(|_| pool[rng.below(3)]).collect()
            }
            _ => random_logits(&mut rng),
        };
        let z = Logits::new(raw).unwrap();
        check(&softmax(&z));
        check(&sparsemax(&z));
        check(&scaling_sparsemax(&z, rng.uniform(1.0, 100.0)).unwrap());
    }
    verdict(
        "simplex invariants",
        worst_sum < 1e-12 && negatives == 0,
        format!("max |sum - 1| = {worst_sum:.2e}, negative entries {negatives}, 3 x 10^4 outputs incl. K=1 and ties"),
    );
}

#[test]
fn support_monotonicity_and_uniform_limit() {
    let mut rng = Rng::new(4);
    let mut violations = 0;
    let mut worst_dev = 0.0f64;
    let mut over = 0;
    for _ in 0..1000 {
        let z = Logits::new(random_logits(&mut rng)).unwrap();
        let sizes: Vec<usize> = [1.0, 2.0, 5.0, 10.0, 100.0]
            .iter()
            .map(|&s| scaling_sparsemax(&z, s).unwrap().support().len())
            .collect();
        violations += sizes.windows(2).filter(|w| w[1] < w[0]).count();
        let p = scaling_sparsemax(&z, 1e6).unwrap();
        let k = p.dim() as f64;
        let dev = p.weights().iter().map(|w| (w - 1.0 / k).abs()).fold(0.0, f64::max);
        over += usize::from(dev >= 1e-5);
        worst_dev = worst_dev.max(dev);
    }
    verdict(
        "support monotonicity",
        violations == 0 && worst_dev < 1e-5,
        format!(
            "support decreases {violations} times; at s=1e6 max |p - 1/K| is {worst_dev:.3e}, {over} of 10^3 vectors at or above 1e-5"
        ),
    );
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let report = grad_check_suite(&mut Rng::new(5), false);
    let took = start.elapsed();
    let worst = report.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = report.entries.iter().filter(|e| !e.passed).map(|e| e.operator.as_str()).collect();
    let ops = ["sparsemax", "scaling_sparsemax", "scaling_factor", "fusion_backward/scaling_sparsemax"];
    let covered = ops.iter().all(|op| report.entry(op).is_some_and(|e| e.points >= 100));
    verdict(
        "gradient suite",
        report.all_passed() && covered && took < Duration::from_secs(30),
        format!(
            "{} operators, max relative error {worst:.2e}, failing {failed:?}, {took:.2?}",
            report.entries.len()
        ),
    );
}

struct Run {
    outcome: TrainOutcome,
    thirty: Report,
}

struct Experiment {
    runs: Vec<(Variant, Run)>,
    elapsed: Duration,
}

impl Experiment {
    fn get(&self, v: Variant) -> &Run {
        &self.runs.iter().find(|(x, _)| *x == v).unwrap().1
    }
}

fn recognizer(task: &Task) -> Recognizer {
    let root = Rng::new(SEED);
    let train = make_clean_utterances(2000, task, &root.child(1));
    let heldout = make_clean_utterances(400, task, &root.child(2));
    let cfg = PretrainConfig {
        seed: mix_seed(SEED, 3),
        ..Default::default()
    };
    pretrain_single_channel(&task.spec, &train, &heldout, &cfg).unwrap().recognizer
}

/// 16-channel half-noise training of all three variants, plus a 30-channel test set.
fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let task = Task::new(TaskSpec::default()).unwrap();
        let root = Rng::new(SEED);
        let train = make_dataset(TRAIN_SCENES, 16, &QualityProfile::HalfNoise, &task, &root.child(10)).unwrap();
        let test30 = make_dataset(TEST_SCENES, 30, &QualityProfile::HalfNoise, &task, &root.child(11)).unwrap();
        let rec = recognizer(&task);
        let runs = Variant::ALL
            .iter()
            .map(|&variant| {
                let cfg = TrainConfig {
                    variant,
                    steps: STEPS,
                    seed: mix_seed(SEED, 4),
                    ..Default::default()
                };
                let outcome = train_fusion(&train, &rec, &cfg).unwrap();
                let thirty = evaluate(&outcome.params, &rec, &cfg.attention().unwrap(), &test30).unwrap();
                let r = &outcome.report;
                let _ = std::io::stderr().write_all(
                    format!(
                        "     {variant}: accuracy {:.4} noise_mass {:.4} (<1% on {:.3}) zero steps {:.3} support {:.2} s {:.2}; C=30 noise_mass {:.4} (<2% on {:.3})\n",
                        r.task_accuracy,
                        r.noise_mass,
                        r.noise_mass_below_1pct,
                        r.zero_weight_steps,
                        r.mean_support,
                        r.mean_scale,
                        thirty.noise_mass,
                        thirty.noise_mass_below_2pct
                    )
                    .as_bytes(),
                );
                (variant, Run { outcome, thirty })
            })
            .collect();
        Experiment {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn synthetic_channel_selection() {
    let e = experiment();
    let soft = &e.get(Variant::Softmax).outcome.report;
    let scal = &e.get(Variant::ScalingSparsemax).outcome.report;
    let ok = scal.noise_mass_below_1pct >= 0.90
        && soft.noise_mass > scal.noise_mass
        && scal.task_accuracy >= soft.task_accuracy
        && e.elapsed < Duration::from_secs(600);
    verdict(
        "synthetic channel selection",
        ok,
        format!(
            "scaling noise_mass < 0.01 on {:.1}% of steps (need 90%); noise_mass softmax {:.4} vs scaling {:.4}; accuracy softmax {:.4} vs scaling {:.4}; {} steps x 3 variants in {:.1?}",
            100.0 * scal.noise_mass_below_1pct,
            soft.noise_mass,
            scal.noise_mass,
            soft.task_accuracy,
            scal.task_accuracy,
            STEPS,
            e.elapsed
        ),
    );
}

#[test]
fn mismatched_channel_count() {
    let r = &experiment().get(Variant::ScalingSparsemax).thirty;
    verdict(
        "mismatched channel count",
        r.channels == 30 && r.simplex_violations == 0 && r.noise_mass_below_2pct >= 0.85,
        format!(
            "C={} simplex violations {}; noise_mass < 0.02 on {:.1}% of {} steps (need 85%)",
            r.channels,
            r.simplex_violations,
            100.0 * r.noise_mass_below_2pct,
            r.decoding_steps
        ),
    );
}

#[test]
fn sparsity_existence() {
    let e = experiment();
    let zero = |v| e.get(v).outcome.report.zero_weight_steps;
    verdict(
        "sparsity existence",
        zero(Variant::Sparsemax) >= 0.99 && zero(Variant::ScalingSparsemax) >= 0.99 && zero(Variant::Softmax) == 0.0,
        format!(
            "steps with an exact zero: sparsemax {:.2}%, scaling {:.2}%, softmax {:.2}%",
            100.0 * zero(Variant::Sparsemax),
            100.0 * zero(Variant::ScalingSparsemax),
            100.0 * zero(Variant::Softmax)
        ),
    );
}

#[test]
fn training_improves_heldout_loss() {
    let e = experiment();
    let detail: Vec<String> = e
        .runs
        .iter()
        .map(|(v, r)| format!("{v} {:.3} -> {:.3}", r.outcome.initial_report.heldout_loss, r.outcome.report.heldout_loss))
        .collect();
    let ok = e.runs.iter().all(|(_, r)| r.outcome.report.heldout_loss < r.outcome.initial_report.heldout_loss);
    verdict("held-out loss decreases", ok, detail.join(", "));
}

#[test]
fn scaling_training_lowers_noise_mass() {
    let o = &experiment().get(Variant::ScalingSparsemax).outcome;
    verdict(
        "scaling noise_mass decreases",
        o.report.noise_mass < o.initial_report.noise_mass,
        format!("{:.4} at initialization -> {:.4} after training", o.initial_report.noise_mass, o.report.noise_mass),
    );
}
