//! Finite-difference verification of every analytic backward pass.

use serde::{Deserialize, Serialize};

use crate::attention::{scaling_factor, scaling_factor_backward, AttentionParams, FusionStep, FusionStepOutput, StreamFusionParams};
use crate::error::Result;
use crate::recognizer::Recognizer;
use crate::rng::Rng;
use crate::simplex::{
    scaling_sparsemax, scaling_sparsemax_backward, softmax, softmax_backward, sparsemax, sparsemax_backward, Logits,
    Variant,
};
use crate::tensor::{central_finite_diff, dot, norm2, Matrix};
use crate::trainer::teacher_forced_loss;

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
/// Points closer than this to a kink (support boundary, ReLU hinge) are resampled.
pub const BOUNDARY_MARGIN: f64 = 1e-3;
const MAX_DRAWS_PER_POINT: usize = 1000;

/// `||a - n|| / max(||a||, ||n||, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm2(&diff) / norm2(analytic).max(norm2(numeric)).max(1e-8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub operator: String,
    pub points: usize,
    pub max_rel_error: f64,
    /// Relative error of every checked point, in draw order.
    pub point_errors: Vec<f64>,
    pub passed: bool,
    /// Set when the check could not run to completion.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, operator: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.operator == operator)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub points: usize,
    /// Negates every analytic gradient; the suite must then fail.
    pub corrupt: bool,
    /// Uses all-zero fusion parameters.
    pub zero_params: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            points: 100,
            corrupt: false,
            zero_params: false,
        }
    }
}

/// Runs all comparisons with 100 points each.
pub fn grad_check_suite(rng: &mut Rng, corrupt: bool) -> GradCheckReport {
    grad_check_with(
        rng,
        SuiteOptions {
            corrupt,
            ..Default::default()
        },
    )
}

pub fn grad_check_with(rng: &mut Rng, opts: SuiteOptions) -> GradCheckReport {
    let mut entries = Vec::new();
    let mut run = |name: &str, idx: u64, check: &dyn Fn(&mut Rng, SuiteOptions) -> Result<Option<(Vec<f64>, Vec<f64>)>>| {
        let mut local = rng.child(idx);
        let mut worst = 0.0f64;
        let mut error = None;
        let mut point_errors = Vec::with_capacity(opts.points);
        'outer: for _ in 0..opts.points {
            for _ in 0..MAX_DRAWS_PER_POINT {
                match check(&mut local, opts) {
                    Ok(Some((mut analytic, numeric))) => {
                        if opts.corrupt {
                            analytic.iter_mut().for_each(|a| *a = -*a);
                        }
                        let e = relative_error(&analytic, &numeric);
                        worst = worst.max(e);
                        point_errors.push(e);
                        continue 'outer;
                    }
                    Ok(None) => {}
                    Err(e) => {
                        error = Some(e.to_string());
                        break 'outer;
                    }
                }
            }
            error = Some(format!("no non-boundary point after {MAX_DRAWS_PER_POINT} draws"));
            break;
        }
        entries.push(GradCheckEntry {
            operator: name.to_string(),
            points: point_errors.len(),
            max_rel_error: worst,
            point_errors,
            passed: error.is_none() && worst.is_finite() && worst < GRAD_TOLERANCE,
            error,
        });
    };
    run("softmax", 0, &check_softmax);
    run("sparsemax", 1, &check_sparsemax);
    run("scaling_sparsemax", 2, &check_scaling_sparsemax);
    run("scaling_factor", 3, &check_scaling_factor);
    run("fusion_backward/softmax", 4, &|r, o| check_fusion(r, o, Variant::Softmax));
    run("fusion_backward/sparsemax", 5, &|r, o| check_fusion(r, o, Variant::Sparsemax));
    run("fusion_backward/scaling_sparsemax", 6, &|r, o| {
        check_fusion(r, o, Variant::ScalingSparsemax)
    });
    run("training_loss", 7, &check_training_loss);
    GradCheckReport {
        tolerance: GRAD_TOLERANCE,
        entries,
    }
}

type Point = Result<Option<(Vec<f64>, Vec<f64>)>>;

fn random_logits(rng: &mut Rng, lo: f64, hi: f64) -> Vec<f64> {
    let k = 2 + rng.below(15);
    rng.uniform_vec(k, lo, hi)
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn near_support_boundary(z: &[f64], tau: f64) -> bool {
    z.iter().any(|&v| (v - tau).abs() <= BOUNDARY_MARGIN)
}

fn check_softmax(rng: &mut Rng, _: SuiteOptions) -> Point {
    let z = random_logits(rng, -5.0, 5.0);
    let u = normal_vec(rng, z.len());
    let p = softmax(&Logits::from_slice(&z)?);
    let analytic = softmax_backward(p.weights(), &u)?;
    let numeric = central_finite_diff(
        |x: &[f64]| dot(&u, softmax(&Logits::from_slice(x).expect("finite")).weights()),
        &z,
        FD_STEP,
    )?;
    Ok(Some((analytic, numeric)))
}

fn check_sparsemax(rng: &mut Rng, _: SuiteOptions) -> Point {
    let z = random_logits(rng, -2.0, 2.0);
    let logits = Logits::from_slice(&z)?;
    let p = sparsemax(&logits);
    if near_support_boundary(&z, p.tau().expect("sparsemax has a threshold")) {
        return Ok(None);
    }
    let u = normal_vec(rng, z.len());
    let analytic = sparsemax_backward(&logits, &p, &u)?;
    let numeric = central_finite_diff(
        |x: &[f64]| dot(&u, sparsemax(&Logits::from_slice(x).expect("finite")).weights()),
        &z,
        FD_STEP,
    )?;
    Ok(Some((analytic, numeric)))
}

fn check_scaling_sparsemax(rng: &mut Rng, _: SuiteOptions) -> Point {
    let z = random_logits(rng, -4.0, 4.0);
    let s = rng.uniform(1.0 + BOUNDARY_MARGIN, 10.0);
    let logits = Logits::from_slice(&z)?;
    let p = scaling_sparsemax(&logits, s)?;
    if near_support_boundary(&z, p.tau().expect("threshold")) {
        return Ok(None);
    }
    let u = normal_vec(rng, z.len());
    let (mut analytic, gs) = scaling_sparsemax_backward(&logits, s, &p, &u)?;
    analytic.push(gs);
    let mut x0 = z.clone();
    x0.push(s);
    let numeric = central_finite_diff(
        |x: &[f64]| {
            let (zs, s) = x.split_at(x.len() - 1);
            let p = scaling_sparsemax(&Logits::from_slice(zs).expect("finite"), s[0]).expect("s >= 1");
            dot(&u, p.weights())
        },
        &x0,
        FD_STEP,
    )?;
    Ok(Some((analytic, numeric)))
}

fn check_scaling_factor(rng: &mut Rng, _: SuiteOptions) -> Point {
    let z = random_logits(rng, -3.0, 3.0);
    let c = z.len();
    let mut params = StreamFusionParams::zeros(2, 2, Variant::ScalingSparsemax);
    params.scaling_w = [rng.uniform(-1.0, 1.0), rng.uniform(-0.2, 0.2)];
    params.scaling_b = rng.uniform(-1.0, 1.0);
    let logits = Logits::from_slice(&z)?;
    let pre = scaling_factor(&logits, c, &params)? - 1.0;
    // s = 1 + max(pre, 0): only the active side has a non-trivial gradient.
    if pre <= BOUNDARY_MARGIN {
        return Ok(None);
    }
    let ds = rng.normal();
    let (mut analytic, dw, db) = scaling_factor_backward(&logits, c, &params, ds);
    analytic.extend([dw[0], dw[1], db]);
    let mut x0 = z.clone();
    x0.extend([params.scaling_w[0], params.scaling_w[1], params.scaling_b]);
    let numeric = central_finite_diff(
        |x: &[f64]| {
            let mut p = params.clone();
            p.scaling_w = [x[c], x[c + 1]];
            p.scaling_b = x[c + 2];
            ds * scaling_factor(&Logits::from_slice(&x[..c]).expect("finite"), c, &p).expect("C matches")
        },
        &x0,
        FD_STEP,
    )?;
    Ok(Some((analytic, numeric)))
}

const GC_D: usize = 4;
const GC_V: usize = 3;
const GC_HEADS: usize = 2;
const GC_FRAMES: usize = 3;

fn random_params(rng: &mut Rng, variant: Variant, zero: bool) -> StreamFusionParams {
    let mut p = StreamFusionParams::zeros(GC_D, GC_V, variant);
    if zero {
        return p;
    }
    let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.uniform(-0.9, 0.9)).collect();
    p.assign_flat(&flat).expect("length matches");
    p
}

/// Distance of a fusion step from its non-differentiable points.
fn kink_distance(out: &FusionStepOutput, params: &StreamFusionParams) -> f64 {
    let mut dist = f64::INFINITY;
    if let Some(tau) = out.channel_weights.tau() {
        for &v in out.scores.values() {
            dist = dist.min((v - tau).abs());
        }
    }
    if params.variant == Variant::ScalingSparsemax {
        let c = out.scores.dim() as f64;
        let pre = params.scaling_w[0] * out.scores.norm() + params.scaling_w[1] * c + params.scaling_b;
        dist = dist.min(pre.abs());
    }
    dist
}

struct FusionInputs {
    y_hist: Matrix,
    contexts: Matrix,
    encodings: Vec<Matrix>,
}

fn one_hot(rng: &mut Rng, rows: usize) -> Matrix {
    let tokens: Vec<usize> = (0..rows).map(|_| rng.below(GC_V)).collect();
    Matrix::from_fn(rows, GC_V, |i, j| if tokens[i] == j { 1.0 } else { 0.0 })
}

fn random_inputs(rng: &mut Rng) -> FusionInputs {
    let c = 1 + rng.below(4);
    let history = rng.below(3);
    FusionInputs {
        y_hist: one_hot(rng, history),
        contexts: rng.normal_matrix(c, GC_D),
        encodings: (0..c).map(|_| rng.normal_matrix(GC_FRAMES, GC_D)).collect(),
    }
}

fn check_fusion(rng: &mut Rng, opts: SuiteOptions, variant: Variant) -> Point {
    let params = random_params(rng, variant, opts.zero_params);
    let attn = AttentionParams::new(GC_HEADS, GC_D)?;
    let inp = random_inputs(rng);
    let u = normal_vec(rng, GC_D);
    let mut step = FusionStep::new(&params, &attn);
    let out = step.forward(&inp.y_hist, &inp.contexts, &inp.encodings)?;
    if !opts.zero_params && kink_distance(&out, &params) <= BOUNDARY_MARGIN {
        return Ok(None);
    }
    let mut grads = params.zeros_like();
    let input_grads = step.backward(&u, &mut grads)?;

    // Parameters, then contexts, encodings and history rows.
    let n_params = params.num_params();
    let mut analytic = grads.flatten();
    analytic.extend_from_slice(input_grads.d_contexts.data());
    for d in &input_grads.d_encodings {
        analytic.extend_from_slice(d.data());
    }
    analytic.extend_from_slice(input_grads.d_y_hist.data());
    let mut x0 = params.flatten();
    x0.extend_from_slice(inp.contexts.data());
    for h in &inp.encodings {
        x0.extend_from_slice(h.data());
    }
    x0.extend_from_slice(inp.y_hist.data());

    let c = inp.contexts.rows();
    let numeric = central_finite_diff(
        |x: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(&x[..n_params]).expect("length matches");
            let mut off = n_params;
            let mut take = |rows: usize, cols: usize| {
                let m = Matrix::new(rows, cols, x[off..off + rows * cols].to_vec()).expect("shape");
                off += rows * cols;
                m
            };
            let contexts = take(c, GC_D);
            let encodings: Vec<Matrix> = (0..c).map(|_| take(GC_FRAMES, GC_D)).collect();
            let y_hist = take(inp.y_hist.rows(), GC_V);
            let mut s = FusionStep::new(&p, &attn);
            let out = s.forward(&y_hist, &contexts, &encodings).expect("finite forward");
            dot(&u, &out.r)
        },
        &x0,
        FD_STEP,
    )?;
    Ok(Some((analytic, numeric)))
}

/// Whole-utterance teacher-forced loss through the cached training path.
fn check_training_loss(rng: &mut Rng, opts: SuiteOptions) -> Point {
    let variant = Variant::ALL[rng.below(3)];
    let params = random_params(rng, variant, opts.zero_params);
    let attn = AttentionParams::new(GC_HEADS, GC_D)?;
    let rec = Recognizer {
        w_enc: Matrix::zeros(GC_D, GC_D),
        b_enc: vec![0.0; GC_D],
        w_out: rng.normal_matrix(GC_D, GC_V),
        b_out: normal_vec(rng, GC_V),
        frames: GC_FRAMES,
    };
    let c = 1 + rng.below(4);
    let encodings: Vec<Matrix> = (0..c).map(|_| rng.normal_matrix(GC_FRAMES, GC_D)).collect();
    let contexts: Vec<Matrix> = (0..GC_FRAMES).map(|_| rng.normal_matrix(c, GC_D)).collect();
    let tokens: Vec<usize> = (0..GC_FRAMES).map(|_| rng.below(GC_V)).collect();

    if !opts.zero_params {
        for l in 0..GC_FRAMES {
            let y_hist = Matrix::from_fn(l, GC_V, |i, j| if tokens[i] == j { 1.0 } else { 0.0 });
            let mut step = FusionStep::new(&params, &attn);
            let out = step.forward(&y_hist, &contexts[l], &encodings)?;
            if kink_distance(&out, &params) <= BOUNDARY_MARGIN {
                return Ok(None);
            }
        }
    }
    let (_, grads) = teacher_forced_loss(&params, &attn, &rec, &encodings, &contexts, &tokens, true)?;
    let analytic = grads.expect("requested").flatten();
    let numeric = central_finite_diff(
        |x: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(x).expect("length matches");
            teacher_forced_loss(&p, &attn, &rec, &encodings, &contexts, &tokens, false)
                .expect("finite forward")
                .0
        },
        &params.flatten(),
        FD_STEP,
    )?;
    Ok(Some((analytic, numeric)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn small_suite_passes() {
        let report = grad_check_with(
            &mut Rng::new(3),
            SuiteOptions {
                points: 5,
                ..Default::default()
            },
        );
        for e in &report.entries {
            assert!(e.passed, "{e:?}");
            assert_eq!(e.points, 5);
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let report = grad_check_with(
            &mut Rng::new(3),
            SuiteOptions {
                points: 3,
                corrupt: true,
                ..Default::default()
            },
        );
        assert!(!report.all_passed());
        assert!(report.entries.iter().all(|e| !e.passed));
    }

    #[test]
    fn zero_parameters_pass() {
        let report = grad_check_with(
            &mut Rng::new(4),
            SuiteOptions {
                points: 3,
                zero_params: true,
                ..Default::default()
            },
        );
        for name in ["fusion_backward/softmax", "fusion_backward/scaling_sparsemax", "training_loss"] {
            assert!(report.entry(name).unwrap().passed, "{name}");
        }
    }
}
