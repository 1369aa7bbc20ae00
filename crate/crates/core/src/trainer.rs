//! Second-stage training of the fusion layer and channel-selection metrics.
//!
//! The recognizer from [`crate::recognizer`] is frozen; only
//! [`StreamFusionParams`] are updated, by SGD with momentum 0.9 and global
//! gradient-norm clipping. The fused vector `r_l` is decoded by the frozen
//! output layer. Training uses teacher forcing for the guide-vector history;
//! evaluation feeds back its own greedy predictions.

use serde::{Deserialize, Serialize};

use crate::attention::{fold_projection_grads, AttentionParams, CachedStep, ChannelCache, StreamFusionParams};
use crate::error::{shape_err, Error, Result};
use crate::recognizer::Recognizer;
use crate::rng::Rng;
use crate::sim::{argmax, FusionSample, NOISE_CHANNEL_DB};
use crate::simplex::Variant;
use crate::tensor::Matrix;

pub const MOMENTUM: f64 = 0.9;
pub const CLIP_NORM: f64 = 5.0;
/// Probability floor inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Stage-2 settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub d_model: usize,
    pub vocab: usize,
    /// Held-out loss is recorded every `eval_every` steps.
    pub eval_every: usize,
    /// Heads of the guide and context-refinement attentions.
    pub n_heads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ScalingSparsemax,
            learning_rate: 0.003,
            steps: 3000,
            batch_size: 16,
            seed: 7,
            d_model: 32,
            vocab: 6,
            eval_every: 300,
            n_heads: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("steps, batch_size and eval_every must be >= 1".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn attention(&self) -> Result<AttentionParams> {
        AttentionParams::new(self.n_heads, self.d_model)
    }
}

/// Evaluation metrics over a set of utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: Variant,
    pub channels: usize,
    pub samples: usize,
    /// Number of decoding steps evaluated.
    pub decoding_steps: usize,
    pub task_accuracy: f64,
    /// Mean total weight on channels at or below -10 dB.
    pub noise_mass: f64,
    pub mean_support: f64,
    /// Fraction of steps whose highest-weight channel is among the three best by SNR.
    pub selection_agreement: f64,
    pub mean_scale: f64,
    pub heldout_loss: f64,
    /// Fraction of steps with noise mass below 0.01.
    pub noise_mass_below_1pct: f64,
    /// Fraction of steps with noise mass below 0.02.
    pub noise_mass_below_2pct: f64,
    /// Fraction of steps with at least one channel weight exactly zero.
    pub zero_weight_steps: f64,
    /// Steps whose channel weights left the simplex (sum off by > 1e-12 or a negative entry).
    pub simplex_violations: usize,
    pub loss_curve: Vec<(usize, f64)>,
    /// Held-out metrics at each point of `loss_curve`.
    pub eval_curve: Vec<CurvePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub heldout_loss: f64,
    pub task_accuracy: f64,
    pub noise_mass: f64,
    pub zero_weight_steps: f64,
    pub mean_scale: f64,
}

impl CurvePoint {
    fn at(step: usize, r: &Report) -> Self {
        Self {
            step,
            heldout_loss: r.heldout_loss,
            task_accuracy: r.task_accuracy,
            noise_mass: r.noise_mass,
            zero_weight_steps: r.zero_weight_steps,
            mean_scale: r.mean_scale,
        }
    }
}

/// Per-step record from an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub sample_id: usize,
    pub step: usize,
    pub weights: Vec<f64>,
    pub s_value: f64,
    pub predicted: usize,
    pub target: usize,
    pub noise_mass: f64,
}

/// `-sum_l log(max(p_l[target_l], 1e-12)) / L`.
pub fn cross_entropy_loss(y_pred: &Matrix, targets: &[usize]) -> Result<f64> {
    if y_pred.rows() != targets.len() || targets.is_empty() {
        return Err(shape_err(
            "cross_entropy_loss",
            format!("{} non-empty target rows", y_pred.rows()),
            format!("{}", targets.len()),
        ));
    }
    let mut total = 0.0;
    for (l, &t) in targets.iter().enumerate() {
        if t >= y_pred.cols() {
            return Err(Error::InvalidArgument(format!("target {t} outside vocabulary")));
        }
        total -= y_pred.get(l, t).max(PROB_FLOOR).ln();
    }
    Ok(total / targets.len() as f64)
}

/// Frozen encoder outputs of one utterance.
struct Prepared {
    id: usize,
    tokens: Vec<usize>,
    snr: Vec<f64>,
    encodings: Vec<Matrix>,
    /// Per decoding step, `C x D` decoder contexts.
    contexts: Vec<Matrix>,
}

fn prepare(sample: &FusionSample, rec: &Recognizer) -> Result<Prepared> {
    let c = sample.channels();
    if c == 0 {
        return Err(Error::InvalidArgument(format!("sample {} has no channels", sample.id)));
    }
    let mut encodings = Vec::with_capacity(c);
    let mut per_channel = Vec::with_capacity(c);
    for obs in &sample.observations {
        let (h, ctx) = rec.encode(&obs.h)?;
        encodings.push(h);
        per_channel.push(ctx);
    }
    let steps = sample.target_tokens.len();
    if steps > rec.frames {
        return Err(shape_err(
            "prepare",
            format!("at most {} target tokens", rec.frames),
            format!("{steps}"),
        ));
    }
    let d = rec.d_model();
    let contexts = (0..steps)
        .map(|l| Matrix::from_fn(c, d, |k, j| per_channel[k].get(l, j)))
        .collect();
    Ok(Prepared {
        id: sample.id,
        tokens: sample.target_tokens.clone(),
        snr: sample.observations.iter().map(|o| o.snr_db).collect(),
        encodings,
        contexts,
    })
}

fn one_hot_rows(tokens: &[usize], vocab: usize) -> Matrix {
    Matrix::from_fn(tokens.len(), vocab, |i, j| if tokens[i] == j { 1.0 } else { 0.0 })
}

struct SampleOutcome {
    loss: f64,
    traces: Vec<StepTrace>,
}

/// Runs one utterance. The guide history is the reference tokens when
/// `teacher_forcing`, otherwise the greedy predictions. With `grads`,
/// accumulates `scale * d loss / d params`.
fn run_sample(
    params: &StreamFusionParams,
    attn: &AttentionParams,
    rec: &Recognizer,
    sample: &Prepared,
    teacher_forcing: bool,
    mut grads: Option<(&mut StreamFusionParams, f64)>,
) -> Result<SampleOutcome> {
    let caches = sample
        .encodings
        .iter()
        .map(|h| ChannelCache::new(h, params))
        .collect::<Result<Vec<_>>>()?;
    let c = sample.encodings.len();
    let d = params.d_model();
    let vocab = params.vocab();
    let mut d_k: Vec<Matrix> = Vec::new();
    let mut d_v: Vec<Matrix> = Vec::new();
    if grads.is_some() {
        d_k = sample.encodings.iter().map(|h| Matrix::zeros(h.rows(), d)).collect();
        d_v = d_k.clone();
    }
    let noisy: Vec<bool> = sample.snr.iter().map(|&s| s <= NOISE_CHANNEL_DB).collect();
    let mut history: Vec<usize> = Vec::with_capacity(sample.tokens.len());
    let mut loss = 0.0;
    let mut traces = Vec::with_capacity(sample.tokens.len());
    for (l, &target) in sample.tokens.iter().enumerate() {
        let y_hist = one_hot_rows(&history, vocab);
        let step = CachedStep::forward(&y_hist, &sample.contexts[l], &caches, params, attn)?;
        let out = step.output();
        let probs = rec.probabilities(&out.r);
        loss -= probs[target].max(PROB_FLOOR).ln();
        let predicted = argmax(&probs);
        let w = out.channel_weights.weights();
        let noise_mass = (0..c).filter(|&k| noisy[k]).map(|k| w[k]).sum();
        traces.push(StepTrace {
            sample_id: sample.id,
            step: l,
            weights: w.to_vec(),
            s_value: out.s_value,
            predicted,
            target,
            noise_mass,
        });
        if let Some((g, scale)) = grads.as_mut() {
            let d_logits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(j, &p)| *scale * (p - if j == target { 1.0 } else { 0.0 }))
                .collect();
            let d_r: Vec<f64> = (0..d)
                .map(|i| crate::tensor::dot(rec.w_out.row(i), &d_logits))
                .collect();
            step.backward(params, attn, &d_r, g, &mut d_k, &mut d_v)?;
        }
        history.push(if teacher_forcing { target } else { predicted });
    }
    if let Some((g, _)) = grads {
        fold_projection_grads(&sample.encodings, &d_k, &d_v, g)?;
    }
    Ok(SampleOutcome { loss, traces })
}

/// Teacher-forced summed loss of one utterance and, if `with_grad`, its
/// gradient, through the cached training path.
pub(crate) fn teacher_forced_loss(
    params: &StreamFusionParams,
    attn: &AttentionParams,
    rec: &Recognizer,
    encodings: &[Matrix],
    contexts: &[Matrix],
    tokens: &[usize],
    with_grad: bool,
) -> Result<(f64, Option<StreamFusionParams>)> {
    let sample = Prepared {
        id: 0,
        tokens: tokens.to_vec(),
        snr: vec![0.0; encodings.len()],
        encodings: encodings.to_vec(),
        contexts: contexts.to_vec(),
    };
    if with_grad {
        let mut g = params.zeros_like();
        let out = run_sample(params, attn, rec, &sample, true, Some((&mut g, 1.0)))?;
        Ok((out.loss, Some(g)))
    } else {
        Ok((run_sample(params, attn, rec, &sample, true, None)?.loss, None))
    }
}

fn check_compat(params: &StreamFusionParams, rec: &Recognizer, attn: &AttentionParams) -> Result<()> {
    params.validate()?;
    if params.d_model() != rec.d_model() || params.vocab() != rec.vocab() || attn.d_model() != rec.d_model() {
        return Err(shape_err(
            "fusion/recognizer",
            format!("d_model {} vocab {}", rec.d_model(), rec.vocab()),
            format!("d_model {} vocab {}", params.d_model(), params.vocab()),
        ));
    }
    Ok(())
}

fn summarize(variant: Variant, traces: &[StepTrace], loss: f64, samples: usize) -> Report {
    let n = traces.len().max(1) as f64;
    let channels = traces.first().map_or(0, |t| t.weights.len());
    let frac = |pred: &dyn Fn(&StepTrace) -> bool| traces.iter().filter(|t| pred(t)).count() as f64 / n;
    Report {
        variant,
        channels,
        samples,
        decoding_steps: traces.len(),
        task_accuracy: frac(&|t| t.predicted == t.target),
        noise_mass: traces.iter().map(|t| t.noise_mass).sum::<f64>() / n,
        mean_support: traces
            .iter()
            .map(|t| t.weights.iter().filter(|&&w| w > 0.0).count() as f64)
            .sum::<f64>()
            / n,
        selection_agreement: 0.0,
        mean_scale: traces.iter().map(|t| t.s_value).sum::<f64>() / n,
        heldout_loss: loss,
        noise_mass_below_1pct: frac(&|t| t.noise_mass < 0.01),
        noise_mass_below_2pct: frac(&|t| t.noise_mass < 0.02),
        zero_weight_steps: frac(&|t| t.weights.contains(&0.0)),
        simplex_violations: traces.iter().filter(|t| !on_simplex(&t.weights)).count(),
        loss_curve: Vec::new(),
        eval_curve: Vec::new(),
    }
}

/// Non-negative entries summing to one within 1e-12.
pub fn on_simplex(w: &[f64]) -> bool {
    w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

fn top3_by_snr(snr: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..snr.len()).collect();
    order.sort_by(|&a, &b| snr[b].total_cmp(&snr[a]).then(a.cmp(&b)));
    order.truncate(3);
    order
}

fn evaluate_prepared(
    params: &StreamFusionParams,
    attn: &AttentionParams,
    rec: &Recognizer,
    data: &[Prepared],
) -> Result<(Report, Vec<StepTrace>)> {
    let mut traces = Vec::new();
    let mut loss = 0.0;
    let mut agree = 0usize;
    for sample in data {
        let out = run_sample(params, attn, rec, sample, false, None)?;
        loss += out.loss;
        let top = top3_by_snr(&sample.snr);
        agree += out
            .traces
            .iter()
            .filter(|t| top.contains(&argmax(&t.weights)))
            .count();
        traces.extend(out.traces);
    }
    let n_tokens = traces.len().max(1) as f64;
    let mut report = summarize(params.variant, &traces, loss / n_tokens, data.len());
    report.selection_agreement = agree as f64 / n_tokens;
    Ok((report, traces))
}

/// Per-step traces of a greedy evaluation pass.
pub fn trace(
    params: &StreamFusionParams,
    rec: &Recognizer,
    attn: &AttentionParams,
    dataset: &[FusionSample],
) -> Result<(Report, Vec<StepTrace>)> {
    check_compat(params, rec, attn)?;
    let prepared = dataset.iter().map(|s| prepare(s, rec)).collect::<Result<Vec<_>>>()?;
    evaluate_prepared(params, attn, rec, &prepared)
}

/// Computes a [`Report`] without touching `params`. Works for any channel count.
pub fn evaluate(
    params: &StreamFusionParams,
    rec: &Recognizer,
    attn: &AttentionParams,
    dataset: &[FusionSample],
) -> Result<Report> {
    trace(params, rec, attn, dataset).map(|(r, _)| r)
}

/// Fixed split: index `i % 5 == 4` is held out.
pub fn is_heldout(index: usize) -> bool {
    index % 5 == 4
}

pub fn split_dataset(dataset: &[FusionSample]) -> (Vec<FusionSample>, Vec<FusionSample>) {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        if is_heldout(i) {
            heldout.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, heldout)
}

/// Result of [`train_fusion`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: StreamFusionParams,
    /// Held-out report of the final parameters, with the loss curve.
    pub report: Report,
    /// Held-out report at initialization.
    pub initial_report: Report,
}

/// Trains the fusion layer on the non-held-out part of `dataset`.
pub fn train_fusion(dataset: &[FusionSample], rec: &Recognizer, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let attn = config.attention()?;
    if config.d_model != rec.d_model() || config.vocab != rec.vocab() {
        return Err(shape_err(
            "train_fusion",
            format!("d_model {} vocab {}", rec.d_model(), rec.vocab()),
            format!("d_model {} vocab {}", config.d_model, config.vocab),
        ));
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        let p = prepare(s, rec)?;
        if is_heldout(i) {
            heldout.push(p);
        } else {
            train.push(p);
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training samples after the held-out split".into()));
    }
    // Tiny datasets: evaluate on the training part rather than nothing.
    let eval_set: &[Prepared] = if heldout.is_empty() { &train } else { &heldout };

    let mut rng = Rng::new(config.seed);
    let mut params = StreamFusionParams::init(config.d_model, config.vocab, config.variant, &mut rng);
    let mut velocity = params.zeros_like();
    let (initial_report, _) = evaluate_prepared(&params, &attn, rec, eval_set)?;
    let mut eval_curve = vec![CurvePoint::at(0, &initial_report)];

    for step in 1..=config.steps {
        let batch: Vec<&Prepared> = (0..config.batch_size).map(|_| &train[rng.below(train.len())]).collect();
        let n_tokens: usize = batch.iter().map(|p| p.tokens.len()).sum();
        let scale = 1.0 / n_tokens.max(1) as f64;
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for sample in batch {
            loss += run_sample(&params, &attn, rec, sample, true, Some((&mut grads, scale)))?.loss * scale;
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("batch loss {loss}, gradient norm {}", grads.norm()),
            });
        }
        let norm = grads.norm();
        if norm > CLIP_NORM {
            grads.scale_in_place(CLIP_NORM / norm);
        }
        velocity.scale_in_place(MOMENTUM);
        velocity.axpy(1.0, &grads)?;
        params.axpy(-config.learning_rate, &velocity)?;
        if step % config.eval_every == 0 && step != config.steps {
            let (r, _) = evaluate_prepared(&params, &attn, rec, eval_set)?;
            eval_curve.push(CurvePoint::at(step, &r));
        }
    }
    let (mut report, _) = evaluate_prepared(&params, &attn, rec, eval_set)?;
    eval_curve.push(CurvePoint::at(config.steps, &report));
    report.loss_curve = eval_curve.iter().map(|p| (p.step, p.heldout_loss)).collect();
    report.eval_curve = eval_curve;
    Ok(TrainOutcome {
        params,
        report,
        initial_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_examples() {
        let perfect = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy_loss(&perfect, &[0, 1]).unwrap(), 0.0);
        let v = 7;
        let uniform = Matrix::from_fn(3, v, |_, _| 1.0 / v as f64);
        assert_abs_diff_eq!(cross_entropy_loss(&uniform, &[0, 3, 6]).unwrap(), (v as f64).ln(), epsilon = 1e-12);
        let hand = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.75, 0.25]]).unwrap();
        assert_abs_diff_eq!(
            cross_entropy_loss(&hand, &[0, 1]).unwrap(),
            (2f64.ln() + 4f64.ln()) / 2.0,
            epsilon = 1e-15
        );
        let zero = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(cross_entropy_loss(&zero, &[1]).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
        assert!(cross_entropy_loss(&zero, &[0, 1]).is_err());
        assert!(cross_entropy_loss(&zero, &[2]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn simplex_check() {
        assert!(on_simplex(&[0.25, 0.75, 0.0]));
        assert!(!on_simplex(&[0.5, 0.6]));
        assert!(!on_simplex(&[1.5, -0.5]));
    }

    #[test]
    fn heldout_split_is_one_in_five() {
        let held: Vec<usize> = (0..10).filter(|&i| is_heldout(i)).collect();
        assert_eq!(held, vec![4, 9]);
    }
}
