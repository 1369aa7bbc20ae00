//! Tiny single-channel recognizer used as the frozen first stage.
//!
//! Encoder: per-utterance gain normalization, one `linear + ReLU` layer and
//! an additive positional code. Decoder: one cross-attention step per output
//! token whose query and keys are the positional codes, so step `l` reads
//! frame `l`; the output layer is linear followed by softmax. The decoder
//! ignores the token history; only the fusion layer's guide vector uses it.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::sim::{rms, TaskSpec};
use crate::simplex::softmax_slice;
use crate::tensor::{linear, matmul, Matrix};

/// Amplitude of the positional code added to encoder outputs.
pub const POSITION_SCALE: f64 = 0.5;
/// Inverse temperature of the positional alignment, relative to `POSITION_SCALE²`.
pub const ALIGN_SHARPNESS: f64 = 2.0;

/// Fourier positional code: `frames x d_model`, columns `(cos, sin)` pairs
/// at frequencies `2π i / frames`.
pub fn positional_code(frames: usize, d_model: usize) -> Matrix {
    Matrix::from_fn(frames, d_model, |t, j| {
        let i = (j / 2) as f64;
        let arg = std::f64::consts::TAU * i * t as f64 / frames as f64;
        POSITION_SCALE * if j % 2 == 0 { arg.cos() } else { arg.sin() }
    })
}

/// Decoder cross-attention weights, `frames x frames`, row `l` attends frame `l`.
pub fn alignment(frames: usize, d_model: usize) -> Matrix {
    let pe = positional_code(frames, d_model);
    let raw = pe.matmul_t(&pe).expect("square by construction");
    let beta = ALIGN_SHARPNESS / (POSITION_SCALE * POSITION_SCALE);
    let mut out = Matrix::zeros(frames, frames);
    for l in 0..frames {
        let scores: Vec<f64> = raw.row(l).iter().map(|&x| beta * x).collect();
        out.row_mut(l).copy_from_slice(&softmax_slice(&scores));
    }
    out
}

/// Frozen single-channel recognizer parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recognizer {
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
    pub frames: usize,
}

/// Intermediate values of a single-channel pass.
#[derive(Clone, Debug)]
pub struct EncoderPass {
    pub normalized: Matrix,
    pub pre: Matrix,
    pub h: Matrix,
    pub contexts: Matrix,
}

impl Recognizer {
    pub fn init(spec: &TaskSpec, rng: &mut Rng) -> Self {
        Self {
            w_enc: rng.glorot(spec.d_model, spec.d_model),
            b_enc: vec![0.0; spec.d_model],
            w_out: rng.glorot(spec.d_model, spec.vocab),
            b_out: vec![0.0; spec.vocab],
            frames: spec.frames,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn vocab(&self) -> usize {
        self.w_out.cols()
    }

    pub fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.shape() != (self.frames, self.d_model()) {
            return Err(shape_err(
                "Recognizer",
                format!("{}x{} input", self.frames, self.d_model()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Encoder and decoder cross-attention for one channel.
    pub fn forward(&self, x: &Matrix) -> Result<EncoderPass> {
        self.check_input(x)?;
        let r = rms(x);
        let normalized = if r > 0.0 { x.scale(1.0 / r) } else { x.clone() };
        let pre = linear(&normalized, &self.w_enc, Some(&self.b_enc))?;
        let h = crate::tensor::relu(&pre).add(&positional_code(self.frames, self.d_model()))?;
        let contexts = matmul(&alignment(self.frames, self.d_model()), &h)?;
        Ok(EncoderPass {
            normalized,
            pre,
            h,
            contexts,
        })
    }

    /// `(H_k, decoder contexts)` of one channel.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let pass = self.forward(x)?;
        Ok((pass.h, pass.contexts))
    }

    /// Vocabulary logits for a context (or fused) vector.
    pub fn logits(&self, c: &[f64]) -> Vec<f64> {
        let mut out = self.b_out.clone();
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.w_out.row(i)) {
                *o += ci * w;
            }
        }
        out
    }

    pub fn probabilities(&self, c: &[f64]) -> Vec<f64> {
        softmax_slice(&self.logits(c))
    }

    /// Greedy token per frame for a single channel.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let pass = self.forward(x)?;
        Ok((0..pass.contexts.rows())
            .map(|l| crate::sim::argmax(&self.logits(pass.contexts.row(l))))
            .collect())
    }

    /// Token accuracy over `(input, targets)` pairs.
    pub fn accuracy(&self, data: &[(Matrix, Vec<usize>)]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (x, tokens) in data {
            let pred = self.predict(x)?;
            correct += pred.iter().zip(tokens).filter(|(a, b)| a == b).count();
            total += tokens.len();
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.w_enc.data());
        v.extend_from_slice(&self.b_enc);
        v.extend_from_slice(self.w_out.data());
        v.extend_from_slice(&self.b_out);
        v
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.data_mut(),
            &mut self.b_enc[..],
            self.w_out.data_mut(),
            &mut self.b_out[..],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

/// Stage-1 optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out accuracy the run must reach when `steps > 0`.
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            learning_rate: 0.2,
            batch_size: 32,
            seed: 1,
            target_accuracy: 0.99,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub recognizer: Recognizer,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Mean cross-entropy and gradients (flattened like `Recognizer::flatten`).
fn loss_and_grad(rec: &Recognizer, batch: &[&(Matrix, Vec<usize>)]) -> Result<(f64, Vec<f64>)> {
    let d = rec.d_model();
    let v = rec.vocab();
    let align = alignment(rec.frames, d);
    let mut g_w_enc = Matrix::zeros(d, d);
    let mut g_b_enc = vec![0.0; d];
    let mut g_w_out = Matrix::zeros(d, v);
    let mut g_b_out = vec![0.0; v];
    let mut loss = 0.0;
    let n_tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
    let norm = 1.0 / n_tokens as f64;
    for (x, tokens) in batch {
        let pass = rec.forward(x)?;
        let mut d_logits = Matrix::zeros(tokens.len(), v);
        for (l, &target) in tokens.iter().enumerate() {
            let p = rec.probabilities(pass.contexts.row(l));
            loss -= p[target].max(1e-12).ln() * norm;
            for (j, &pj) in p.iter().enumerate() {
                let y = if j == target { 1.0 } else { 0.0 };
                d_logits.set(l, j, (pj - y) * norm);
            }
        }
        g_w_out.add_assign(&pass.contexts.t_matmul(&d_logits)?)?;
        for l in 0..d_logits.rows() {
            for (g, &dl) in g_b_out.iter_mut().zip(d_logits.row(l)) {
                *g += dl;
            }
        }
        let d_ctx = d_logits.matmul_t(&rec.w_out)?;
        let mut d_pre = align.t_matmul(&d_ctx)?;
        for (dp, &p) in d_pre.data_mut().iter_mut().zip(pass.pre.data()) {
            if p <= 0.0 {
                *dp = 0.0;
            }
        }
        g_w_enc.add_assign(&pass.normalized.t_matmul(&d_pre)?)?;
        for t in 0..d_pre.rows() {
            for (g, &dp) in g_b_enc.iter_mut().zip(d_pre.row(t)) {
                *g += dp;
            }
        }
    }
    let mut flat = g_w_enc.into_data();
    flat.extend(g_b_enc);
    flat.extend(g_w_out.into_data());
    flat.extend(g_b_out);
    Ok((loss, flat))
}

/// Trains the recognizer on clean utterances with SGD + momentum 0.9 and a
/// linearly decaying learning rate.
///
/// With `steps == 0` the untrained initialization is returned as is.
/// Otherwise the run fails with [`Error::TrainingDivergence`] unless held-out
/// accuracy reaches `config.target_accuracy`.
pub fn pretrain_single_channel(
    spec: &TaskSpec,
    train: &[(Matrix, Vec<usize>)],
    heldout: &[(Matrix, Vec<usize>)],
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty pre-training set".into()));
    }
    let mut rng = Rng::new(config.seed);
    let mut rec = Recognizer::init(spec, &mut rng);
    let mut velocity = vec![0.0; rec.flatten().len()];
    let mut final_loss = f64::NAN;
    for step in 0..config.steps {
        let batch: Vec<_> = (0..config.batch_size.max(1))
            .map(|_| &train[rng.below(train.len())])
            .collect();
        let (loss, grad) = loss_and_grad(&rec, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "single-channel pre-training".into(),
            });
        }
        final_loss = loss;
        // linear decay to zero
        let lr = config.learning_rate * (1.0 - step as f64 / config.steps as f64);
        let mut offset = 0;
        for slice in rec.slices_mut() {
            for w in slice.iter_mut() {
                velocity[offset] = 0.9 * velocity[offset] + grad[offset];
                *w -= lr * velocity[offset];
                offset += 1;
            }
        }
    }
    let heldout_accuracy = rec.accuracy(heldout)?;
    if config.steps > 0 && heldout_accuracy < config.target_accuracy {
        return Err(Error::TrainingDivergence(format!(
            "recognizer reached {heldout_accuracy:.4} held-out accuracy, needs {}",
            config.target_accuracy
        )));
    }
    Ok(PretrainOutcome {
        recognizer: rec,
        heldout_accuracy,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_clean_utterances, Task};

    #[test]
    fn alignment_reads_own_frame() {
        let a = alignment(8, 32);
        for l in 0..8 {
            assert!(a.get(l, l) > 1.0 - 1e-9, "row {l}: {:?}", a.row(l));
        }
    }

    #[test]
    fn encoder_is_gain_invariant() {
        let spec = TaskSpec::default();
        let rec = Recognizer::init(&spec, &mut Rng::new(2));
        let task = Task::new(spec).unwrap();
        let x = task.sample_latent(&mut Rng::new(5));
        let (h1, _) = rec.encode(&x).unwrap();
        let (h2, _) = rec.encode(&x.scale(0.03)).unwrap();
        assert!(h1.max_abs_diff(&h2).unwrap() < 1e-12);
    }

    #[test]
    fn zero_steps_returns_untrained() {
        let spec = TaskSpec::default();
        let task = Task::new(spec.clone()).unwrap();
        let data = make_clean_utterances(50, &task, &Rng::new(1));
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = pretrain_single_channel(&spec, &data, &data, &cfg).unwrap();
        assert_eq!(out.recognizer, Recognizer::init(&spec, &mut Rng::new(cfg.seed)));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let spec = TaskSpec::default();
        let rec = Recognizer::init(&spec, &mut Rng::new(2));
        assert!(rec.forward(&Matrix::zeros(3, 32)).is_err());
    }
}
