//! Stream-attention fusion layer.
//!
//! One decoding step `l` of the fusion layer:
//!
//! ```text
//! g      = MHA(y_{l-1} W_y1, Y W_y2, Y W_y3)              guide vector
//! ĉ_k    = MHA(c_k W_c, H_k W_h1, H_k W_h2)               per-channel context
//! z_k    = (g W_g) · (ĉ_k W_ĉ1) / sqrt(D)                 stream score
//! w      = softmax | sparsemax | scaling_sparsemax(z, s)
//! r      = sum_k w_k ĉ_k W_ĉ2
//! ```
//!
//! with `s = 1 + ReLU(a·[‖z‖, C] + b)` for the scaling variant. The stream
//! attention itself always uses a single head.
//!
//! [`FusionStep`] records a forward pass and replays it backwards, producing
//! exact gradients for every entry of [`StreamFusionParams`] and for the step
//! inputs.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::simplex::{Logits, Normalizer, SimplexWeights, Variant};
use crate::tensor::{dot, matmul, Matrix, Vector};

/// Multi-head attention configuration. `w_o` is the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f64> {
    n_heads: usize,
    d_model: usize,
    w_o: Matrix<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Heads with an identity output projection.
    pub fn new(n_heads: usize, d_model: usize) -> Result<Self> {
        Self::with_output(n_heads, Matrix::identity(d_model))
    }

    pub fn with_output(n_heads: usize, w_o: Matrix<T>) -> Result<Self> {
        let d_model = w_o.rows();
        if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        if w_o.cols() != d_model {
            return Err(shape_err(
                "AttentionParams",
                format!("w_o {d_model}x{d_model}"),
                format!("{:?}", w_o.shape()),
            ));
        }
        Ok(Self {
            n_heads,
            d_model,
            w_o,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn w_o(&self) -> &Matrix<T> {
        &self.w_o
    }
}

/// Forward record of one attention head.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T = f64> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    scores: Vec<Logits<T>>,
    probs: Vec<SimplexWeights<T>>,
    normalizer: Normalizer<T>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn probs(&self) -> &[SimplexWeights<T>] {
        &self.probs
    }
}

/// Row-wise `normalizer(q kᵀ / sqrt(d_k)) · v`.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    normalizer: &Normalizer<T>,
) -> Result<Matrix<T>> {
    attention_forward(q, k, v, normalizer).map(|(out, _)| out)
}

pub fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    normalizer: &Normalizer<T>,
) -> Result<(Matrix<T>, AttentionRecord<T>)> {
    if q.cols() != k.cols() || k.rows() != v.rows() || k.rows() == 0 {
        return Err(shape_err(
            "scaled_dot_attention",
            "q.cols == k.cols, k.rows == v.rows >= 1",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let inv_sqrt = T::one() / T::from_count(q.cols()).sqrt();
    let raw = q.matmul_t(k)?;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut scores = Vec::with_capacity(q.rows());
    let mut probs = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let z = Logits::new(raw.row(i).iter().map(|&x| x * inv_sqrt).collect())?;
        let p = normalizer.apply(&z)?;
        let dst = out.row_mut(i);
        for &j in p.support() {
            let w = p.weights()[j];
            for (d, &vj) in dst.iter_mut().zip(v.row(j)) {
                *d += w * vj;
            }
        }
        scores.push(z);
        probs.push(p);
    }
    let record = AttentionRecord {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        scores,
        probs,
        normalizer: *normalizer,
    };
    Ok((out, record))
}

/// Gradients of one attention head.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T = f64> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
    /// Sum over query rows of `d/ds` when the normalizer is scaling sparsemax.
    pub ds: Option<T>,
}

pub fn attention_backward<T: Scalar>(
    rec: &AttentionRecord<T>,
    d_out: &Matrix<T>,
) -> Result<AttentionGrads<T>> {
    if d_out.shape() != (rec.q.rows(), rec.v.cols()) {
        return Err(shape_err(
            "attention_backward",
            format!("{:?}", (rec.q.rows(), rec.v.cols())),
            format!("{:?}", d_out.shape()),
        ));
    }
    let inv_sqrt = T::one() / T::from_count(rec.q.cols()).sqrt();
    let mut dq = Matrix::zeros(rec.q.rows(), rec.q.cols());
    let mut dk = Matrix::zeros(rec.k.rows(), rec.k.cols());
    let mut dv = Matrix::zeros(rec.v.rows(), rec.v.cols());
    let mut ds: Option<T> = None;
    for i in 0..rec.q.rows() {
        let p = &rec.probs[i];
        let g = d_out.row(i);
        // dv_j += p_j g ; dp_j = <g, v_j>
        let mut dp = vec![T::zero(); rec.v.rows()];
        for (j, dpj) in dp.iter_mut().enumerate() {
            let w = p.weights()[j];
            if w != T::zero() {
                for (d, &gi) in dv.row_mut(j).iter_mut().zip(g) {
                    *d += w * gi;
                }
            }
            *dpj = dot(g, rec.v.row(j));
        }
        let (dz, dsi) = rec.normalizer.backward(&rec.scores[i], p, &dp)?;
        if let Some(dsi) = dsi {
            *ds.get_or_insert(T::zero()) += dsi;
        }
        for (j, &dzj) in dz.iter().enumerate() {
            if dzj == T::zero() {
                continue;
            }
            let c = dzj * inv_sqrt;
            for (d, &kj) in dq.row_mut(i).iter_mut().zip(rec.k.row(j)) {
                *d += c * kj;
            }
            for (d, &qi) in dk.row_mut(j).iter_mut().zip(rec.q.row(i)) {
                *d += c * qi;
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv, ds })
}

/// Forward record of a multi-head attention call.
#[derive(Clone, Debug)]
pub struct MhaRecord<T = f64> {
    heads: Vec<AttentionRecord<T>>,
    concat: Matrix<T>,
}

impl<T: Scalar> MhaRecord<T> {
    pub fn heads(&self) -> &[AttentionRecord<T>] {
        &self.heads
    }
}

/// Multi-head softmax attention: per-head attention on contiguous feature
/// blocks, concatenated, then projected by `w_o`.
pub fn mha<T: Scalar>(
    q_in: &Matrix<T>,
    k_in: &Matrix<T>,
    v_in: &Matrix<T>,
    params: &AttentionParams<T>,
) -> Result<Matrix<T>> {
    mha_forward(q_in, k_in, v_in, params).map(|(out, _)| out)
}

pub fn mha_forward<T: Scalar>(
    q_in: &Matrix<T>,
    k_in: &Matrix<T>,
    v_in: &Matrix<T>,
    params: &AttentionParams<T>,
) -> Result<(Matrix<T>, MhaRecord<T>)> {
    let d = params.d_model;
    if q_in.cols() != d || k_in.cols() != d || v_in.cols() != d {
        return Err(shape_err(
            "mha",
            format!("{d} columns"),
            format!("q {}, k {}, v {}", q_in.cols(), k_in.cols(), v_in.cols()),
        ));
    }
    let dh = params.d_head();
    let mut concat = Matrix::zeros(q_in.rows(), d);
    let mut heads = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let start = h * dh;
        let (u, rec) = attention_forward(
            &q_in.col_block(start, dh)?,
            &k_in.col_block(start, dh)?,
            &v_in.col_block(start, dh)?,
            &Normalizer::Softmax,
        )?;
        concat.set_col_block(start, &u)?;
        heads.push(rec);
    }
    let out = matmul(&concat, &params.w_o)?;
    Ok((out, MhaRecord { heads, concat }))
}

/// Gradients of a multi-head attention call.
#[derive(Clone, Debug)]
pub struct MhaGrads<T = f64> {
    pub dq_in: Matrix<T>,
    pub dk_in: Matrix<T>,
    pub dv_in: Matrix<T>,
    pub dw_o: Matrix<T>,
}

pub fn mha_backward<T: Scalar>(
    params: &AttentionParams<T>,
    rec: &MhaRecord<T>,
    d_out: &Matrix<T>,
) -> Result<MhaGrads<T>> {
    let dw_o = rec.concat.t_matmul(d_out)?;
    let d_concat = d_out.matmul_t(&params.w_o)?;
    let dh = params.d_head();
    let first = &rec.heads[0];
    let mut dq_in = Matrix::zeros(first.q.rows(), params.d_model);
    let mut dk_in = Matrix::zeros(first.k.rows(), params.d_model);
    let mut dv_in = Matrix::zeros(first.v.rows(), params.d_model);
    for (h, head) in rec.heads.iter().enumerate() {
        let start = h * dh;
        let g = attention_backward(head, &d_concat.col_block(start, dh)?)?;
        dq_in.set_col_block(start, &g.dq)?;
        dk_in.set_col_block(start, &g.dk)?;
        dv_in.set_col_block(start, &g.dv)?;
    }
    Ok(MhaGrads {
        dq_in,
        dk_in,
        dv_in,
        dw_o,
    })
}

/// Learnable parameters of the fusion layer.
///
/// `w_y*` are `vocab x d_model`; all other matrices are `d_model x d_model`.
/// The stream-attention scaling subnet is the affine map
/// `scaling_w · [‖z‖, C] + scaling_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamFusionParams<T = f64> {
    pub w_c: Matrix<T>,
    pub w_h1: Matrix<T>,
    pub w_h2: Matrix<T>,
    pub w_g: Matrix<T>,
    pub w_c1hat: Matrix<T>,
    pub w_c2hat: Matrix<T>,
    pub w_y1: Matrix<T>,
    pub w_y2: Matrix<T>,
    pub w_y3: Matrix<T>,
    pub bos_embedding: Vector<T>,
    pub scaling_w: [T; 2],
    pub scaling_b: T,
    pub variant: Variant,
}

/// Checkpoint names of the parameter tensors, in storage order.
pub const PARAM_NAMES: [&str; 12] = [
    "w_c",
    "w_h1",
    "w_h2",
    "w_g",
    "w_c1hat",
    "w_c2hat",
    "w_y1",
    "w_y2",
    "w_y3",
    "bos_embedding",
    "scaling_w",
    "scaling_b",
];

impl<T: Scalar> StreamFusionParams<T> {
    /// Glorot-uniform matrices; BOS embedding and scaling subnet start at zero.
    pub fn init(d_model: usize, vocab: usize, variant: Variant, rng: &mut Rng) -> Self {
        let mut sq = || rng.glorot(d_model, d_model);
        let (w_c, w_h1, w_h2, w_g, w_c1hat, w_c2hat) = (sq(), sq(), sq(), sq(), sq(), sq());
        Self {
            w_c,
            w_h1,
            w_h2,
            w_g,
            w_c1hat,
            w_c2hat,
            w_y1: rng.glorot(vocab, d_model),
            w_y2: rng.glorot(vocab, d_model),
            w_y3: rng.glorot(vocab, d_model),
            bos_embedding: vec![T::zero(); vocab],
            scaling_w: [T::zero(); 2],
            scaling_b: T::zero(),
            variant,
        }
    }

    pub fn zeros(d_model: usize, vocab: usize, variant: Variant) -> Self {
        let sq = || Matrix::zeros(d_model, d_model);
        Self {
            w_c: sq(),
            w_h1: sq(),
            w_h2: sq(),
            w_g: sq(),
            w_c1hat: sq(),
            w_c2hat: sq(),
            w_y1: Matrix::zeros(vocab, d_model),
            w_y2: Matrix::zeros(vocab, d_model),
            w_y3: Matrix::zeros(vocab, d_model),
            bos_embedding: vec![T::zero(); vocab],
            scaling_w: [T::zero(); 2],
            scaling_b: T::zero(),
            variant,
        }
    }

    /// Same shapes and variant, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_model(), self.vocab(), self.variant)
    }

    pub fn d_model(&self) -> usize {
        self.w_c.rows()
    }

    pub fn vocab(&self) -> usize {
        self.w_y1.rows()
    }

    /// `(name, (rows, cols), values)` for every tensor, in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> Vec<(&'static str, (usize, usize), &[T])> {
        fn m<'a, T: Scalar>(name: &'static str, x: &'a Matrix<T>) -> (&'static str, (usize, usize), &'a [T]) {
            (name, x.shape(), x.data())
        }
        vec![
            m("w_c", &self.w_c),
            m("w_h1", &self.w_h1),
            m("w_h2", &self.w_h2),
            m("w_g", &self.w_g),
            m("w_c1hat", &self.w_c1hat),
            m("w_c2hat", &self.w_c2hat),
            m("w_y1", &self.w_y1),
            m("w_y2", &self.w_y2),
            m("w_y3", &self.w_y3),
            ("bos_embedding", (1, self.bos_embedding.len()), &self.bos_embedding[..]),
            ("scaling_w", (1, 2), &self.scaling_w[..]),
            ("scaling_b", (1, 1), std::slice::from_ref(&self.scaling_b)),
        ]
    }

    /// Mutable views in [`PARAM_NAMES`] order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("w_c", self.w_c.data_mut()),
            ("w_h1", self.w_h1.data_mut()),
            ("w_h2", self.w_h2.data_mut()),
            ("w_g", self.w_g.data_mut()),
            ("w_c1hat", self.w_c1hat.data_mut()),
            ("w_c2hat", self.w_c2hat.data_mut()),
            ("w_y1", self.w_y1.data_mut()),
            ("w_y2", self.w_y2.data_mut()),
            ("w_y3", self.w_y3.data_mut()),
            ("bos_embedding", &mut self.bos_embedding[..]),
            ("scaling_w", &mut self.scaling_w[..]),
            ("scaling_b", std::slice::from_mut(&mut self.scaling_b)),
        ]
    }

    /// All parameters flattened in [`PARAM_NAMES`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Inverse of [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err(
                "assign_flat",
                format!("{} values", self.num_params()),
                format!("{}", flat.len()),
            ));
        }
        let mut offset = 0;
        for (_, dst) in self.tensors_mut() {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self += k * other`, tensor by tensor.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        let src = other.flatten();
        if src.len() != self.num_params() {
            return Err(shape_err("axpy", "matching parameter shapes", "different shapes"));
        }
        let mut offset = 0;
        for (_, dst) in self.tensors_mut() {
            for d in dst.iter_mut() {
                *d += k * src[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, k: T) {
        for (_, dst) in self.tensors_mut() {
            for d in dst.iter_mut() {
                *d *= k;
            }
        }
    }

    pub fn norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.d_model();
        let v = self.vocab();
        for (name, shape, _) in self.tensors() {
            let expected = match name {
                "w_y1" | "w_y2" | "w_y3" => (v, d),
                "bos_embedding" => (1, v),
                "scaling_w" => (1, 2),
                "scaling_b" => (1, 1),
                _ => (d, d),
            };
            if shape != expected {
                return Err(shape_err(
                    "StreamFusionParams",
                    format!("{name} {expected:?}"),
                    format!("{shape:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if !self.is_finite() {
            return Err(Error::NonFinite("StreamFusionParams"));
        }
        Ok(())
    }
}

/// Result of one stream-attention step.
#[derive(Clone, Debug)]
pub struct FusionStepOutput<T = f64> {
    pub r: Vector<T>,
    pub channel_weights: SimplexWeights<T>,
    pub s_value: T,
    pub scores: Logits<T>,
}

fn single_row<T: Scalar>(m: &Matrix<T>) -> Vector<T> {
    m.row(0).to_vec()
}

struct GuideRecord<T> {
    y: Matrix<T>,
    mha: MhaRecord<T>,
}

fn guide_forward<T: Scalar>(
    y_hist: &Matrix<T>,
    params: &StreamFusionParams<T>,
    attn: &AttentionParams<T>,
) -> Result<(Vector<T>, GuideRecord<T>)> {
    if y_hist.cols() != params.vocab() {
        return Err(shape_err(
            "guide_vector",
            format!("{} columns (vocabulary)", params.vocab()),
            format!("{}", y_hist.cols()),
        ));
    }
    let y = if y_hist.rows() == 0 {
        Matrix::row_vector(&params.bos_embedding)
    } else {
        y_hist.clone()
    };
    let last = Matrix::row_vector(y.row(y.rows() - 1));
    let q_in = matmul(&last, &params.w_y1)?;
    let k_in = matmul(&y, &params.w_y2)?;
    let v_in = matmul(&y, &params.w_y3)?;
    let (g, rec) = mha_forward(&q_in, &k_in, &v_in, attn)?;
    Ok((single_row(&g), GuideRecord { y, mha: rec }))
}

/// Guide vector from the decoding history (`(l-1) x vocab`, possibly empty).
///
/// An empty history is replaced by the single `bos_embedding` row.
pub fn guide_vector<T: Scalar>(
    y_hist: &Matrix<T>,
    params: &StreamFusionParams<T>,
    attn: &AttentionParams<T>,
) -> Result<Vector<T>> {
    guide_forward(y_hist, params, attn).map(|(g, _)| g)
}

struct RefineRecord<T> {
    c: Matrix<T>,
    mha: MhaRecord<T>,
}

/// Context refinement against precomputed `H_k W_h1`, `H_k W_h2`.
fn refine_forward<T: Scalar>(
    c_lk: &[T],
    k_proj: &Matrix<T>,
    v_proj: &Matrix<T>,
    params: &StreamFusionParams<T>,
    attn: &AttentionParams<T>,
) -> Result<(Vector<T>, RefineRecord<T>)> {
    if c_lk.len() != params.d_model() {
        return Err(shape_err(
            "context_refine",
            format!("context of length {}", params.d_model()),
            format!("{}", c_lk.len()),
        ));
    }
    let c = Matrix::row_vector(c_lk);
    let q_in = matmul(&c, &params.w_c)?;
    let (out, rec) = mha_forward(&q_in, k_proj, v_proj, attn)?;
    Ok((single_row(&out), RefineRecord { c, mha: rec }))
}

/// Per-channel context refinement `MHA(c W_c, H W_h1, H W_h2)`.
pub fn context_refine<T: Scalar>(
    c_lk: &[T],
    h_k: &Matrix<T>,
    params: &StreamFusionParams<T>,
    attn: &AttentionParams<T>,
) -> Result<Vector<T>> {
    let (kp, vp) = refine_projections(h_k, params)?;
    refine_forward(c_lk, &kp, &vp, params, attn).map(|(c, _)| c)
}

/// `(H W_h1, H W_h2)`; constant across decoding steps of one utterance.
pub fn refine_projections<T: Scalar>(
    h_k: &Matrix<T>,
    params: &StreamFusionParams<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((matmul(h_k, &params.w_h1)?, matmul(h_k, &params.w_h2)?))
}

/// Pre-activation of the scaling subnet, `scaling_w · [‖z‖, C] + scaling_b`.
fn scaling_preactivation<T: Scalar>(z: &Logits<T>, c_channels: usize, params: &StreamFusionParams<T>) -> T {
    params.scaling_w[0] * z.norm() + params.scaling_w[1] * T::from_count(c_channels) + params.scaling_b
}

/// Scale of the scaling-sparsemax stream attention; always `>= 1`.
pub fn scaling_factor<T: Scalar>(
    z: &Logits<T>,
    c_channels: usize,
    params: &StreamFusionParams<T>,
) -> Result<T> {
    if c_channels != z.dim() {
        return Err(shape_err(
            "scaling_factor",
            format!("{} channels", z.dim()),
            format!("{c_channels}"),
        ));
    }
    let s = T::one() + scaling_preactivation(z, c_channels, params).max(T::zero());
    if !s.is_finite() {
        return Err(Error::NonFinite("scaling_factor"));
    }
    Ok(s)
}

/// Gradient of [`scaling_factor`] w.r.t. `(z, scaling_w, scaling_b)` scaled by `ds`.
///
/// The ReLU uses derivative 1 at exactly zero so a zero-initialized subnet
/// still receives gradient.
pub fn scaling_factor_backward<T: Scalar>(
    z: &Logits<T>,
    c_channels: usize,
    params: &StreamFusionParams<T>,
    ds: T,
) -> (Vector<T>, [T; 2], T) {
    let pre = scaling_preactivation(z, c_channels, params);
    if pre < T::zero() {
        return (vec![T::zero(); z.dim()], [T::zero(); 2], T::zero());
    }
    let norm = z.norm();
    let dz = if norm > T::zero() {
        z.values().iter().map(|&v| ds * params.scaling_w[0] * v / norm).collect()
    } else {
        vec![T::zero(); z.dim()]
    };
    (dz, [ds * norm, ds * T::from_count(c_channels)], ds)
}

struct StreamRecord<T> {
    g: Matrix<T>,
    c_hat: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    out: FusionStepOutput<T>,
    normalizer: Normalizer<T>,
}

fn stream_forward<T: Scalar>(
    g_l: &[T],
    c_hat: &Matrix<T>,
    params: &StreamFusionParams<T>,
) -> Result<StreamRecord<T>> {
    let d = params.d_model();
    if g_l.len() != d || c_hat.cols() != d || c_hat.rows() == 0 {
        return Err(shape_err(
            "stream_fuse",
            format!("guide of length {d}, C >= 1 rows of {d}"),
            format!("guide {}, c_hat {:?}", g_l.len(), c_hat.shape()),
        ));
    }
    let g = Matrix::row_vector(g_l);
    let q = matmul(&g, &params.w_g)?;
    let k = matmul(c_hat, &params.w_c1hat)?;
    let v = matmul(c_hat, &params.w_c2hat)?;
    let inv_sqrt = T::one() / T::from_count(d).sqrt();
    let z = Logits::new(q.matmul_t(&k)?.row(0).iter().map(|&x| x * inv_sqrt).collect())?;
    let normalizer = match params.variant {
        Variant::Softmax => Normalizer::Softmax,
        Variant::Sparsemax => Normalizer::Sparsemax,
        Variant::ScalingSparsemax => {
            Normalizer::ScalingSparsemax(scaling_factor(&z, c_hat.rows(), params)?)
        }
    };
    let weights = normalizer.apply(&z)?;
    let mut r = vec![T::zero(); d];
    for &k_idx in weights.support() {
        let w = weights.weights()[k_idx];
        for (ri, &vi) in r.iter_mut().zip(v.row(k_idx)) {
            *ri += w * vi;
        }
    }
    Ok(StreamRecord {
        g,
        c_hat: c_hat.clone(),
        q,
        k,
        v,
        out: FusionStepOutput {
            r,
            channel_weights: weights,
            s_value: normalizer.scale(),
            scores: z,
        },
        normalizer,
    })
}

/// Single-head stream attention over the refined channel contexts `c_hat` (`C x D`).
pub fn stream_fuse<T: Scalar>(
    g_l: &[T],
    c_hat: &Matrix<T>,
    params: &StreamFusionParams<T>,
) -> Result<FusionStepOutput<T>> {
    stream_forward(g_l, c_hat, params).map(|rec| rec.out)
}

/// Returns `(d_g, d_c_hat)` and accumulates parameter gradients into `grads`.
fn stream_backward<T: Scalar>(
    rec: &StreamRecord<T>,
    params: &StreamFusionParams<T>,
    d_r: &[T],
    grads: &mut StreamFusionParams<T>,
) -> Result<(Vector<T>, Matrix<T>)> {
    let d = params.d_model();
    let c = rec.c_hat.rows();
    if d_r.len() != d {
        return Err(shape_err("fusion_backward", format!("upstream of length {d}"), format!("{}", d_r.len())));
    }
    let w = &rec.out.channel_weights;
    // r = w V
    let dp: Vec<T> = (0..c).map(|k| dot(d_r, rec.v.row(k))).collect();
    let mut dv = Matrix::zeros(c, d);
    for &k in w.support() {
        let wk = w.weights()[k];
        for (dst, &g) in dv.row_mut(k).iter_mut().zip(d_r) {
            *dst = wk * g;
        }
    }
    let z = &rec.out.scores;
    let (mut dz, ds) = rec.normalizer.backward(z, w, &dp)?;
    if let Some(ds) = ds {
        let (dz_s, dw, db) = scaling_factor_backward(z, c, params, ds);
        for (a, b) in dz.iter_mut().zip(dz_s) {
            *a += b;
        }
        grads.scaling_w[0] += dw[0];
        grads.scaling_w[1] += dw[1];
        grads.scaling_b += db;
    }
    let inv_sqrt = T::one() / T::from_count(d).sqrt();
    let dz_m = Matrix::row_vector(&dz.iter().map(|&x| x * inv_sqrt).collect::<Vec<_>>());
    // z = q kᵀ
    let dq = matmul(&dz_m, &rec.k)?;
    let dk = dz_m.t_matmul(&rec.q)?;
    grads.w_g.add_assign(&rec.g.t_matmul(&dq)?)?;
    grads.w_c1hat.add_assign(&rec.c_hat.t_matmul(&dk)?)?;
    grads.w_c2hat.add_assign(&rec.c_hat.t_matmul(&dv)?)?;
    let d_g = dq.matmul_t(&params.w_g)?;
    let mut d_c_hat = dk.matmul_t(&params.w_c1hat)?;
    d_c_hat.add_assign(&dv.matmul_t(&params.w_c2hat)?)?;
    Ok((single_row(&d_g), d_c_hat))
}

/// Gradients with respect to the inputs of one fusion step.
#[derive(Clone, Debug)]
pub struct StepInputGrads<T = f64> {
    /// `(l-1) x vocab`; empty when the BOS row was used.
    pub d_y_hist: Matrix<T>,
    /// `C x D`, one row per decoder context `c_{l,k}`.
    pub d_contexts: Matrix<T>,
    pub d_encodings: Vec<Matrix<T>>,
    pub d_guide: Vector<T>,
    pub d_c_hat: Matrix<T>,
}

struct StepRecord<T> {
    guide: GuideRecord<T>,
    bos: bool,
    refines: Vec<RefineRecord<T>>,
    encodings: Vec<Matrix<T>>,
    stream: StreamRecord<T>,
}

/// One fusion step with a recorded forward pass for reverse-mode gradients.
pub struct FusionStep<'p, T: Scalar = f64> {
    params: &'p StreamFusionParams<T>,
    attn: &'p AttentionParams<T>,
    record: Option<StepRecord<T>>,
}

impl<'p, T: Scalar> FusionStep<'p, T> {
    pub fn new(params: &'p StreamFusionParams<T>, attn: &'p AttentionParams<T>) -> Self {
        Self {
            params,
            attn,
            record: None,
        }
    }

    /// Runs guide, refinement and stream attention.
    ///
    /// `contexts` holds one decoder context per channel (`C x D`) and
    /// `encodings` the matching `H_k`.
    pub fn forward(
        &mut self,
        y_hist: &Matrix<T>,
        contexts: &Matrix<T>,
        encodings: &[Matrix<T>],
    ) -> Result<FusionStepOutput<T>> {
        if contexts.rows() != encodings.len() {
            return Err(shape_err(
                "FusionStep::forward",
                format!("{} encodings", contexts.rows()),
                format!("{}", encodings.len()),
            ));
        }
        let (g, guide) = guide_forward(y_hist, self.params, self.attn)?;
        let mut c_hat = Matrix::zeros(contexts.rows(), self.params.d_model());
        let mut refines = Vec::with_capacity(encodings.len());
        for (k, h) in encodings.iter().enumerate() {
            let (kp, vp) = refine_projections(h, self.params)?;
            let (ck, rec) = refine_forward(contexts.row(k), &kp, &vp, self.params, self.attn)?;
            c_hat.row_mut(k).copy_from_slice(&ck);
            refines.push(rec);
        }
        let stream = stream_forward(&g, &c_hat, self.params)?;
        let out = stream.out.clone();
        self.record = Some(StepRecord {
            guide,
            bos: y_hist.rows() == 0,
            refines,
            encodings: encodings.to_vec(),
            stream,
        });
        Ok(out)
    }

    /// Back-propagates `d_r` (gradient of the loss w.r.t. `r_l`).
    ///
    /// Parameter gradients are added into `grads`; input gradients are returned.
    pub fn backward(&self, d_r: &[T], grads: &mut StreamFusionParams<T>) -> Result<StepInputGrads<T>> {
        let rec = self.record.as_ref().ok_or(Error::MissingForward("FusionStep"))?;
        let p = self.params;
        let (d_guide, d_c_hat) = stream_backward(&rec.stream, p, d_r, grads)?;

        // context refinement, channel by channel
        let mut d_contexts = Matrix::zeros(d_c_hat.rows(), p.d_model());
        let mut d_encodings = Vec::with_capacity(rec.refines.len());
        for (k, r) in rec.refines.iter().enumerate() {
            let d_out = Matrix::row_vector(d_c_hat.row(k));
            let g = mha_backward(self.attn, &r.mha, &d_out)?;
            grads.w_c.add_assign(&r.c.t_matmul(&g.dq_in)?)?;
            let h = &rec.encodings[k];
            grads.w_h1.add_assign(&h.t_matmul(&g.dk_in)?)?;
            grads.w_h2.add_assign(&h.t_matmul(&g.dv_in)?)?;
            d_contexts.row_mut(k).copy_from_slice(g.dq_in.matmul_t(&p.w_c)?.row(0));
            let mut dh = g.dk_in.matmul_t(&p.w_h1)?;
            dh.add_assign(&g.dv_in.matmul_t(&p.w_h2)?)?;
            d_encodings.push(dh);
        }

        let d_y = guide_backward(&rec.guide, p, self.attn, &d_guide, grads)?;
        let d_y_hist = if rec.bos {
            for (b, &d) in grads.bos_embedding.iter_mut().zip(d_y.row(0)) {
                *b += d;
            }
            Matrix::zeros(0, p.vocab())
        } else {
            d_y
        };
        Ok(StepInputGrads {
            d_y_hist,
            d_contexts,
            d_encodings,
            d_guide,
            d_c_hat,
        })
    }
}

/// Returns the gradient w.r.t. the (possibly BOS-substituted) history rows.
fn guide_backward<T: Scalar>(
    rec: &GuideRecord<T>,
    p: &StreamFusionParams<T>,
    attn: &AttentionParams<T>,
    d_guide: &[T],
    grads: &mut StreamFusionParams<T>,
) -> Result<Matrix<T>> {
    let g = mha_backward(attn, &rec.mha, &Matrix::row_vector(d_guide))?;
    let last_idx = rec.y.rows() - 1;
    let last = Matrix::row_vector(rec.y.row(last_idx));
    grads.w_y1.add_assign(&last.t_matmul(&g.dq_in)?)?;
    grads.w_y2.add_assign(&rec.y.t_matmul(&g.dk_in)?)?;
    grads.w_y3.add_assign(&rec.y.t_matmul(&g.dv_in)?)?;
    let mut d_y = g.dk_in.matmul_t(&p.w_y2)?;
    d_y.add_assign(&g.dv_in.matmul_t(&p.w_y3)?)?;
    let d_last = g.dq_in.matmul_t(&p.w_y1)?;
    for (a, &b) in d_y.row_mut(last_idx).iter_mut().zip(d_last.row(0)) {
        *a += b;
    }
    Ok(d_y)
}

/// Forward-only cached variant used by the trainer: the `H_k` projections
/// are computed once per utterance and reused across decoding steps.
pub struct ChannelCache<T = f64> {
    pub k_proj: Matrix<T>,
    pub v_proj: Matrix<T>,
}

impl<T: Scalar> ChannelCache<T> {
    pub fn new(h_k: &Matrix<T>, params: &StreamFusionParams<T>) -> Result<Self> {
        let (k_proj, v_proj) = refine_projections(h_k, params)?;
        Ok(Self { k_proj, v_proj })
    }
}

/// Recorded step against cached channel projections.
pub struct CachedStep<T = f64> {
    guide: GuideRecord<T>,
    bos: bool,
    refines: Vec<RefineRecord<T>>,
    stream: StreamRecord<T>,
}

impl<T: Scalar> CachedStep<T> {
    pub fn forward(
        y_hist: &Matrix<T>,
        contexts: &Matrix<T>,
        channels: &[ChannelCache<T>],
        params: &StreamFusionParams<T>,
        attn: &AttentionParams<T>,
    ) -> Result<Self> {
        if contexts.rows() != channels.len() {
            return Err(shape_err(
                "CachedStep::forward",
                format!("{} channels", contexts.rows()),
                format!("{}", channels.len()),
            ));
        }
        let (g, guide) = guide_forward(y_hist, params, attn)?;
        let mut c_hat = Matrix::zeros(contexts.rows(), params.d_model());
        let mut refines = Vec::with_capacity(channels.len());
        for (k, ch) in channels.iter().enumerate() {
            let (ck, rec) = refine_forward(contexts.row(k), &ch.k_proj, &ch.v_proj, params, attn)?;
            c_hat.row_mut(k).copy_from_slice(&ck);
            refines.push(rec);
        }
        let stream = stream_forward(&g, &c_hat, params)?;
        Ok(Self {
            guide,
            bos: y_hist.rows() == 0,
            refines,
            stream,
        })
    }

    pub fn output(&self) -> &FusionStepOutput<T> {
        &self.stream.out
    }

    /// Accumulates parameter gradients; the gradients w.r.t. the cached
    /// projections are added into `d_k_proj` / `d_v_proj` (one per channel)
    /// so the caller can fold them into `w_h1` / `w_h2` once per utterance.
    pub fn backward(
        &self,
        params: &StreamFusionParams<T>,
        attn: &AttentionParams<T>,
        d_r: &[T],
        grads: &mut StreamFusionParams<T>,
        d_k_proj: &mut [Matrix<T>],
        d_v_proj: &mut [Matrix<T>],
    ) -> Result<()> {
        let (d_guide, d_c_hat) = stream_backward(&self.stream, params, d_r, grads)?;
        for (k, r) in self.refines.iter().enumerate() {
            let d_out = Matrix::row_vector(d_c_hat.row(k));
            let g = mha_backward(attn, &r.mha, &d_out)?;
            grads.w_c.add_assign(&r.c.t_matmul(&g.dq_in)?)?;
            d_k_proj[k].add_assign(&g.dk_in)?;
            d_v_proj[k].add_assign(&g.dv_in)?;
        }
        let d_y = guide_backward(&self.guide, params, attn, &d_guide, grads)?;
        if self.bos {
            for (b, &d) in grads.bos_embedding.iter_mut().zip(d_y.row(0)) {
                *b += d;
            }
        }
        Ok(())
    }
}

/// Folds accumulated projection gradients into `w_h1`, `w_h2`.
pub fn fold_projection_grads<T: Scalar>(
    encodings: &[Matrix<T>],
    d_k_proj: &[Matrix<T>],
    d_v_proj: &[Matrix<T>],
    grads: &mut StreamFusionParams<T>,
) -> Result<()> {
    for ((h, dk), dv) in encodings.iter().zip(d_k_proj).zip(d_v_proj) {
        grads.w_h1.add_assign(&h.t_matmul(dk)?)?;
        grads.w_h2.add_assign(&h.t_matmul(dv)?)?;
    }
    Ok(())
}
