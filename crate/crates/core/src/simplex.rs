//! Stream-normalization operators: softmax, sparsemax and scaling sparsemax.
//!
//! Sparsemax is the Euclidean projection of a score vector onto the unit
//! simplex, `p_i = max(z_i - tau, 0)`. Scaling sparsemax projects onto the
//! simplex scaled by `s >= 1` and divides back by `s`, which keeps the output
//! a probability vector while letting more entries survive the threshold:
//! `p_i = max(z_i - tau_s, 0) / s` with `sum_i max(z_i - tau_s, 0) = s`.
//! At `s = 1` the two coincide and both run through the same code.
//!
//! The threshold is found by the sort-and-scan rule in
//! [`sparsemax_threshold`]. [`project_simplex_oracle`] finds the same
//! threshold by bisection and deliberately shares no code with it, so the
//! two can check each other.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Raw per-channel scores. Non-empty and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T = f64>(Vec<T>);

impl<T: Scalar> Logits<T> {
    pub fn new(z: Vec<T>) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::InvalidArgument("logits must have K >= 1".into()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Logits::new"));
        }
        Ok(Self(z))
    }

    pub fn from_slice(z: &[T]) -> Result<Self> {
        Self::new(z.to_vec())
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        crate::tensor::norm2(&self.0)
    }
}

/// A point on the probability simplex together with its support.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexWeights<T = f64> {
    weights: Vec<T>,
    support: Vec<usize>,
    tau: Option<T>,
}

impl<T: Scalar> SimplexWeights<T> {
    fn from_weights(weights: Vec<T>, tau: Option<T>) -> Self {
        let support = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > T::zero())
            .map(|(i, _)| i)
            .collect();
        Self {
            weights,
            support,
            tau,
        }
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Indices with strictly positive weight, ascending.
    #[inline]
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Threshold of the projection; `None` for softmax.
    #[inline]
    pub fn tau(&self) -> Option<T> {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn into_weights(self) -> Vec<T> {
        self.weights
    }

    /// Checks that `support` is exactly the positive entries of `weights`.
    fn check_support(&self, op: &'static str) -> Result<()> {
        let mut expected = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > T::zero())
            .map(|(i, _)| i);
        let consistent = self.support.iter().copied().eq(expected.by_ref())
            && self.weights.iter().all(|&w| w >= T::zero());
        if !consistent || self.support.is_empty() {
            return Err(Error::SupportMismatch(format!(
                "{op}: support {:?} does not match weights",
                self.support
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(z: &Logits<T>) -> SimplexWeights<T> {
    SimplexWeights::from_weights(softmax_slice(z.values()), None)
}

pub(crate) fn softmax_slice<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Softmax vector-Jacobian product: `p ⊙ (u - <p, u>)`.
pub fn softmax_backward<T: Scalar>(p: &[T], upstream: &[T]) -> Result<Vec<T>> {
    if p.len() != upstream.len() {
        return Err(shape_err(
            "softmax_backward",
            format!("upstream of length {}", p.len()),
            format!("{}", upstream.len()),
        ));
    }
    let inner = crate::tensor::dot(p, upstream);
    Ok(p.iter().zip(upstream).map(|(&pi, &ui)| pi * (ui - inner)).collect())
}

fn check_scale<T: Scalar>(s: T) -> Result<()> {
    // NaN fails this comparison too.
    if !(s >= T::one()) || !s.is_finite() {
        return Err(Error::InvalidScale(s.as_f64()));
    }
    Ok(())
}

/// Threshold `tau` and support size `k` of the projection onto the simplex
/// scaled by `s`.
///
/// Sorts descending and scans `k = K, K-1, ..., 1`, stopping at the first
/// (largest) `k` with `z_(k) >= (sum_{i<=k} z_(i) - s) / k`.
pub fn sparsemax_threshold<T: Scalar>(z: &Logits<T>, s: T) -> Result<(T, usize)> {
    check_scale(s)?;
    let mut sorted = z.values().to_vec();
    // Stable; ties cannot change tau since the threshold is unique.
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("logits are finite"));

    let mut prefix = Vec::with_capacity(sorted.len());
    let mut acc = T::zero();
    for &v in &sorted {
        acc += v;
        prefix.push(acc);
    }

    for k in (1..=sorted.len()).rev() {
        let tau = (prefix[k - 1] - s) / T::from_count(k);
        if sorted[k - 1] >= tau {
            return Ok((tau, k));
        }
    }
    // k = 1 always satisfies z_(1) >= z_(1) - s for s >= 0.
    unreachable!("sort-and-scan always accepts k = 1")
}

/// Scaling sparsemax: `p_i = max(z_i - tau, 0) / s`.
pub fn scaling_sparsemax<T: Scalar>(z: &Logits<T>, s: T) -> Result<SimplexWeights<T>> {
    let (tau, _) = sparsemax_threshold(z, s)?;
    let weights = z
        .values()
        .iter()
        .map(|&v| (v - tau).max(T::zero()) / s)
        .collect();
    Ok(SimplexWeights::from_weights(weights, Some(tau)))
}

/// Sparsemax: Euclidean projection onto the unit simplex.
pub fn sparsemax<T: Scalar>(z: &Logits<T>) -> SimplexWeights<T> {
    scaling_sparsemax(z, T::one()).expect("s = 1 is a valid scale")
}

/// Bisection iteration cap for [`project_simplex_oracle`].
pub const ORACLE_MAX_ITERS: usize = 200;

/// Reference projection by bisection on `g(t) = sum_i max(z_i - t, 0) - s`.
///
/// `g` is continuous and non-increasing with `g(min z - s) >= 0 >= g(max z)`,
/// so that interval brackets the root. Stops when `|g| < tol` or when the
/// bracket has shrunk to adjacent floating-point values.
pub fn project_simplex_oracle<T: Scalar>(z: &Logits<T>, s: T, tol: T) -> Result<SimplexWeights<T>> {
    check_scale(s)?;
    if !(tol > T::zero()) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let zs = z.values();
    let excess = |t: T| -> T {
        let mut total = T::zero();
        for &v in zs {
            if v > t {
                total += v - t;
            }
        }
        total - s
    };

    let mut lo = zs.iter().copied().fold(T::infinity(), T::min) - s;
    let mut hi = zs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut tau = None;
    let mut residual = T::infinity();
    for _ in 0..ORACLE_MAX_ITERS {
        let mid = lo + (hi - lo) / T::lit(2.0);
        let g = excess(mid);
        residual = g.abs();
        if residual < tol || mid <= lo || mid >= hi {
            tau = Some(mid);
            break;
        }
        if g > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let Some(tau) = tau else {
        return Err(Error::OracleNoConvergence {
            iterations: ORACLE_MAX_ITERS,
            residual: residual.as_f64(),
        });
    };
    let weights = zs.iter().map(|&v| (v - tau).max(T::zero()) / s).collect();
    Ok(SimplexWeights::from_weights(weights, Some(tau)))
}

fn check_backward_shapes<T: Scalar>(
    op: &'static str,
    z: &Logits<T>,
    p: &SimplexWeights<T>,
    upstream: &[T],
) -> Result<()> {
    if p.dim() != z.dim() || upstream.len() != z.dim() {
        return Err(shape_err(
            op,
            format!("weights and upstream of length {}", z.dim()),
            format!("{} and {}", p.dim(), upstream.len()),
        ));
    }
    p.check_support(op)
}

/// Vector-Jacobian product of sparsemax on the realized support.
pub fn sparsemax_backward<T: Scalar>(
    z: &Logits<T>,
    p: &SimplexWeights<T>,
    upstream: &[T],
) -> Result<Vec<T>> {
    check_backward_shapes("sparsemax_backward", z, p, upstream)?;
    Ok(support_centered(p.support(), upstream, T::one()))
}

/// `(u_i - mean_S u) / s` on the support, zero elsewhere.
fn support_centered<T: Scalar>(support: &[usize], upstream: &[T], s: T) -> Vec<T> {
    let k = T::from_count(support.len());
    let mean = support.iter().map(|&i| upstream[i]).sum::<T>() / k;
    let mut grad = vec![T::zero(); upstream.len()];
    for &i in support {
        grad[i] = (upstream[i] - mean) / s;
    }
    grad
}

/// Vector-Jacobian product of scaling sparsemax with respect to `z` and `s`.
pub fn scaling_sparsemax_backward<T: Scalar>(
    z: &Logits<T>,
    s: T,
    p: &SimplexWeights<T>,
    upstream: &[T],
) -> Result<(Vec<T>, T)> {
    check_scale(s)?;
    check_backward_shapes("scaling_sparsemax_backward", z, p, upstream)?;
    let support = p.support();
    let grad_z = support_centered(support, upstream, s);
    let inv_ks = T::one() / (T::from_count(support.len()) * s);
    let grad_s = support
        .iter()
        .map(|&i| upstream[i] * (inv_ks - p.weights()[i] / s))
        .sum();
    Ok((grad_z, grad_s))
}

/// Which simplex map a stream attention uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Softmax,
    Sparsemax,
    ScalingSparsemax,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Softmax, Variant::Sparsemax, Variant::ScalingSparsemax];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::Sparsemax => "sparsemax",
            Variant::ScalingSparsemax => "scaling_sparsemax",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Variant::Softmax),
            "sparsemax" => Ok(Variant::Sparsemax),
            "scaling_sparsemax" | "scaling-sparsemax" => Ok(Variant::ScalingSparsemax),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// A concrete normalizer, with the scale already resolved for scaling sparsemax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalizer<T = f64> {
    Softmax,
    Sparsemax,
    ScalingSparsemax(T),
}

impl<T: Scalar> Normalizer<T> {
    pub fn apply(&self, z: &Logits<T>) -> Result<SimplexWeights<T>> {
        match *self {
            Normalizer::Softmax => Ok(softmax(z)),
            Normalizer::Sparsemax => Ok(sparsemax(z)),
            Normalizer::ScalingSparsemax(s) => scaling_sparsemax(z, s),
        }
    }

    /// Gradient with respect to `z`, plus `d/ds` for scaling sparsemax.
    pub fn backward(
        &self,
        z: &Logits<T>,
        p: &SimplexWeights<T>,
        upstream: &[T],
    ) -> Result<(Vec<T>, Option<T>)> {
        match *self {
            Normalizer::Softmax => Ok((softmax_backward(p.weights(), upstream)?, None)),
            Normalizer::Sparsemax => Ok((sparsemax_backward(z, p, upstream)?, None)),
            Normalizer::ScalingSparsemax(s) => {
                let (gz, gs) = scaling_sparsemax_backward(z, s, p, upstream)?;
                Ok((gz, Some(gs)))
            }
        }
    }

    pub fn scale(&self) -> T {
        match *self {
            Normalizer::ScalingSparsemax(s) => s,
            _ => T::one(),
        }
    }
}
