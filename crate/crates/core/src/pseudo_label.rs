//! Candidate-set reweighting and pseudo-label normalization.
//!
//! A pseudo-label is produced by weighting the model's class probabilities
//! with a mask that keeps candidate labels at weight 1 and shrinks every
//! non-candidate label to `lambda`, then normalizing the weighted scores
//! either to a one-hot vector or with a temperature-like power `1/K`.
//!
//! The module also carries the closed-form maximizers of the entropy
//! regularized pseudo-label objective (see [`crate::oracle`]), written in
//! terms of the penalty `M = -ln(lambda)` so that they form an independent
//! algebraic route to the same vectors.

use serde::{Deserialize, Serialize};

use crate::error::{AlimError, Result};
use crate::scalar::Real;

/// Binary candidate mask `S(x)`: `true` marks a label in the candidate set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct CandidateMask(Vec<bool>);

impl CandidateMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(AlimError::InvalidMask(
                "candidate set must contain at least one label".into(),
            ));
        }
        Ok(Self(bits))
    }

    /// Builds a mask from 0/1 entries.
    pub fn from_binary(entries: &[u8]) -> Result<Self> {
        let bits = entries
            .iter()
            .map(|&e| match e {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(AlimError::InvalidMask(format!(
                    "entries must be 0 or 1, found {other}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn from_indices(num_classes: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; num_classes];
        for &i in indices {
            if i >= num_classes {
                return Err(AlimError::InvalidMask(format!(
                    "label {i} out of range for {num_classes} classes"
                )));
            }
            bits[i] = true;
        }
        Self::new(bits)
    }

    pub fn singleton(num_classes: usize, label: usize) -> Result<Self> {
        Self::from_indices(num_classes, &[label])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn contains(&self, label: usize) -> bool {
        self.0[label]
    }

    /// Number of labels in the candidate set.
    pub fn size(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// True when every label is a candidate (no non-candidate label exists).
    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn to_binary(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

impl TryFrom<Vec<u8>> for CandidateMask {
    type Error = AlimError;

    fn try_from(value: Vec<u8>) -> Result<Self> {
        Self::from_binary(&value)
    }
}

impl From<CandidateMask> for Vec<u8> {
    fn from(mask: CandidateMask) -> Self {
        mask.to_binary()
    }
}

fn check_simplex<T: Real>(entries: &[T]) -> Result<()> {
    if entries.is_empty() {
        return Err(AlimError::EmptyInput);
    }
    let mut sum = T::zero();
    for &e in entries {
        if !e.is_finite() || e < T::zero() || e > T::one() + T::simplex_tolerance(1) {
            return Err(AlimError::InvalidProbability(format!(
                "entry {e} is outside [0, 1]"
            )));
        }
        sum += e;
    }
    if (sum - T::one()).abs() > T::simplex_tolerance(entries.len()) {
        return Err(AlimError::InvalidProbability(format!(
            "entries sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Model class probabilities `P(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector<T>(Vec<T>);

impl<T: Real> ProbabilityVector<T> {
    pub fn new(entries: Vec<T>) -> Result<Self> {
        check_simplex(&entries)?;
        Ok(Self(entries))
    }

    /// Wraps entries already known to be on the simplex (e.g. a softmax output).
    pub(crate) fn from_softmax(entries: Vec<T>) -> Self {
        debug_assert!(check_simplex(&entries).is_ok());
        Self(entries)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![T::one() / T::lit(len as f64); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.0)
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// Training target `w(x)`, a point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel<T>(Vec<T>);

impl<T: Real> PseudoLabel<T> {
    pub fn new(entries: Vec<T>) -> Result<Self> {
        check_simplex(&entries)?;
        Ok(Self(entries))
    }

    pub(crate) fn from_normalized(entries: Vec<T>) -> Self {
        debug_assert!(check_simplex(&entries).is_ok(), "{entries:?}");
        Self(entries)
    }

    pub fn onehot(len: usize, index: usize) -> Self {
        let mut entries = vec![T::zero(); len];
        entries[index] = T::one();
        Self(entries)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.0)
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

#[inline]
fn argmax_lowest<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Normalization applied to the weighted scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Normalization {
    /// Indicator of the largest weighted score.
    Onehot,
    /// `z_i^(1/k) / sum_j z_j^(1/k)`.
    Scale { k: f64 },
}

impl Normalization {
    pub fn scale(k: f64) -> Result<Self> {
        let norm = Self::Scale { k };
        norm.validate()?;
        Ok(norm)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Onehot => Ok(()),
            Self::Scale { k } if k.is_finite() && k > 0.0 => Ok(()),
            Self::Scale { k } => Err(AlimError::invalid(format!(
                "scale exponent K must be finite and > 0, got {k}"
            ))),
        }
    }

    pub fn apply<T: Real>(&self, z: &[T]) -> Result<PseudoLabel<T>> {
        match *self {
            Self::Onehot => onehot_normalize(z),
            Self::Scale { k } => scale_normalize(z, T::lit(k)),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Onehot => write!(f, "onehot"),
            Self::Scale { k } => write!(f, "scale:{k}"),
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = AlimError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("onehot") {
            return Ok(Self::Onehot);
        }
        if let Some(k) = s.strip_prefix("scale:") {
            let k: f64 = k
                .parse()
                .map_err(|_| AlimError::invalid(format!("cannot parse K in {s:?}")))?;
            return Self::scale(k);
        }
        Err(AlimError::invalid(format!(
            "normalization must be `onehot` or `scale:<K>`, got {s:?}"
        )))
    }
}

/// Reweighted mask `S~(x) = S(x) + lambda (1 - S(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMask<T>(Vec<T>);

impl<T: Real> WeightedMask<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    /// Hadamard product with `p`.
    pub fn apply(&self, p: &[T]) -> Vec<T> {
        self.0.iter().zip(p).map(|(&m, &pi)| m * pi).collect()
    }
}

pub fn check_lambda<T: Real>(lambda: T) -> Result<()> {
    if lambda >= T::zero() && lambda <= T::one() {
        Ok(())
    } else {
        Err(AlimError::InvalidLambda(lambda.to_f64().unwrap_or(f64::NAN)))
    }
}

pub fn weighted_mask<T: Real>(candidates: &CandidateMask, lambda: T) -> Result<WeightedMask<T>> {
    check_lambda(lambda)?;
    Ok(WeightedMask(
        candidates
            .as_slice()
            .iter()
            .map(|&s| if s { T::one() } else { lambda })
            .collect(),
    ))
}

fn check_scores<T: Real>(z: &[T]) -> Result<T> {
    if z.is_empty() {
        return Err(AlimError::EmptyInput);
    }
    let mut max = T::zero();
    for &v in z {
        if !(v >= T::zero()) || !v.is_finite() {
            return Err(AlimError::invalid(format!(
                "normalization input must be finite and nonnegative, found {v}"
            )));
        }
        max = max.max(v);
    }
    if max <= T::zero() {
        return Err(AlimError::AllZeroInput);
    }
    Ok(max)
}

/// Power normalization `z_i^(1/k) / sum_j z_j^(1/k)`.
///
/// Scores are divided by their maximum before the power is taken, so the
/// largest entry maps to exactly 1 and small `k` cannot underflow the
/// denominator. Zero scores stay exactly zero.
pub fn scale_normalize<T: Real>(z: &[T], k: T) -> Result<PseudoLabel<T>> {
    if !(k > T::zero()) || !k.is_finite() {
        return Err(AlimError::invalid(format!(
            "scale exponent K must be finite and > 0, got {k}"
        )));
    }
    let max = check_scores(z)?;
    let powered: Vec<T> = if k == T::one() {
        z.to_vec()
    } else {
        let inv_k = k.recip();
        z.iter().map(|&v| (v / max).powf(inv_k)).collect()
    };
    let total: T = powered.iter().copied().sum();
    Ok(PseudoLabel::from_normalized(
        powered.into_iter().map(|v| v / total).collect(),
    ))
}

/// Indicator of the largest score, lowest index on ties.
pub fn onehot_normalize<T: Real>(z: &[T]) -> Result<PseudoLabel<T>> {
    check_scores(z)?;
    Ok(PseudoLabel::onehot(z.len(), argmax_lowest(z)))
}

fn check_shapes<T>(p: &ProbabilityVector<T>, candidates: &CandidateMask) -> Result<()> {
    if p.0.len() != candidates.len() {
        return Err(AlimError::ShapeMismatch {
            expected: candidates.len(),
            actual: p.0.len(),
        });
    }
    Ok(())
}

/// `Normalize(S~(x) * P(x))` with `S~` built from `lambda`.
pub fn alim_pseudo_label<T: Real>(
    p: &ProbabilityVector<T>,
    candidates: &CandidateMask,
    lambda: T,
    norm: Normalization,
) -> Result<PseudoLabel<T>> {
    check_shapes(p, candidates)?;
    let scores = weighted_mask(candidates, lambda)?.apply(p.as_slice());
    norm.apply(&scores)
}

/// Risk-consistent PLL target `S_i P_i / sum_j S_j P_j`, the fully trusting baseline.
pub fn rc_pseudo_label<T: Real>(
    p: &ProbabilityVector<T>,
    candidates: &CandidateMask,
) -> Result<PseudoLabel<T>> {
    check_shapes(p, candidates)?;
    let masked: Vec<T> = p
        .as_slice()
        .iter()
        .zip(candidates.as_slice())
        .map(|(&pi, &s)| if s { pi } else { T::zero() })
        .collect();
    let total: T = masked.iter().copied().sum();
    if total <= T::zero() {
        return Err(AlimError::AllZeroInput);
    }
    Ok(PseudoLabel::from_normalized(
        masked.into_iter().map(|v| v / total).collect(),
    ))
}

/// `max_i S_i P_i / max_i (1 - S_i) P_i`.
///
/// Returns `+inf` when the candidate set is full or the non-candidate
/// maximum is zero, so such samples always rank as clean.
pub fn clean_noise_ratio<T: Real>(p: &ProbabilityVector<T>, candidates: &CandidateMask) -> T {
    debug_assert_eq!(p.len(), candidates.len());
    let mut cand = T::zero();
    let mut non_cand = T::zero();
    for (&pi, &s) in p.as_slice().iter().zip(candidates.as_slice()) {
        if s {
            cand = cand.max(pi);
        } else {
            non_cand = non_cand.max(pi);
        }
    }
    if non_cand > T::zero() {
        cand / non_cand
    } else {
        T::infinity()
    }
}

/// Log-domain scores `ln P_i - M (1 - S_i)`.
///
/// Equal, up to the additive constant `M`, to `ln P_i + M S_i`; written this
/// way so `M = +inf` (candidate set fully trusted) stays finite on candidates.
fn penalized_log_scores<T: Real>(p: &ProbabilityVector<T>, candidates: &CandidateMask, m: T) -> Vec<T> {
    p.as_slice()
        .iter()
        .zip(candidates.as_slice())
        .map(|(&pi, &s)| if s { pi.ln() } else { pi.ln() - m })
        .collect()
}

fn check_penalty<T: Real>(m: T) -> Result<()> {
    if m >= T::zero() {
        Ok(())
    } else {
        Err(AlimError::invalid(format!("penalty M must be >= 0, got {m}")))
    }
}

/// Maximizer of the linear (K = 0) pseudo-label objective with penalty `m`.
///
/// Equivalent to the one-hot ALIM label with `lambda = exp(-m)`.
pub fn closed_form_onehot<T: Real>(
    p: &ProbabilityVector<T>,
    candidates: &CandidateMask,
    m: T,
) -> Result<PseudoLabel<T>> {
    check_shapes(p, candidates)?;
    check_penalty(m)?;
    let scores = penalized_log_scores(p, candidates, m);
    if scores.iter().all(|s| *s == T::neg_infinity()) {
        return Err(AlimError::AllZeroInput);
    }
    Ok(PseudoLabel::onehot(scores.len(), argmax_lowest(&scores)))
}

/// Maximizer of the entropy-regularized pseudo-label objective with penalty
/// `m` and entropy weight `k > 0`, evaluated as a softmax of the penalized
/// log scores divided by `k`.
pub fn closed_form_scale<T: Real>(
    p: &ProbabilityVector<T>,
    candidates: &CandidateMask,
    m: T,
    k: T,
) -> Result<PseudoLabel<T>> {
    check_shapes(p, candidates)?;
    check_penalty(m)?;
    if !(k > T::zero()) || !k.is_finite() {
        return Err(AlimError::invalid(format!("K must be finite and > 0, got {k}")));
    }
    let scores: Vec<T> = penalized_log_scores(p, candidates, m)
        .into_iter()
        .map(|s| s / k)
        .collect();
    let top = scores.iter().copied().fold(T::neg_infinity(), T::max);
    if top == T::neg_infinity() {
        return Err(AlimError::AllZeroInput);
    }
    let exps: Vec<T> = scores.iter().map(|&s| (s - top).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(PseudoLabel::from_normalized(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}
