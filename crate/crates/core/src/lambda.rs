//! Global trust coefficient selection.
//!
//! The adaptive policy sets `lambda` to the nearest-rank `eta`-quantile of
//! the per-sample clean/noise ratios, where `eta` is the (given) noise level
//! of the corpus. Samples whose ratio falls at or below `lambda` are the ones
//! whose one-hot pseudo-label leaves the candidate set.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::pseudo_label::{clean_noise_ratio, ProbabilityVector};
use crate::datagen::PartialSample;
use crate::error::{AlimError, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LambdaPolicy {
    /// Constant `lambda` for every post-warm-up epoch.
    Fixed { value: f64 },
    /// `lambda` recomputed each epoch from the estimated noise level `eta`.
    Adaptive { eta: f64 },
}

impl LambdaPolicy {
    pub fn fixed(value: f64) -> Result<Self> {
        let policy = Self::Fixed { value };
        policy.validate()?;
        Ok(policy)
    }

    pub fn adaptive(eta: f64) -> Result<Self> {
        let policy = Self::Adaptive { eta };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Fixed { value } if !(0.0..=1.0).contains(&value) => {
                Err(AlimError::InvalidLambda(value))
            }
            Self::Adaptive { eta } => check_eta(eta),
            Self::Fixed { .. } => Ok(()),
        }
    }

    /// `lambda` in force before any adaptive update.
    pub fn initial_value(&self) -> f64 {
        match *self {
            Self::Fixed { value } => value,
            Self::Adaptive { .. } => 0.0,
        }
    }
}

impl std::fmt::Display for LambdaPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fixed { value } => write!(f, "fixed:{value}"),
            Self::Adaptive { eta } => write!(f, "adaptive:{eta}"),
        }
    }
}

impl std::str::FromStr for LambdaPolicy {
    type Err = AlimError;

    fn from_str(s: &str) -> Result<Self> {
        let (mode, value) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| AlimError::invalid(format!("expected `fixed:<v>` or `adaptive:<eta>`, got {s:?}")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| AlimError::invalid(format!("cannot parse number in {s:?}")))?;
        match mode {
            "fixed" => Self::fixed(value),
            "adaptive" => Self::adaptive(value),
            _ => Err(AlimError::invalid(format!(
                "unknown lambda mode {mode:?}, expected `fixed` or `adaptive`"
            ))),
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(AlimError::invalid(format!("eta must lie in [0, 1], got {eta}")))
    }
}

/// Rank `k = ceil(eta * n)` of the nearest-rank quantile (1-based, 0 means "none").
///
/// A relative slack of 1e-12 keeps products such as `0.3 * 1000` from
/// rounding up to the next rank.
pub fn nearest_rank(eta: f64, n: usize) -> usize {
    let exact = eta * n as f64;
    let k = (exact - exact.abs() * 1e-12).ceil();
    (k.max(0.0) as usize).min(n)
}

fn cmp_ratio<T: Real>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).expect("ratios are never NaN")
}

/// Nearest-rank `eta`-quantile of `ratios`, clamped to `[0, 1]`.
pub fn adaptive_lambda<T: Real>(ratios: &[T], eta: f64) -> Result<T> {
    if ratios.is_empty() {
        return Err(AlimError::EmptyInput);
    }
    check_eta(eta)?;
    if ratios.iter().any(|r| r.is_nan()) {
        return Err(AlimError::invalid("ratio list contains NaN"));
    }
    let k = nearest_rank(eta, ratios.len());
    if k == 0 {
        return Ok(T::zero());
    }
    let mut scratch = ratios.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, cmp_ratio);
    Ok(kth.max(T::zero()).min(T::one()))
}

/// Clean/noise ratio of every sample under the given model outputs.
pub fn corpus_ratios<T: Real>(
    outputs: &[ProbabilityVector<T>],
    corpus: &[PartialSample<T>],
) -> Result<Vec<T>> {
    if outputs.len() != corpus.len() {
        return Err(AlimError::ShapeMismatch {
            expected: corpus.len(),
            actual: outputs.len(),
        });
    }
    outputs
        .iter()
        .zip(corpus)
        .map(|(p, s)| {
            if p.len() != s.candidates.len() {
                return Err(AlimError::ShapeMismatch {
                    expected: s.candidates.len(),
                    actual: p.len(),
                });
            }
            Ok(clean_noise_ratio(p, &s.candidates))
        })
        .collect()
}

/// Adaptive `lambda` for a whole corpus: ratios from `outputs`, then the `eta`-quantile.
pub fn compute_corpus_lambda<T: Real>(
    outputs: &[ProbabilityVector<T>],
    corpus: &[PartialSample<T>],
    eta: f64,
) -> Result<T> {
    adaptive_lambda(&corpus_ratios(outputs, corpus)?, eta)
}

/// Probability that a clean sample's ratio exceeds a noisy sample's ratio,
/// counting ties as one half (the Mann-Whitney AUC). `None` if either group
/// is empty.
pub fn separation_auc<T: Real>(clean: &[T], noisy: &[T]) -> Option<f64> {
    if clean.is_empty() || noisy.is_empty() {
        return None;
    }
    let mut all: Vec<(T, bool)> = clean
        .iter()
        .map(|&r| (r, true))
        .chain(noisy.iter().map(|&r| (r, false)))
        .collect();
    all.sort_by(|a, b| cmp_ratio(&a.0, &b.0));

    // Sum of midranks of the clean group.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let clean_in_block = all[i..j].iter().filter(|(_, c)| *c).count();
        rank_sum += midrank * clean_in_block as f64;
        i = j;
    }
    let n_clean = clean.len() as f64;
    let n_noisy = noisy.len() as f64;
    let u = rank_sum - n_clean * (n_clean + 1.0) / 2.0;
    Some(u / (n_clean * n_noisy))
}

/// Ratio summary split by the hidden noise flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    /// Mean over clean samples with a finite ratio.
    pub clean_mean: Option<f64>,
    /// Mean over noisy samples with a finite ratio.
    pub noisy_mean: Option<f64>,
    /// Samples with a full candidate set (ratio `+inf`).
    pub infinite: usize,
    pub auc: Option<f64>,
}

pub fn ratio_stats<T: Real>(ratios: &[T], corpus: &[PartialSample<T>]) -> Option<RatioStats> {
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for (&r, s) in ratios.iter().zip(corpus) {
        match s.is_noisy? {
            true => noisy.push(r),
            false => clean.push(r),
        }
    }
    let finite_mean = |v: &[T]| {
        let finite: Vec<f64> = v.iter().filter(|r| r.is_finite()).map(|r| r.as_f64()).collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    };
    Some(RatioStats {
        clean_mean: finite_mean(&clean),
        noisy_mean: finite_mean(&noisy),
        infinite: ratios.iter().filter(|r| r.is_infinite()).count(),
        auc: separation_auc(&clean, &noisy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_label::CandidateMask;

    #[test]
    fn quantile_examples() {
        assert_eq!(adaptive_lambda(&[0.5, 1.2, 2.5, 4.0], 0.25).unwrap(), 0.5);
        assert_eq!(adaptive_lambda(&[4.0, 0.5, 2.5, 1.2], 0.0).unwrap(), 0.0);
        assert_eq!(adaptive_lambda(&[3.0, 0.9, 0.4, 0.2], 0.5).unwrap(), 0.4);
        assert!(matches!(
            adaptive_lambda::<f64>(&[], 0.5),
            Err(AlimError::EmptyInput)
        ));
        assert!(adaptive_lambda(&[0.1], 1.5).is_err());
    }

    #[test]
    fn quantile_clamps_to_unit_interval() {
        assert_eq!(adaptive_lambda(&[2.0, 3.0], 0.5).unwrap(), 1.0);
        assert_eq!(adaptive_lambda(&[f64::INFINITY; 3], 0.3).unwrap(), 1.0);
    }

    #[test]
    fn nearest_rank_is_exact_on_round_products() {
        assert_eq!(nearest_rank(0.3, 1000), 300);
        assert_eq!(nearest_rank(0.1, 1000), 100);
        assert_eq!(nearest_rank(0.2, 1000), 200);
        assert_eq!(nearest_rank(0.25, 4), 1);
        assert_eq!(nearest_rank(0.26, 4), 2);
        assert_eq!(nearest_rank(0.0, 10), 0);
        assert_eq!(nearest_rank(1.0, 10), 10);
    }

    fn sample(p_mask: &[u8]) -> PartialSample<f64> {
        PartialSample {
            features: vec![0.0],
            candidates: CandidateMask::from_binary(p_mask).unwrap(),
            truth: None,
            is_noisy: None,
        }
    }

    #[test]
    fn corpus_lambda_examples() {
        let full = vec![sample(&[1, 1]), sample(&[1, 1])];
        let outputs = vec![ProbabilityVector::new(vec![0.5, 0.5]).unwrap(); 2];
        assert_eq!(compute_corpus_lambda(&outputs, &full, 0.3).unwrap(), 1.0);

        // ratios 0.3 and 3.0
        let corpus = vec![sample(&[1, 0]), sample(&[1, 0])];
        let outputs = vec![
            ProbabilityVector::new(vec![0.3 / 1.3, 1.0 / 1.3]).unwrap(),
            ProbabilityVector::new(vec![0.75, 0.25]).unwrap(),
        ];
        let lambda = compute_corpus_lambda(&outputs, &corpus, 0.5).unwrap();
        assert!((lambda - 0.3).abs() < 1e-15);
        assert_eq!(compute_corpus_lambda(&outputs, &corpus, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn auc_counts_ties_as_half() {
        assert_eq!(separation_auc(&[3.0, 4.0], &[1.0, 2.0]), Some(1.0));
        assert_eq!(separation_auc(&[1.0, 2.0], &[3.0, 4.0]), Some(0.0));
        assert_eq!(separation_auc(&[1.0], &[1.0]), Some(0.5));
        assert_eq!(
            separation_auc(&[f64::INFINITY, 2.0], &[f64::INFINITY, 1.0]),
            Some(0.625)
        );
        assert_eq!(separation_auc::<f64>(&[], &[1.0]), None);
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let clean = [0.2, 1.5, 1.5, 3.0, 0.9];
        let noisy = [0.1, 1.5, 0.8];
        let mut wins = 0.0;
        for c in clean {
            for n in noisy {
                wins += if c > n { 1.0 } else if c == n { 0.5 } else { 0.0 };
            }
        }
        let expected = wins / 15.0;
        assert!((separation_auc(&clean, &noisy).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn policy_parses_flag_syntax() {
        assert_eq!(
            "fixed:0".parse::<LambdaPolicy>().unwrap(),
            LambdaPolicy::Fixed { value: 0.0 }
        );
        assert_eq!(
            "adaptive:0.3".parse::<LambdaPolicy>().unwrap(),
            LambdaPolicy::Adaptive { eta: 0.3 }
        );
        assert!("fixed:1.5".parse::<LambdaPolicy>().is_err());
        assert!("manual:0.2".parse::<LambdaPolicy>().is_err());
        assert!("adaptive".parse::<LambdaPolicy>().is_err());
    }
}
