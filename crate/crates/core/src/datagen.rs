//! Synthetic partially-labeled corpora with ambiguity and label noise.
//!
//! Corruption follows the standard noisy-PLL protocol: every incorrect label
//! joins the candidate set independently with probability `q`, then with
//! probability `eta` the sample is made noisy by moving a uniformly chosen
//! non-candidate label in and the true label out.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pseudo_label::CandidateMask;
use crate::error::{AlimError, Result};
use crate::scalar::Real;

/// Stream ids used to derive independent generators from one seed.
const BLOB_STREAM: u64 = 0;

/// A fully labeled point before corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint<T> {
    pub features: Vec<T>,
    pub truth: usize,
}

/// A training sample as seen by the learner, plus evaluation-only metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSample<T> {
    pub features: Vec<T>,
    pub candidates: CandidateMask,
    /// Hidden ground truth, kept for evaluation only.
    pub truth: Option<usize>,
    /// Whether the noise step evicted the ground truth. Evaluation only.
    pub is_noisy: Option<bool>,
}

impl<T: Real> PartialSample<T> {
    /// A clean, unambiguous sample (candidate set = `{truth}`).
    pub fn exact(point: &LabeledPoint<T>, num_classes: usize) -> Result<Self> {
        Ok(Self {
            features: point.features.clone(),
            candidates: CandidateMask::singleton(num_classes, point.truth)?,
            truth: Some(point.truth),
            is_noisy: Some(false),
        })
    }

    /// Checks the truth-membership invariant against `is_noisy`.
    pub fn check_consistency(&self) -> Result<()> {
        if let (Some(truth), Some(noisy)) = (self.truth, self.is_noisy) {
            if truth >= self.candidates.len() {
                return Err(AlimError::invalid(format!(
                    "truth {truth} out of range for {} classes",
                    self.candidates.len()
                )));
            }
            if self.candidates.contains(truth) == noisy {
                return Err(AlimError::InvalidMask(format!(
                    "truth {truth} membership contradicts is_noisy={noisy}"
                )));
            }
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(AlimError::invalid("features must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub c: usize,
    /// Ambiguity level: flip probability of each incorrect label.
    pub q: f64,
    /// Noise level: probability that a sample loses its true label.
    pub eta: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(c: usize, q: f64, eta: f64, seed: u64) -> Result<Self> {
        let spec = Self { c, q, eta, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(AlimError::invalid(format!("need at least 2 classes, got {}", self.c)));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(AlimError::invalid(format!("q must lie in [0, 1], got {}", self.q)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(AlimError::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    /// Expected candidate-set size, `1 + q (c - 1)`. The noise swap preserves size.
    pub fn expected_candidate_size(&self) -> f64 {
        1.0 + self.q * (self.c - 1) as f64
    }

    /// Expected noisy fraction once full candidate sets (which cannot be
    /// noised) are excluded: `eta (1 - q^(c-1))`.
    pub fn expected_noise_fraction(&self) -> f64 {
        self.eta * (1.0 - self.q.powi(self.c as i32 - 1))
    }
}

/// Generator for sample `index` of a corpus seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Independent seed for a named sub-task (SplitMix64 finalizer of `seed ^ tag`).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Class centers at unit distance scale: standard basis vectors when
/// `d >= c`, points on the unit circle in the first two coordinates when
/// `2 <= d < c`, and evenly spaced points on `[-1, 1]` when `d == 1`.
pub fn class_means(c: usize, d: usize) -> Vec<Vec<f64>> {
    (0..c)
        .map(|k| {
            let mut mean = vec![0.0; d];
            if d >= c {
                mean[k] = 1.0;
            } else if d >= 2 {
                let angle = std::f64::consts::TAU * k as f64 / c as f64;
                mean[0] = angle.cos();
                mean[1] = angle.sin();
            } else {
                mean[0] = -1.0 + 2.0 * k as f64 / (c - 1) as f64;
            }
            mean
        })
        .collect()
}

/// `n` isotropic Gaussian points, point `i` belonging to class `i mod c`.
pub fn make_gaussian_blobs<T: Real>(
    n: usize,
    c: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<LabeledPoint<T>>> {
    if c < 2 {
        return Err(AlimError::invalid(format!("need at least 2 classes, got {c}")));
    }
    if n < c {
        return Err(AlimError::invalid(format!("n = {n} is smaller than c = {c}")));
    }
    if d == 0 {
        return Err(AlimError::invalid("dimension must be positive"));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(AlimError::invalid(format!("spread must be > 0, got {spread}")));
    }
    let means = class_means(c, d);
    let noise = Normal::new(0.0, spread).map_err(|e| AlimError::invalid(e.to_string()))?;
    let mut rng = sample_rng(seed, BLOB_STREAM);
    Ok((0..n)
        .map(|i| {
            let truth = i % c;
            let features = means[truth]
                .iter()
                .map(|&m| T::lit(m + noise.sample(&mut rng)))
                .collect();
            LabeledPoint { features, truth }
        })
        .collect())
}

/// Applies ambiguity flips and noise swaps. Sample `i` draws from its own
/// stream `(spec.seed, i)`.
///
/// A sample picked for noise whose candidate set is already full has no
/// label to swap in; it is left clean.
pub fn corrupt<T: Real>(points: &[LabeledPoint<T>], spec: &CorruptionSpec) -> Result<Vec<PartialSample<T>>> {
    spec.validate()?;
    points
        .iter()
        .enumerate()
        .map(|(index, point)| {
            if point.truth >= spec.c {
                return Err(AlimError::invalid(format!(
                    "point {index} has truth {} but c = {}",
                    point.truth, spec.c
                )));
            }
            let mut rng = sample_rng(spec.seed, index as u64);
            let mut bits = vec![false; spec.c];
            bits[point.truth] = true;
            for (label, bit) in bits.iter_mut().enumerate() {
                if label != point.truth && rng.random_bool(spec.q) {
                    *bit = true;
                }
            }

            let mut is_noisy = false;
            if rng.random_bool(spec.eta) {
                let outside: Vec<usize> = (0..spec.c).filter(|&l| !bits[l]).collect();
                if let Some(&swap_in) = outside.choose(&mut rng) {
                    bits[swap_in] = true;
                    bits[point.truth] = false;
                    is_noisy = true;
                }
            }

            Ok(PartialSample {
                features: point.features.clone(),
                candidates: CandidateMask::new(bits)?,
                truth: Some(point.truth),
                is_noisy: Some(is_noisy),
            })
        })
        .collect()
}

/// Realized corpus statistics against the corruption protocol's expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n: usize,
    pub c: usize,
    pub mean_candidate_size: f64,
    pub expected_candidate_size: f64,
    /// Standard error of the mean candidate size.
    pub candidate_size_sigma: f64,
    pub noise_fraction: f64,
    pub expected_noise_fraction: f64,
    pub noise_sigma: f64,
    pub class_counts: Vec<usize>,
    pub candidate_size_ok: bool,
    pub noise_fraction_ok: bool,
}

impl CorpusStats {
    pub fn within_bounds(&self) -> bool {
        self.candidate_size_ok && self.noise_fraction_ok
    }
}

fn within_three_sigma(value: f64, expected: f64, sigma: f64) -> bool {
    (value - expected).abs() <= 3.0 * sigma + 1e-12
}

pub fn validate_corpus<T: Real>(samples: &[PartialSample<T>], spec: &CorruptionSpec) -> Result<CorpusStats> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(AlimError::EmptyInput);
    }
    let n = samples.len();
    let mut class_counts = vec![0usize; spec.c];
    let mut total_size = 0usize;
    let mut noisy = 0usize;
    for (index, s) in samples.iter().enumerate() {
        let truth = s.truth.ok_or(AlimError::MissingTruth { index })?;
        if s.candidates.len() != spec.c {
            return Err(AlimError::ShapeMismatch {
                expected: spec.c,
                actual: s.candidates.len(),
            });
        }
        s.check_consistency()?;
        *class_counts
            .get_mut(truth)
            .ok_or_else(|| AlimError::invalid(format!("truth {truth} out of range")))? += 1;
        total_size += s.candidates.size();
        let is_noisy = s.is_noisy.unwrap_or(!s.candidates.contains(truth));
        noisy += usize::from(is_noisy);
    }

    let nf = n as f64;
    let mean_candidate_size = total_size as f64 / nf;
    let expected_candidate_size = spec.expected_candidate_size();
    let candidate_size_sigma = (spec.q * (1.0 - spec.q) * (spec.c - 1) as f64 / nf).sqrt();
    let noise_fraction = noisy as f64 / nf;
    let expected_noise_fraction = spec.expected_noise_fraction();
    let noise_sigma = (expected_noise_fraction * (1.0 - expected_noise_fraction) / nf).sqrt();

    Ok(CorpusStats {
        n,
        c: spec.c,
        mean_candidate_size,
        expected_candidate_size,
        candidate_size_sigma,
        noise_fraction,
        expected_noise_fraction,
        noise_sigma,
        class_counts,
        candidate_size_ok: within_three_sigma(mean_candidate_size, expected_candidate_size, candidate_size_sigma),
        noise_fraction_ok: within_three_sigma(noise_fraction, expected_noise_fraction, noise_sigma),
    })
}
