//! Brute-force witnesses for the closed-form pseudo-labels.
//!
//! Everything here works from the pseudo-label objective
//!
//! ```text
//! sum_i w_i ln P_i + M (sum_i w_i S_i - 1) - K sum_i w_i ln w_i
//! ```
//!
//! over the probability simplex and never calls the normalization code it
//! is checking, except as the value under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::pseudo_label::{
    alim_pseudo_label, clean_noise_ratio, closed_form_onehot, closed_form_scale, rc_pseudo_label, CandidateMask,
    Normalization, ProbabilityVector, PseudoLabel,
};
use crate::datagen::PartialSample;
use crate::error::{AlimError, Result};
use crate::lambda::{compute_corpus_lambda, corpus_ratios, nearest_rank};
use crate::scalar::Real;

/// Largest class count the grid oracle accepts.
pub const MAX_GRID_CLASSES: usize = 4;

/// Objective tolerance for "the grid never beats the closed form".
pub const DOMINANCE_TOLERANCE: f64 = 1e-9;

/// Pseudo-label objective; terms with `w_i = 0` contribute nothing.
pub fn objective_value<T: Real>(w: &[T], p: &ProbabilityVector<T>, candidates: &CandidateMask, m: T, k: T) -> T {
    let mut total = -m;
    for ((&wi, &pi), &s) in w.iter().zip(p.as_slice()).zip(candidates.as_slice()) {
        if wi == T::zero() {
            continue;
        }
        total += wi * pi.ln() - k * wi * wi.ln();
        if s {
            total += m * wi;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum<T> {
    pub label: PseudoLabel<T>,
    pub objective: T,
}

/// Per-coordinate objective contributions for `w_i = j / n`, `j = 0..=n`.
fn coordinate_tables<T: Real>(p: &ProbabilityVector<T>, candidates: &CandidateMask, m: T, k: T, n: usize) -> Vec<Vec<T>> {
    let nf = T::lit(n as f64);
    p.as_slice()
        .iter()
        .zip(candidates.as_slice())
        .map(|(&pi, &s)| {
            let log_p = pi.ln();
            let bonus = if s { m } else { T::zero() };
            (0..=n)
                .map(|j| {
                    if j == 0 {
                        return T::zero();
                    }
                    let w = T::lit(j as f64) / nf;
                    w * log_p + bonus * w - k * w * w.ln()
                })
                .collect()
        })
        .collect()
}

fn best_vertex<T: Real>(p: &ProbabilityVector<T>, candidates: &CandidateMask, m: T) -> (usize, T) {
    let c = p.len();
    let mut best = (0, T::neg_infinity());
    for j in 0..c {
        let value = objective_value(PseudoLabel::onehot(c, j).as_slice(), p, candidates, m, T::zero());
        if value > best.1 {
            best = (j, value);
        }
    }
    best
}

/// Exhaustive maximizer of the objective over the simplex grid with step
/// `resolution`. With `k = 0` the vertices are also compared exactly and
/// the best vertex is returned.
pub fn brute_force_argmax<T: Real>(
    p: &ProbabilityVector<T>,
    candidates: &CandidateMask,
    m: T,
    k: T,
    resolution: f64,
) -> Result<GridOptimum<T>> {
    let c = p.len();
    if c > MAX_GRID_CLASSES {
        return Err(AlimError::TooManyClasses(c));
    }
    if c != candidates.len() {
        return Err(AlimError::ShapeMismatch {
            expected: candidates.len(),
            actual: c,
        });
    }
    if !(resolution > 0.0 && resolution <= 1e-2) {
        return Err(AlimError::invalid(format!("grid resolution must lie in (0, 1e-2], got {resolution}")));
    }
    if !(m >= T::zero()) || !m.is_finite() || !(k >= T::zero()) || !k.is_finite() {
        return Err(AlimError::invalid("penalties M and K must be finite and >= 0"));
    }

    let n = (1.0 / resolution).round() as usize;
    let tables = coordinate_tables(p, candidates, m, k, n);
    let mut best_value = T::neg_infinity();
    let mut best = vec![0usize; c];
    match c {
        1 => best[0] = n,
        2 => {
            for a in 0..=n {
                let v = tables[0][a] + tables[1][n - a];
                if v > best_value {
                    best_value = v;
                    best = vec![a, n - a];
                }
            }
        }
        3 => {
            for a in 0..=n {
                for b in 0..=n - a {
                    let v = tables[0][a] + tables[1][b] + tables[2][n - a - b];
                    if v > best_value {
                        best_value = v;
                        best = vec![a, b, n - a - b];
                    }
                }
            }
        }
        _ => {
            for a in 0..=n {
                for b in 0..=n - a {
                    let ab = tables[0][a] + tables[1][b];
                    let rest = n - a - b;
                    for e in 0..=rest {
                        let v = ab + tables[2][e] + tables[3][rest - e];
                        if v > best_value {
                            best_value = v;
                            best = vec![a, b, e, rest - e];
                        }
                    }
                }
            }
        }
    }

    let nf = T::lit(n as f64);
    let mut label: Vec<T> = best.iter().map(|&j| T::lit(j as f64) / nf).collect();
    let mut objective = objective_value(&label, p, candidates, m, k);
    if k == T::zero() {
        let (j, value) = best_vertex(p, candidates, m);
        if value >= objective {
            label = PseudoLabel::onehot(c, j).into_inner();
            objective = value;
        }
    }
    Ok(GridOptimum {
        label: PseudoLabel::from_normalized(label),
        objective,
    })
}

/// One closed-form vs. oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub instance: String,
    pub oracle_label: Vec<f64>,
    pub oracle_objective: Option<f64>,
    pub closed_form_label: Vec<f64>,
    pub closed_form_objective: Option<f64>,
    /// Largest absolute entry-wise difference between the two labels.
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max)
}

fn to_f64s<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn describe(p: &ProbabilityVector<f64>, s: &CandidateMask, extra: &str) -> String {
    format!("P={:?} S={:?} {extra}", p.as_slice(), s.to_binary())
}

/// Dirichlet(1, ..., 1) draw.
pub fn random_probabilities<R: Rng + ?Sized>(rng: &mut R, c: usize) -> ProbabilityVector<f64> {
    let draws: Vec<f64> = (0..c).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = draws.iter().sum();
    ProbabilityVector::new(draws.into_iter().map(|x| x / total).collect()).expect("normalized draw")
}

/// Non-empty mask with independent fair bits.
pub fn random_mask<R: Rng + ?Sized>(rng: &mut R, c: usize) -> CandidateMask {
    loop {
        let bits: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
        if let Ok(mask) = CandidateMask::new(bits) {
            return mask;
        }
    }
}

/// Grid oracle vs. `closed_form_scale` on one instance. Passes when labels
/// and objective values agree within `10 * resolution` and the grid never
/// beats the closed form.
pub fn check_scale_instance(
    p: &ProbabilityVector<f64>,
    s: &CandidateMask,
    lambda: f64,
    k: f64,
    resolution: f64,
) -> Result<OracleReport> {
    let m = -lambda.ln();
    let closed = closed_form_scale(p, s, m, k)?;
    let closed_objective = objective_value(closed.as_slice(), p, s, m, k);
    let grid = brute_force_argmax(p, s, m, k, resolution)?;
    let deviation = max_abs_diff(closed.as_slice(), grid.label.as_slice());
    let tolerance = 10.0 * resolution;
    let passed = deviation < tolerance
        && (closed_objective - grid.objective).abs() < tolerance
        && grid.objective <= closed_objective + DOMINANCE_TOLERANCE;
    Ok(OracleReport {
        check: "closed_form_scale".into(),
        instance: describe(p, s, &format!("lambda={lambda} K={k} res={resolution}")),
        oracle_label: to_f64s(grid.label.as_slice()),
        oracle_objective: Some(grid.objective),
        closed_form_label: to_f64s(closed.as_slice()),
        closed_form_objective: Some(closed_objective),
        max_abs_deviation: deviation,
        tolerance,
        passed,
    })
}

/// Vertex oracle vs. `closed_form_onehot`; requires the selected index to match.
pub fn check_onehot_instance(p: &ProbabilityVector<f64>, s: &CandidateMask, m: f64) -> Result<OracleReport> {
    let closed = closed_form_onehot(p, s, m)?;
    let (vertex, value) = best_vertex(p, s, m);
    let oracle = PseudoLabel::<f64>::onehot(p.len(), vertex);
    let passed = closed.argmax() == vertex;
    Ok(OracleReport {
        check: "closed_form_onehot".into(),
        instance: describe(p, s, &format!("M={m}")),
        oracle_label: oracle.into_inner(),
        oracle_objective: Some(value),
        closed_form_objective: Some(objective_value(closed.as_slice(), p, s, m, 0.0)),
        max_abs_deviation: if passed { 0.0 } else { 1.0 },
        closed_form_label: closed.into_inner(),
        tolerance: 0.0,
        passed,
    })
}

/// True when the largest weighted score `(S_i + lambda (1 - S_i)) P_i` beats
/// the runner-up by a relative margin of `1e-9`.
pub fn has_unique_weighted_max(p: &ProbabilityVector<f64>, s: &CandidateMask, lambda: f64) -> bool {
    let mut scores: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(&pi, &si)| if si { pi } else { lambda * pi })
        .collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.len() < 2 || scores[0] - scores[1] > 1e-9 * scores[0]
}

pub fn verify_closed_form_scale(
    trials: usize,
    seed: u64,
    resolution: f64,
    classes: &[usize],
    lambdas: &[f64],
    ks: &[f64],
) -> Result<Vec<OracleReport>> {
    if classes.is_empty() || lambdas.is_empty() || ks.is_empty() {
        return Err(AlimError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|t| {
            let c = classes[t % classes.len()];
            let lambda = lambdas[(t / classes.len()) % lambdas.len()];
            let k = ks[(t / (classes.len() * lambdas.len())) % ks.len()];
            let p = random_probabilities(&mut rng, c);
            let s = random_mask(&mut rng, c);
            check_scale_instance(&p, &s, lambda, k, resolution)
        })
        .collect()
}

/// `trials` random instances with a unique weighted maximum, `M = -ln(lambda)`
/// with `lambda` uniform on (0, 1).
pub fn verify_closed_form_onehot(trials: usize, seed: u64, classes: &[usize]) -> Result<Vec<OracleReport>> {
    if classes.is_empty() {
        return Err(AlimError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(trials);
    while reports.len() < trials {
        let c = classes[reports.len() % classes.len()];
        let p = random_probabilities(&mut rng, c);
        let s = random_mask(&mut rng, c);
        let lambda: f64 = rng.random_range(1e-3..1.0);
        if !has_unique_weighted_max(&p, &s, lambda) {
            continue;
        }
        reports.push(check_onehot_instance(&p, &s, -lambda.ln())?);
    }
    Ok(reports)
}

/// Closed forms vs. the normalization path with `lambda = exp(-M)`:
/// identical one-hot index and Scale labels within `1e-12`.
pub fn verify_closed_form_agreement(trials: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(2 * trials);
    for _ in 0..trials {
        let c = rng.random_range(2..=10);
        let p = random_probabilities(&mut rng, c);
        let s = random_mask(&mut rng, c);
        let m: f64 = rng.random_range(0.0..8.0);
        let k: f64 = rng.random_range(0.2..3.0);
        let lambda = (-m).exp();

        let closed = closed_form_scale(&p, &s, m, k)?;
        let direct = alim_pseudo_label(&p, &s, lambda, Normalization::Scale { k })?;
        let deviation = max_abs_diff(closed.as_slice(), direct.as_slice());
        reports.push(OracleReport {
            check: "scale_agreement".into(),
            instance: describe(&p, &s, &format!("M={m} K={k}")),
            oracle_label: to_f64s(direct.as_slice()),
            oracle_objective: None,
            closed_form_label: to_f64s(closed.as_slice()),
            closed_form_objective: None,
            max_abs_deviation: deviation,
            tolerance: 1e-12,
            passed: deviation < 1e-12,
        });

        if has_unique_weighted_max(&p, &s, lambda) {
            let closed = closed_form_onehot(&p, &s, m)?;
            let direct = alim_pseudo_label(&p, &s, lambda, Normalization::Onehot)?;
            let deviation = max_abs_diff(closed.as_slice(), direct.as_slice());
            reports.push(OracleReport {
                check: "onehot_agreement".into(),
                instance: describe(&p, &s, &format!("M={m}")),
                oracle_label: direct.into_inner(),
                oracle_objective: None,
                closed_form_label: closed.into_inner(),
                closed_form_objective: None,
                max_abs_deviation: deviation,
                tolerance: 0.0,
                passed: deviation == 0.0,
            });
        }
    }
    Ok(reports)
}

/// `lambda = 0`, Scale `K = 1` labels vs. `S_i P_i / sum_j S_j P_j`, with
/// class counts alternating between 3 and 10.
pub fn verify_rc_degeneration(trials: usize, seed: u64) -> Result<Vec<OracleReport>> {
    if trials == 0 {
        return Err(AlimError::invalid("trials must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|t| {
            let c = if t % 2 == 0 { 3 } else { 10 };
            let p = random_probabilities(&mut rng, c);
            let s = random_mask(&mut rng, c);
            let alim = alim_pseudo_label(&p, &s, 0.0, Normalization::Scale { k: 1.0 })?;
            let rc = rc_pseudo_label(&p, &s)?;
            let deviation = max_abs_diff(alim.as_slice(), rc.as_slice());
            Ok(OracleReport {
                check: "rc_degeneration".into(),
                instance: describe(&p, &s, ""),
                oracle_label: rc.into_inner(),
                oracle_objective: None,
                closed_form_label: alim.into_inner(),
                closed_form_objective: None,
                max_abs_deviation: deviation,
                tolerance: 1e-15,
                passed: deviation < 1e-15,
            })
        })
        .collect()
}

/// Outcome of checking the quantile rule on a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub check: String,
    pub n: usize,
    pub eta: f64,
    pub lambda: f64,
    /// `lambda` differs from the raw quantile because of clamping to [0, 1].
    pub clamped: bool,
    /// Samples with ratio <= lambda.
    pub flagged: usize,
    pub flagged_fraction: f64,
    /// Samples whose weighted candidate and non-candidate maxima tie within
    /// a few ulps (the quantile sample itself is always one). Their one-hot
    /// label follows the lowest-index rule, so they are only required to
    /// have a ratio within rounding of lambda.
    pub boundary_ties: usize,
    /// Non-tied samples where `ratio <= lambda` disagrees with the one-hot
    /// label leaving the candidate set.
    pub equivalence_violations: usize,
    pub fraction_ok: bool,
    pub passed: bool,
}

/// Checks on every sample that `ratio <= lambda` holds exactly when the
/// one-hot pseudo-label falls outside the candidate set, and that the
/// flagged fraction is within `1/N` of `eta` when `lambda` was not clamped.
pub fn verify_quantile_logic<T: Real>(
    outputs: &[ProbabilityVector<T>],
    corpus: &[PartialSample<T>],
    eta: f64,
    lambda: T,
) -> Result<QuantileReport> {
    let ratios = corpus_ratios(outputs, corpus)?;
    let n = ratios.len();
    if n == 0 {
        return Err(AlimError::EmptyInput);
    }
    let tie_window = T::epsilon() * T::lit(8.0);

    let (mut flagged, mut ties, mut violations) = (0usize, 0usize, 0usize);
    for ((p, sample), &ratio) in outputs.iter().zip(corpus).zip(&ratios) {
        let is_flagged = ratio <= lambda;
        flagged += usize::from(is_flagged);

        let mut cand = T::zero();
        let mut non_cand = T::zero();
        for (&pi, &s) in p.as_slice().iter().zip(sample.candidates.as_slice()) {
            if s {
                cand = cand.max(pi);
            } else {
                non_cand = non_cand.max(pi);
            }
        }
        let weighted = lambda * non_cand;
        if (weighted - cand).abs() <= tie_window * cand.max(weighted) {
            // A tie must sit on the boundary from the ratio's side as well.
            ties += 1;
            let slack = T::lit(4.0) * tie_window * ratio.max(lambda);
            violations += usize::from((ratio - lambda).abs() > slack);
            continue;
        }
        let label = alim_pseudo_label(p, &sample.candidates, lambda, Normalization::Onehot)?;
        let outside = !sample.candidates.contains(label.argmax());
        violations += usize::from(outside != is_flagged);
    }

    let k = nearest_rank(eta, n);
    let clamped = if k == 0 {
        false
    } else {
        let mut sorted = ratios.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("ratios are never NaN"));
        sorted[k - 1] != lambda
    };
    let flagged_fraction = flagged as f64 / n as f64;
    let fraction_ok = clamped || (flagged_fraction - eta).abs() <= 1.0 / n as f64 + 1e-12;
    Ok(QuantileReport {
        check: "quantile".into(),
        n,
        eta,
        lambda: lambda.as_f64(),
        clamped,
        flagged,
        flagged_fraction,
        boundary_ties: ties,
        equivalence_violations: violations,
        fraction_ok,
        passed: fraction_ok && violations == 0,
    })
}

/// Random corpus of `n` samples over `c` classes with candidate sets drawn
/// by the flip protocol (`q`) and Dirichlet model outputs.
pub fn random_quantile_instance(
    n: usize,
    c: usize,
    q: f64,
    seed: u64,
) -> (Vec<ProbabilityVector<f64>>, Vec<PartialSample<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outputs = Vec::with_capacity(n);
    let mut corpus = Vec::with_capacity(n);
    for _ in 0..n {
        outputs.push(random_probabilities(&mut rng, c));
        let truth = rng.random_range(0..c);
        let bits: Vec<bool> = (0..c).map(|l| l == truth || rng.random_bool(q)).collect();
        corpus.push(PartialSample {
            features: Vec::new(),
            candidates: CandidateMask::new(bits).expect("truth is a candidate"),
            truth: Some(truth),
            is_noisy: None,
        });
    }
    (outputs, corpus)
}

/// Adaptive lambda on a random corpus, then [`verify_quantile_logic`].
pub fn check_quantile(n: usize, eta: f64, seed: u64) -> Result<QuantileReport> {
    let (outputs, corpus) = random_quantile_instance(n, 10, 0.3, seed);
    let lambda = compute_corpus_lambda(&outputs, &corpus, eta)?;
    verify_quantile_logic(&outputs, &corpus, eta, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub grid_resolution: f64,
    pub grid_classes: Vec<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            grid_resolution: 1e-2,
            grid_classes: vec![2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<OracleReport>,
    pub quantile: Vec<QuantileReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed) && self.quantile.iter().all(|q| q.passed)
    }

    pub fn failures(&self) -> usize {
        self.reports.iter().filter(|r| !r.passed).count() + self.quantile.iter().filter(|q| !q.passed).count()
    }
}

/// Every check with `trials` instances each (quantile checks use
/// `max(trials, 100)` samples per noise level).
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    if config.trials == 0 {
        return Err(AlimError::invalid("trials must be >= 1"));
    }
    if let Some(&c) = config.grid_classes.iter().find(|&&c| !(2..=MAX_GRID_CLASSES).contains(&c)) {
        return Err(if c > MAX_GRID_CLASSES {
            AlimError::TooManyClasses(c)
        } else {
            AlimError::invalid(format!("grid class count must be >= 2, got {c}"))
        });
    }
    let seed = config.seed;
    let mut reports = verify_closed_form_scale(
        config.trials,
        seed,
        config.grid_resolution,
        &config.grid_classes,
        &[0.1, 0.5, 0.9],
        &[0.5, 1.0, 2.0],
    )?;
    reports.extend(verify_closed_form_onehot(config.trials, seed.wrapping_add(1), &config.grid_classes)?);
    reports.extend(verify_closed_form_agreement(config.trials, seed.wrapping_add(2))?);
    reports.extend(verify_rc_degeneration(config.trials, seed.wrapping_add(3))?);

    let n = config.trials.max(100);
    let quantile = [0.1, 0.2, 0.3]
        .iter()
        .enumerate()
        .map(|(i, &eta)| check_quantile(n, eta, seed.wrapping_add(4 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { reports, quantile })
}

/// Ratio-based check that a sample is flagged, exposed for diagnostics.
pub fn is_flagged<T: Real>(p: &ProbabilityVector<T>, candidates: &CandidateMask, lambda: T) -> bool {
    clean_noise_ratio(p, candidates) <= lambda
}
