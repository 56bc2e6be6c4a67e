//! Acceptance gate. Every criterion prints one `PASS`/`FAIL` line to stderr
//! (written directly so it shows up even when output is captured) and then
//! asserts on the same condition.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use alim::datagen::{corrupt, make_gaussian_blobs, validate_corpus, CorruptionSpec};
use alim::model::softmax;
use alim::oracle::{
    check_quantile, random_mask, random_probabilities, verify_closed_form_onehot, verify_closed_form_scale,
    verify_quantile_logic, verify_rc_degeneration,
};
use alim::trainer::{mixup_pair, predict_all, sample_mix_alpha};
use alim::{
    alim_pseudo_label, compute_corpus_lambda, run_experiment, Architecture, LabelRule, LambdaPolicy, MixupConfig,
    Normalization, PartialSample, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[criterion {id:>2}] {verdict} {name}: {detail}");
}

#[test]
fn criterion_01_closed_form_scale_matches_grid_oracle() {
    let start = Instant::now();
    // 108 instances: every (c, lambda, K) combination four times.
    let reports =
        verify_closed_form_scale(108, 101, 1e-3, &[2, 3, 4], &[0.1, 0.5, 0.9], &[0.5, 1.0, 2.0]).unwrap();
    let elapsed = start.elapsed();
    let worst_label = reports.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max);
    let worst_objective = reports
        .iter()
        .map(|r| (r.oracle_objective.unwrap() - r.closed_form_objective.unwrap()).abs())
        .fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed)
        && worst_label < 1e-2
        && worst_objective < 1e-2
        && elapsed < Duration::from_secs(120);
    report(
        1,
        "closed-form Scale vs grid oracle",
        passed,
        &format!(
            "{} instances, max label diff {worst_label:.2e}, max objective diff {worst_objective:.2e}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_02_onehot_matches_vertex_oracle() {
    let classes: Vec<usize> = (2..=10).collect();
    let reports = verify_closed_form_onehot(1000, 202, &classes).unwrap();
    let agree = reports.iter().filter(|r| r.passed).count();
    let passed = reports.len() == 1000 && agree == 1000;
    report(2, "one-hot closed form vs vertex oracle", passed, &format!("{agree}/1000 agree"));
    assert!(passed);
}

fn blob_corpus(n: usize, spread: f64, q: f64, eta: f64, seed: u64) -> Vec<PartialSample<f64>> {
    let pts = make_gaussian_blobs(n, 4, 2, spread, seed).unwrap();
    corrupt(&pts, &CorruptionSpec::new(4, q, eta, seed.wrapping_add(7)).unwrap()).unwrap()
}

fn clean_test_set(n: usize, spread: f64, seed: u64) -> Vec<PartialSample<f64>> {
    make_gaussian_blobs(n, 4, 2, spread, seed)
        .unwrap()
        .iter()
        .map(|p| PartialSample::exact(p, 4).unwrap())
        .collect()
}

#[test]
fn criterion_03_rc_degeneration() {
    let reports = verify_rc_degeneration(1000, 303).unwrap();
    let worst = reports.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max);
    let labels_ok = reports.iter().all(|r| r.passed);

    let train = blob_corpus(400, 0.5, 0.3, 0.3, 31);
    let test = clean_test_set(100, 0.5, 32);
    let alim_cfg = TrainConfig {
        e0: 10,
        epochs: 30,
        lambda_policy: LambdaPolicy::Fixed { value: 0.0 },
        norm: Normalization::Scale { k: 1.0 },
        mixup: MixupConfig {
            enabled: true,
            ..MixupConfig::default()
        },
        seed: 33,
        ..TrainConfig::default()
    };
    let rc_cfg = TrainConfig {
        rule: LabelRule::Rc,
        ..alim_cfg.clone()
    };
    let alim_run = run_experiment(&train, &test, &alim_cfg).unwrap();
    let rc_run = run_experiment(&train, &test, &rc_cfg).unwrap();
    let trajectory_ok = alim_run.metrics == rc_run.metrics && alim_run.model == rc_run.model;

    let passed = labels_ok && worst < 1e-15 && trajectory_ok;
    report(
        3,
        "RC degeneration",
        passed,
        &format!("max label deviation {worst:.1e} over 1000 instances; training trajectories identical: {trajectory_ok}"),
    );
    assert!(passed);
}

#[test]
fn criterion_04_quantile_property() {
    let mut lines = Vec::new();
    let mut passed = true;
    for (i, eta) in [0.1, 0.2, 0.3].into_iter().enumerate() {
        let r = check_quantile(1000, eta, 400 + i as u64).unwrap();
        passed &= r.passed && !r.clamped;
        lines.push(format!(
            "random eta={eta}: flagged {:.3}, violations {}, ties {}",
            r.flagged_fraction, r.equivalence_violations, r.boundary_ties
        ));
    }

    // Same check on the outputs of a trained model.
    let train = blob_corpus(1000, 0.5, 0.3, 0.3, 41);
    let cfg = TrainConfig {
        e0: 20,
        epochs: 20,
        seed: 42,
        ..TrainConfig::default()
    };
    let model = run_experiment(&train, &[], &cfg).unwrap().model;
    let outputs = predict_all(&model, &train).unwrap();
    for eta in [0.1, 0.2, 0.3] {
        let lambda = compute_corpus_lambda(&outputs, &train, eta).unwrap();
        let r = verify_quantile_logic(&outputs, &train, eta, lambda).unwrap();
        passed &= r.passed;
        lines.push(format!(
            "trained eta={eta}: lambda {lambda:.3}{}, flagged {:.3}, violations {}, ties {}",
            if r.clamped { " (clamped)" } else { "" },
            r.flagged_fraction,
            r.equivalence_violations,
            r.boundary_ties
        ));
    }
    report(4, "quantile property", passed, &lines.join("; "));
    assert!(passed);
}

#[test]
fn criterion_05_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let h = 1e-5;
    let mut worst = [0.0f64; 2];
    for (slot, hidden) in [None, Some(())].into_iter().enumerate() {
        let mut checked = 0;
        while checked < 100 {
            let d = rng.random_range(1..6);
            let c = rng.random_range(2..6);
            let arch = match hidden {
                None => Architecture::Linear,
                Some(()) => Architecture::Mlp {
                    hidden: rng.random_range(1..9),
                },
            };
            let model = alim::Model64::init(arch, d, c, &mut rng).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            if let Architecture::Mlp { .. } = arch {
                let layer = &model.layers()[0];
                let near_kink = layer.weights.chunks_exact(d).zip(&layer.bias).any(|(row, b)| {
                    (row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + b).abs() < 1e-3
                });
                if near_kink {
                    continue;
                }
            }
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let w = alim::PseudoLabel::new(raw.into_iter().map(|v| v / total).collect()).unwrap();

            let (_, grads) = model.backward(&x, &w).unwrap();
            let analytic = grads.to_flat();
            let base = model.to_flat();
            let mut probe = model.clone();
            let mut loss = |values: &[f64]| {
                probe.set_flat(values).unwrap();
                alim::model::pll_loss(&probe.forward(&x).unwrap(), &w)
            };
            let numeric: Vec<f64> = (0..base.len())
                .map(|i| {
                    let mut v = base.clone();
                    v[i] += h;
                    let up = loss(&v);
                    v[i] -= 2.0 * h;
                    (up - loss(&v)) / (2.0 * h)
                })
                .collect();
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = norm(&analytic).max(norm(&numeric));
            worst[slot] = worst[slot].max(if scale < 1e-10 { diff } else { diff / scale });
            checked += 1;
        }
    }
    let passed = worst.iter().all(|&e| e < 1e-4);
    report(
        5,
        "analytic vs finite-difference gradients",
        passed,
        &format!("worst relative error linear {:.1e}, mlp {:.1e} (100 configs each)", worst[0], worst[1]),
    );
    assert!(passed);
}

#[test]
fn criterion_06_datagen_statistics() {
    let spec = CorruptionSpec::new(10, 0.3, 0.3, 606).unwrap();
    let pts = make_gaussian_blobs::<f64>(20_000, 10, 10, 0.5, 607).unwrap();
    let samples = corrupt(&pts, &spec).unwrap();
    let stats = validate_corpus(&samples, &spec).unwrap();
    // Against eta itself as well as the full-set-adjusted expectation.
    let vs_eta = (stats.noise_fraction - spec.eta).abs() <= 3.0 * stats.noise_sigma;
    let passed = stats.within_bounds() && vs_eta;
    report(
        6,
        "data-generation statistics",
        passed,
        &format!(
            "mean |S| {:.4} (expect {:.1} +- {:.4}), noise {:.4} (expect {:.4} +- {:.4})",
            stats.mean_candidate_size,
            stats.expected_candidate_size,
            3.0 * stats.candidate_size_sigma,
            stats.noise_fraction,
            spec.eta,
            3.0 * stats.noise_sigma
        ),
    );
    assert!(passed);
}

const SEEDS: [u64; 3] = [0, 1, 2];
const FIXED_GRID: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.7];
const E0: usize = 80;
/// Blob width of the desk-scale corpus (the spread of the reference 4000-point example).
const SPREAD: f64 = 0.5;

struct SeedResult {
    rc: f64,
    adaptive: f64,
    /// Smallest clean-vs-noisy AUC over epochs >= e0 + 40 of the adaptive run.
    adaptive_min_auc: f64,
    fixed: Vec<f64>,
    slowest_run: Duration,
}

fn desk_config(seed: u64, policy: LambdaPolicy, rule: LabelRule) -> TrainConfig {
    TrainConfig {
        e0: E0,
        epochs: 200,
        batch_size: 64,
        lambda_policy: policy,
        norm: Normalization::Scale { k: 1.0 },
        mixup: MixupConfig {
            enabled: true,
            ..MixupConfig::default()
        },
        architecture: Architecture::Mlp { hidden: 32 },
        rule,
        seed,
        ..TrainConfig::default()
    }
}

fn desk_results() -> &'static [SeedResult] {
    static RESULTS: OnceLock<Vec<SeedResult>> = OnceLock::new();
    RESULTS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let train = blob_corpus(4000, SPREAD, 0.3, 0.3, 1000 + seed);
                let test = clean_test_set(1000, SPREAD, 2000 + seed);
                let mut slowest = Duration::ZERO;
                let mut run = |policy, rule| {
                    let start = Instant::now();
                    let out = run_experiment(&train, &test, &desk_config(seed, policy, rule)).unwrap();
                    slowest = slowest.max(start.elapsed());
                    out.metrics
                };
                let final_acc = |m: &[alim::EpochMetrics]| m.last().unwrap().test_accuracy.unwrap();

                let rc = final_acc(&run(LambdaPolicy::Fixed { value: 0.0 }, LabelRule::Rc));
                let adaptive_metrics = run(LambdaPolicy::Adaptive { eta: 0.3 }, LabelRule::Alim);
                let adaptive_min_auc = adaptive_metrics[E0 + 40..]
                    .iter()
                    .map(|m| m.ratios.as_ref().and_then(|r| r.auc).unwrap())
                    .fold(f64::INFINITY, f64::min);
                let fixed = FIXED_GRID
                    .iter()
                    .map(|&value| final_acc(&run(LambdaPolicy::Fixed { value }, LabelRule::Alim)))
                    .collect();
                SeedResult {
                    rc,
                    adaptive: final_acc(&adaptive_metrics),
                    adaptive_min_auc,
                    fixed,
                    slowest_run: slowest,
                }
            })
            .collect()
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_07_alim_beats_rc_on_noisy_blobs() {
    let results = desk_results();
    let rc = mean(results.iter().map(|r| r.rc));
    let adaptive = mean(results.iter().map(|r| r.adaptive));
    let slowest = results.iter().map(|r| r.slowest_run).max().unwrap();
    let margin = adaptive - rc;
    let passed = margin >= 0.03 && slowest < Duration::from_secs(600);
    report(
        7,
        "ALIM-adaptive beats RC by >= 3pp",
        passed,
        &format!(
            "adaptive {:.2}% vs RC {:.2}% (margin {:+.2}pp, per seed {:?} vs {:?}); slowest run {:.1}s",
            100.0 * adaptive,
            100.0 * rc,
            100.0 * margin,
            results.iter().map(|r| r.adaptive).collect::<Vec<_>>(),
            results.iter().map(|r| r.rc).collect::<Vec<_>>(),
            slowest.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_08_ratio_separates_clean_from_noisy() {
    let results = desk_results();
    let worst = results.iter().map(|r| r.adaptive_min_auc).fold(f64::INFINITY, f64::min);
    let passed = worst > 0.7;
    report(
        8,
        "clean/noise ratio AUC > 0.7 after e0 + 40",
        passed,
        &format!("smallest AUC over seeds and epochs {}..200: {worst:.4}", E0 + 40),
    );
    assert!(passed);
}

#[test]
fn criterion_09_adaptive_close_to_best_fixed() {
    let results = desk_results();
    let adaptive = mean(results.iter().map(|r| r.adaptive));
    let fixed: Vec<f64> = (0..FIXED_GRID.len()).map(|i| mean(results.iter().map(|r| r.fixed[i]))).collect();
    let (best_i, best) = fixed
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let gap = best - adaptive;
    let passed = gap <= 0.02;
    let grid: Vec<String> = FIXED_GRID
        .iter()
        .zip(&fixed)
        .map(|(l, a)| format!("{l}:{:.2}%", 100.0 * a))
        .collect();
    report(
        9,
        "adaptive within 2pp of best fixed lambda",
        passed,
        &format!(
            "adaptive {:.2}% vs best fixed lambda={} {:.2}% (gap {:.2}pp); grid {}",
            100.0 * adaptive,
            FIXED_GRID[best_i],
            100.0 * best,
            100.0 * gap,
            grid.join(" ")
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_simplex_invariants_and_beta_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let on_simplex = |w: &[f64]| w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    let mut bad = [0usize; 3];
    for _ in 0..10_000 {
        let c = rng.random_range(2..=12);
        let p = random_probabilities(&mut rng, c);
        let s = random_mask(&mut rng, c);
        let lambda = rng.random_range(0.0..=1.0);
        let norm = if rng.random_bool(0.5) {
            Normalization::Onehot
        } else {
            Normalization::Scale {
                k: rng.random_range(0.05..5.0),
            }
        };
        let w_i = alim_pseudo_label(&p, &s, lambda, norm).unwrap();
        bad[0] += usize::from(!on_simplex(w_i.as_slice()));

        let q = random_probabilities(&mut rng, c);
        let w_j = alim_pseudo_label(&q, &random_mask(&mut rng, c), lambda, norm).unwrap();
        let alpha = sample_mix_alpha(4.0, &mut rng).unwrap();
        let (_, w_mix) = mixup_pair(&[0.0], &w_i, &[1.0], &w_j, alpha).unwrap();
        bad[1] += usize::from(!on_simplex(w_mix.as_slice()));

        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-50.0..50.0)).collect();
        bad[2] += usize::from(!on_simplex(softmax(&logits).as_slice()));
    }
    let beta_mean = mean((0..10_000).map(|_| sample_mix_alpha(1.0, &mut rng).unwrap()));
    let passed = bad == [0, 0, 0] && (beta_mean - 0.5).abs() < 0.02;
    report(
        10,
        "simplex invariants and Beta(1,1) mean",
        passed,
        &format!(
            "off-simplex pseudo-labels {}, mixup targets {}, softmax outputs {} (of 10000 each); Beta(1,1) mean {beta_mean:.4}",
            bad[0], bad[1], bad[2]
        ),
    );
    assert!(passed);
}
