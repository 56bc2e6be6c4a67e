use alim::model::{cosine_lr, pll_loss, sgd_step, OptimizerState};
use alim::{Architecture, ModelParams, OptimizerConfig, PseudoLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random_label(rng: &mut ChaCha8Rng, c: usize) -> PseudoLabel<f64> {
    let v: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = v.iter().sum();
    PseudoLabel::new(v.into_iter().map(|x| x / total).collect()).unwrap()
}

/// Smallest |pre-activation| of the hidden layer; finite differences are
/// only trusted well away from the rectifier kink.
fn kink_distance(model: &ModelParams<f64>, x: &[f64]) -> f64 {
    match model.architecture() {
        Architecture::Linear => f64::INFINITY,
        Architecture::Mlp { .. } => {
            let layer = &model.layers()[0];
            layer
                .weights
                .chunks_exact(layer.inputs)
                .zip(&layer.bias)
                .map(|(row, b)| (row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b).abs())
                .fold(f64::INFINITY, f64::min)
        }
    }
}

fn numeric_gradient(model: &ModelParams<f64>, x: &[f64], w: &PseudoLabel<f64>) -> Vec<f64> {
    let base = model.to_flat();
    let mut probe = model.clone();
    let loss_at = |probe: &mut ModelParams<f64>, values: &[f64]| {
        probe.set_flat(values).unwrap();
        pll_loss(&probe.forward(x).unwrap(), w)
    };
    (0..base.len())
        .map(|i| {
            let mut v = base.clone();
            v[i] = base[i] + STEP;
            let up = loss_at(&mut probe, &v);
            v[i] = base[i] - STEP;
            let down = loss_at(&mut probe, &v);
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn check_architecture(arch: fn(&mut ChaCha8Rng) -> Architecture, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let d = rng.random_range(1..6);
        let c = rng.random_range(2..6);
        let model = ModelParams::<f64>::init(arch(&mut rng), d, c, &mut rng).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        if kink_distance(&model, &x) < 1e-3 {
            continue;
        }
        let w = random_label(&mut rng, c);
        let (loss, grads) = model.backward(&x, &w).unwrap();
        assert!((loss - pll_loss(&model.forward(&x).unwrap(), &w)).abs() < 1e-12);
        let err = relative_error(&grads.to_flat(), &numeric_gradient(&model, &x, &w));
        worst = worst.max(err);
        checked += 1;
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn linear_gradients_match_finite_differences() {
    check_architecture(|_| Architecture::Linear, 1);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    check_architecture(|rng| Architecture::Mlp { hidden: rng.random_range(1..9) }, 2);
}

#[test]
fn small_steps_decrease_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for arch in [Architecture::Linear, Architecture::Mlp { hidden: 6 }] {
        let mut model = ModelParams::<f64>::init(arch, 3, 4, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let w = random_label(&mut rng, 4);
        let config = OptimizerConfig {
            base_lr: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut state = OptimizerState::new(&model, config, 10).unwrap();
        let (before, grads) = model.backward(&x, &w).unwrap();
        sgd_step(&mut model, &grads, &mut state).unwrap();
        let after = pll_loss(&model.forward(&x).unwrap(), &w);
        assert!(after < before, "{arch}: {before} -> {after}");
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.01, 0, 200), 0.01);
    assert!((cosine_lr(0.01, 100, 200) - 0.005).abs() < 1e-15);
    assert!(cosine_lr(0.01, 200, 200).abs() < 1e-15);
}
