//! Warm-up, pseudo-labeling, mixup and the per-epoch `lambda` update.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::pseudo_label::{alim_pseudo_label, rc_pseudo_label, Normalization, ProbabilityVector, PseudoLabel};
use crate::datagen::{sample_rng, PartialSample};
use crate::error::{AlimError, Result};
use crate::lambda::{adaptive_lambda, corpus_ratios, ratio_stats, LambdaPolicy, RatioStats};
use crate::model::{pll_loss, sgd_step, Architecture, ModelParams, OptimizerConfig, OptimizerState};
use crate::scalar::Real;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const MIX_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    pub enabled: bool,
    /// Beta(zeta, zeta) parameter for the interpolation weight.
    pub zeta: f64,
    /// Weight of the mixup loss in the joint objective.
    pub lambda_mix: f64,
    /// Also mix during warm-up epochs.
    pub during_warmup: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            zeta: 4.0,
            lambda_mix: 1.0,
            during_warmup: false,
        }
    }
}

/// How pseudo-labels are formed after warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelRule {
    /// Reweighted candidate mask with the configured `lambda` policy.
    #[default]
    Alim,
    /// Plain risk-consistent targets for every epoch; the policy is ignored.
    Rc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Warm-up epochs trained with fully trusted candidate sets.
    pub e0: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_policy: LambdaPolicy,
    pub norm: Normalization,
    pub mixup: MixupConfig,
    pub optimizer: OptimizerConfig,
    pub architecture: Architecture,
    pub rule: LabelRule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            e0: 80,
            epochs: 200,
            batch_size: 64,
            lambda_policy: LambdaPolicy::Adaptive { eta: 0.3 },
            norm: Normalization::Scale { k: 1.0 },
            mixup: MixupConfig::default(),
            optimizer: OptimizerConfig::default(),
            architecture: Architecture::Mlp { hidden: 32 },
            rule: LabelRule::Alim,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e0 > self.epochs {
            return Err(AlimError::invalid(format!(
                "warm-up e0 = {} exceeds total epochs {}",
                self.e0, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(AlimError::invalid("batch size must be positive"));
        }
        check_zeta(self.mixup.zeta)?;
        if !(self.mixup.lambda_mix >= 0.0) || !self.mixup.lambda_mix.is_finite() {
            return Err(AlimError::invalid(format!(
                "lambda_mix must be >= 0, got {}",
                self.mixup.lambda_mix
            )));
        }
        self.lambda_policy.validate()?;
        self.norm.validate()?;
        self.architecture.validate()?;
        self.optimizer.validate()
    }

    fn is_warmup(&self, epoch: usize) -> bool {
        epoch < self.e0
    }

    fn mixup_active(&self, epoch: usize) -> bool {
        self.mixup.enabled && (self.mixup.during_warmup || !self.is_warmup(epoch))
    }
}

fn check_zeta(zeta: f64) -> Result<()> {
    if zeta > 0.0 && zeta.is_finite() {
        Ok(())
    } else {
        Err(AlimError::InvalidZeta(zeta))
    }
}

/// Interpolation weight `alpha ~ Beta(zeta, zeta)`.
pub fn sample_mix_alpha<R: Rng + ?Sized>(zeta: f64, rng: &mut R) -> Result<f64> {
    check_zeta(zeta)?;
    let beta = Beta::new(zeta, zeta).map_err(|_| AlimError::InvalidZeta(zeta))?;
    Ok(beta.sample(rng))
}

/// Virtual sample `(alpha x_i + (1 - alpha) x_j, alpha w_i + (1 - alpha) w_j)`.
pub fn mixup_pair<T: Real>(
    x_i: &[T],
    w_i: &PseudoLabel<T>,
    x_j: &[T],
    w_j: &PseudoLabel<T>,
    alpha: T,
) -> Result<(Vec<T>, PseudoLabel<T>)> {
    if x_i.len() != x_j.len() {
        return Err(AlimError::ShapeMismatch {
            expected: x_i.len(),
            actual: x_j.len(),
        });
    }
    if w_i.len() != w_j.len() {
        return Err(AlimError::ShapeMismatch {
            expected: w_i.len(),
            actual: w_j.len(),
        });
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(AlimError::invalid(format!("mixup weight must lie in [0, 1], got {alpha}")));
    }
    let beta = T::one() - alpha;
    let x = x_i.iter().zip(x_j).map(|(&a, &b)| alpha * a + beta * b).collect();
    let w = w_i
        .as_slice()
        .iter()
        .zip(w_j.as_slice())
        .map(|(&a, &b)| alpha * a + beta * b)
        .collect();
    Ok((x, PseudoLabel::from_normalized(w)))
}

/// One record of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub warmup: bool,
    /// Mean joint loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    /// `lambda` used for this epoch's pseudo-labels (0 during warm-up).
    pub lambda: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Clean/noise ratio summary after the epoch; needs hidden noise flags.
    pub ratios: Option<RatioStats>,
}

/// Fraction of samples with known truth whose argmax prediction matches it.
pub fn accuracy<T: Real>(outputs: &[ProbabilityVector<T>], samples: &[PartialSample<T>]) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, s) in outputs.iter().zip(samples) {
        if let Some(truth) = s.truth {
            total += 1;
            hits += usize::from(p.argmax() == truth);
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

pub fn predict_all<T: Real>(model: &ModelParams<T>, samples: &[PartialSample<T>]) -> Result<Vec<ProbabilityVector<T>>> {
    samples.iter().map(|s| model.forward(&s.features)).collect()
}

/// Model, optimizer and random streams for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    config: TrainConfig,
    shuffle_rng: ChaCha8Rng,
    mix_rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut init_rng = sample_rng(config.seed, INIT_STREAM);
        let model = ModelParams::init(config.architecture, input_dim, num_classes, &mut init_rng)?;
        let optimizer = OptimizerState::new(&model, config.optimizer, config.epochs)?;
        Ok(Self {
            model,
            optimizer,
            shuffle_rng: sample_rng(config.seed, SHUFFLE_STREAM),
            mix_rng: sample_rng(config.seed, MIX_STREAM),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn pseudo_label(&self, p: &ProbabilityVector<T>, sample: &PartialSample<T>, lambda: Option<T>) -> Result<PseudoLabel<T>> {
        match (self.config.rule, lambda) {
            (LabelRule::Alim, Some(lambda)) => alim_pseudo_label(p, &sample.candidates, lambda, self.config.norm),
            _ => rc_pseudo_label(p, &sample.candidates),
        }
    }

    /// One pass over `corpus` at schedule position `epoch`.
    ///
    /// `lambda = None` selects the fully trusting warm-up targets. Returns the
    /// mean joint loss.
    pub fn train_epoch(&mut self, corpus: &[PartialSample<T>], epoch: usize, lambda: Option<T>) -> Result<f64> {
        if corpus.is_empty() {
            return Err(AlimError::EmptyInput);
        }
        self.optimizer.epoch = epoch;
        let mix = self.config.mixup_active(epoch);
        let zeta = self.config.mixup.zeta;
        let lambda_mix = T::lit(self.config.mixup.lambda_mix);

        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut grads = self.model.zeros_like();
        let mut loss_total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            for layer in grads.layers_mut() {
                layer.weights.fill(T::zero());
                layer.bias.fill(T::zero());
            }
            let scale = T::one() / T::lit(batch.len() as f64);

            let mut targets = Vec::with_capacity(batch.len());
            let mut pll = T::zero();
            for &i in batch {
                let sample = &corpus[i];
                let trace = self.model.forward_trace(&sample.features)?;
                let w = self.pseudo_label(&trace.probs, sample, lambda)?;
                pll += pll_loss(&trace.probs, &w);
                self.model.accumulate_gradient(&sample.features, &trace, &w, scale, &mut grads)?;
                targets.push(w);
            }

            let mut mixed = T::zero();
            if mix {
                let mut partners: Vec<usize> = (0..batch.len()).collect();
                partners.shuffle(&mut self.mix_rng);
                for (pos, &partner) in partners.iter().enumerate() {
                    let alpha = T::lit(sample_mix_alpha(zeta, &mut self.mix_rng)?);
                    let (x, w) = mixup_pair(
                        &corpus[batch[pos]].features,
                        &targets[pos],
                        &corpus[batch[partner]].features,
                        &targets[partner],
                        alpha,
                    )?;
                    let trace = self.model.forward_trace(&x)?;
                    mixed += pll_loss(&trace.probs, &w);
                    self.model
                        .accumulate_gradient(&x, &trace, &w, lambda_mix * scale, &mut grads)?;
                }
            }

            loss_total += (pll + lambda_mix * mixed).as_f64();
            sgd_step(&mut self.model, &grads, &mut self.optimizer)?;
        }
        Ok(loss_total / corpus.len() as f64)
    }
}

pub struct RunOutput<T> {
    pub metrics: Vec<EpochMetrics>,
    pub model: ModelParams<T>,
}

fn corpus_shape<T>(train: &[PartialSample<T>]) -> Result<(usize, usize)> {
    let first = train.first().ok_or(AlimError::EmptyInput)?;
    let (d, c) = (first.features.len(), first.candidates.len());
    for s in train {
        if s.features.len() != d {
            return Err(AlimError::ShapeMismatch {
                expected: d,
                actual: s.features.len(),
            });
        }
        if s.candidates.len() != c {
            return Err(AlimError::ShapeMismatch {
                expected: c,
                actual: s.candidates.len(),
            });
        }
    }
    Ok((d, c))
}

/// Full training run; see [`run_experiment_with`].
pub fn run_experiment<T: Real>(
    train: &[PartialSample<T>],
    test: &[PartialSample<T>],
    config: &TrainConfig,
) -> Result<RunOutput<T>> {
    run_experiment_with(train, test, config, |_, _| Ok(()))
}

/// Warm-up then ALIM epochs, calling `on_epoch` after each epoch.
///
/// With an adaptive policy `lambda` is first set from the warmed-up model
/// and then refreshed after every post-warm-up epoch from a full pass over
/// the training corpus.
pub fn run_experiment_with<T, F>(
    train: &[PartialSample<T>],
    test: &[PartialSample<T>],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<RunOutput<T>>
where
    T: Real,
    F: FnMut(&EpochMetrics, &ModelParams<T>) -> Result<()>,
{
    let (d, c) = corpus_shape(train)?;
    for (index, s) in test.iter().enumerate() {
        if s.truth.is_none() {
            return Err(AlimError::MissingTruth { index });
        }
        if s.features.len() != d {
            return Err(AlimError::ShapeMismatch {
                expected: d,
                actual: s.features.len(),
            });
        }
    }

    let mut trainer = Trainer::new(config.clone(), d, c)?;
    let mut lambda = T::lit(config.lambda_policy.initial_value());
    let adaptive_eta = match (config.rule, config.lambda_policy) {
        (LabelRule::Alim, LambdaPolicy::Adaptive { eta }) => Some(eta),
        _ => None,
    };

    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let warmup = config.is_warmup(epoch);
        if let (Some(eta), false, true) = (adaptive_eta, warmup, epoch == config.e0) {
            let outputs = predict_all(&trainer.model, train)?;
            lambda = adaptive_lambda(&corpus_ratios(&outputs, train)?, eta)?;
        }
        let active = (!warmup && config.rule == LabelRule::Alim).then_some(lambda);
        let loss = trainer.train_epoch(train, epoch, active)?;

        let outputs = predict_all(&trainer.model, train)?;
        let ratios = corpus_ratios(&outputs, train)?;
        let record = EpochMetrics {
            epoch,
            warmup,
            loss,
            lambda: active.map_or(0.0, |l| l.as_f64()),
            train_accuracy: accuracy(&outputs, train),
            test_accuracy: accuracy(&predict_all(&trainer.model, test)?, test),
            ratios: ratio_stats(&ratios, train),
        };
        if let (Some(eta), false) = (adaptive_eta, warmup) {
            lambda = adaptive_lambda(&ratios, eta)?;
        }
        on_epoch(&record, &trainer.model)?;
        metrics.push(record);
    }
    Ok(RunOutput {
        metrics,
        model: trainer.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{corrupt, make_gaussian_blobs, CorruptionSpec};
    use rand::SeedableRng;

    fn corpus(n: usize, q: f64, eta: f64, seed: u64) -> Vec<PartialSample<f64>> {
        blob_corpus(n, 0.3, q, eta, seed)
    }

    fn blob_corpus(n: usize, spread: f64, q: f64, eta: f64, seed: u64) -> Vec<PartialSample<f64>> {
        let pts = make_gaussian_blobs(n, 4, 2, spread, seed).unwrap();
        corrupt(&pts, &CorruptionSpec::new(4, q, eta, seed + 100).unwrap()).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            e0: 2,
            epochs: 6,
            batch_size: 32,
            lambda_policy: LambdaPolicy::Adaptive { eta: 0.2 },
            norm: Normalization::Scale { k: 1.0 },
            mixup: MixupConfig {
                enabled: true,
                ..MixupConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            architecture: Architecture::Mlp { hidden: 8 },
            rule: LabelRule::Alim,
            seed: 5,
        }
    }

    #[test]
    fn mixup_pair_examples() {
        let wi = PseudoLabel::new(vec![1.0, 0.0]).unwrap();
        let wj = PseudoLabel::new(vec![0.0, 1.0]).unwrap();
        let (x, w) = mixup_pair(&[1.0, 2.0], &wi, &[3.0, 4.0], &wj, 1.0).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        assert_eq!(w, wi);
        let (x, w) = mixup_pair(&[1.0, 2.0], &wi, &[3.0, 4.0], &wj, 0.5).unwrap();
        assert_eq!(x, vec![2.0, 3.0]);
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        assert!(mixup_pair(&[1.0], &wi, &[3.0, 4.0], &wj, 0.5).is_err());
        assert!(mixup_pair(&[1.0], &wi, &[3.0], &wj, 1.5).is_err());
    }

    #[test]
    fn beta_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_mix_alpha(1.0, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|a| (0.0..=1.0).contains(a)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");

        let draws: Vec<f64> = (0..n).map(|_| sample_mix_alpha(4.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // ab / ((a + b)^2 (a + b + 1))
        let expected = 16.0 / (64.0 * 9.0);
        assert!((var - expected).abs() < 0.15 * expected, "{var}");

        assert!(matches!(
            sample_mix_alpha(0.0, &mut rng),
            Err(AlimError::InvalidZeta(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.e0 = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.mixup.zeta = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.mixup.lambda_mix = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn runs_are_deterministic() {
        let train = corpus(400, 0.3, 0.2, 1);
        let test = corpus(100, 0.0, 0.0, 2);
        let a = run_experiment(&train, &test, &small_config()).unwrap();
        let b = run_experiment(&train, &test, &small_config()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn warmup_only_run_equals_rc_run() {
        let train = corpus(300, 0.3, 0.2, 3);
        let test = corpus(100, 0.0, 0.0, 4);
        let mut warm = small_config();
        warm.e0 = warm.epochs;
        let mut rc = warm.clone();
        rc.rule = LabelRule::Rc;
        let a = run_experiment(&train, &test, &warm).unwrap();
        let b = run_experiment(&train, &test, &rc).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.iter().all(|m| m.lambda == 0.0));
    }

    #[test]
    fn zero_weight_mixup_matches_no_mixup() {
        let train = corpus(300, 0.3, 0.2, 5);
        let test = corpus(100, 0.0, 0.0, 6);
        let mut with = small_config();
        with.mixup.lambda_mix = 0.0;
        let mut without = with.clone();
        without.mixup.enabled = false;
        let a = run_experiment(&train, &test, &with).unwrap();
        let b = run_experiment(&train, &test, &without).unwrap();
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn adaptive_with_zero_eta_matches_fixed_zero() {
        let train = corpus(300, 0.3, 0.0, 7);
        let test = corpus(100, 0.0, 0.0, 8);
        let mut adaptive = small_config();
        adaptive.lambda_policy = LambdaPolicy::Adaptive { eta: 0.0 };
        let mut fixed = adaptive.clone();
        fixed.lambda_policy = LambdaPolicy::Fixed { value: 0.0 };
        let a = run_experiment(&train, &test, &adaptive).unwrap();
        let b = run_experiment(&train, &test, &fixed).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.iter().all(|m| m.lambda == 0.0));
    }

    #[test]
    fn adaptive_lambda_is_reported_after_warmup() {
        let train = corpus(400, 0.3, 0.3, 9);
        let test = corpus(100, 0.0, 0.0, 10);
        let out = run_experiment(&train, &test, &small_config()).unwrap();
        for m in &out.metrics {
            assert_eq!(m.warmup, m.epoch < 2);
            if m.warmup {
                assert_eq!(m.lambda, 0.0);
            }
            assert!((0.0..=1.0).contains(&m.lambda));
            assert!(m.ratios.as_ref().unwrap().auc.is_some());
        }
    }

    #[test]
    fn separable_clean_corpus_is_learned() {
        let train = blob_corpus(800, 0.15, 0.0, 0.0, 11);
        let test = blob_corpus(200, 0.15, 0.0, 0.0, 12);
        let cfg = TrainConfig {
            e0: 0,
            epochs: 50,
            lambda_policy: LambdaPolicy::Fixed { value: 0.0 },
            mixup: MixupConfig::default(),
            ..small_config()
        };
        let out = run_experiment(&train, &test, &cfg).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(last.train_accuracy.unwrap() >= 0.99, "{last:?}");
        assert!(last.test_accuracy.unwrap() >= 0.99, "{last:?}");
    }

    #[test]
    fn test_samples_need_truth() {
        let train = corpus(50, 0.1, 0.1, 13);
        let mut test = corpus(10, 0.0, 0.0, 14);
        test[3].truth = None;
        assert!(matches!(
            run_experiment(&train, &test, &small_config()),
            Err(AlimError::MissingTruth { index: 3 })
        ));
    }
}
