//! Noisy partial label learning with an adjustable trust level for the
//! candidate set.
//!
//! Each training sample carries a candidate set that may have lost its true
//! label. Pseudo-labels weight non-candidate classes by `lambda` before
//! normalizing the model's prediction, so `lambda = 0` trusts the candidate
//! set completely and larger values let the model overrule it. `lambda` can
//! be fixed or set adaptively from the clean/noise ratio distribution of the
//! corpus.
//!
//! ```
//! use alim::{alim_pseudo_label, CandidateMask, Normalization, ProbabilityVector};
//!
//! let p = ProbabilityVector::new(vec![0.1, 0.2, 0.7]).unwrap();
//! let s = CandidateMask::from_binary(&[1, 1, 0]).unwrap();
//! let w = alim_pseudo_label(&p, &s, 0.5, Normalization::Onehot).unwrap();
//! assert_eq!(w.as_slice(), &[0.0, 0.0, 1.0]);
//! ```

pub mod datagen;
pub mod error;
pub mod io;
pub mod lambda;
pub mod model;
pub mod oracle;
pub mod pseudo_label;
pub mod scalar;
pub mod trainer;

pub use pseudo_label::{
    alim_pseudo_label, clean_noise_ratio, closed_form_onehot, closed_form_scale, rc_pseudo_label, weighted_mask,
    CandidateMask, Normalization, ProbabilityVector, PseudoLabel,
};
pub use datagen::{corrupt, make_gaussian_blobs, validate_corpus, CorpusStats, CorruptionSpec, LabeledPoint, PartialSample};
pub use error::{AlimError, Result};
pub use lambda::{adaptive_lambda, compute_corpus_lambda, corpus_ratios, LambdaPolicy, RatioStats};
pub use model::{Architecture, ModelParams, OptimizerConfig};
pub use scalar::Real;
pub use trainer::{run_experiment, run_experiment_with, EpochMetrics, LabelRule, MixupConfig, RunOutput, TrainConfig};

pub type ProbabilityVector64 = ProbabilityVector<f64>;
pub type ProbabilityVector32 = ProbabilityVector<f32>;
pub type PseudoLabel64 = PseudoLabel<f64>;
pub type PseudoLabel32 = PseudoLabel<f32>;
pub type Sample64 = PartialSample<f64>;
pub type Sample32 = PartialSample<f32>;
pub type Model64 = ModelParams<f64>;
pub type Model32 = ModelParams<f32>;
