//! Lightweight step-equivalence classifier.
//!
//! A logistic model over hashed pair features ([`features`]), trained by
//! seeded SGD ([`train`]) and refined by EM over sub-sentence pairs
//! ([`em`]). Models persist in a small versioned binary format ([`io`]).

pub mod em;
pub mod features;
pub mod io;
pub mod sentences;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equiv::{DetectError, PairScorer, VerdictSource};

pub use em::{e_step_refine, em_train, EmConfig, EmError, EmIteration, EmOutcome, RefineStats, Refined};
pub use features::{featurize, FeatureConfig, PairFeature, SparseVector};
pub use io::{load_model, save_model, ModelIoError, MODEL_FORMAT_VERSION};
pub use sentences::split_sentences;
pub use train::{train, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("equivalence level must be in 0..=4, got {0}")]
    OutOfRange(i64),
    #[error("labeled pair has an empty sentence")]
    EmptySentence,
}

/// A step pair with a five-level equivalence label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub sentence1: String,
    pub sentence2: String,
    pub level: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

impl LabeledPair {
    pub fn new(sentence1: impl Into<String>, sentence2: impl Into<String>, level: u8) -> Self {
        LabeledPair { sentence1: sentence1.into(), sentence2: sentence2.into(), level, reasoning: None }
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if self.level > 4 {
            return Err(LabelError::OutOfRange(self.level as i64));
        }
        if self.sentence1.is_empty() || self.sentence2.is_empty() {
            return Err(LabelError::EmptySentence);
        }
        Ok(())
    }

    pub fn label(&self) -> BinaryLabel {
        binarize_label(self.level as i64).unwrap_or(BinaryLabel::Discard)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BinaryLabel {
    Positive,
    Negative,
    Discard,
}

/// Levels 3-4 are positive, 0-1 negative, 2 (indeterminable) is discarded.
pub fn binarize_label(level: i64) -> Result<BinaryLabel, LabelError> {
    match level {
        3 | 4 => Ok(BinaryLabel::Positive),
        0 | 1 => Ok(BinaryLabel::Negative),
        2 => Ok(BinaryLabel::Discard),
        other => Err(LabelError::OutOfRange(other)),
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Trained logistic model. `theta` holds one weight per hashed feature
/// followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub theta: Vec<f64>,
    pub feature_config: FeatureConfig,
    pub decision_threshold: f64,
    pub version: u32,
}

impl ClassifierModel {
    /// All-zero model (predicts 0.5 everywhere).
    pub fn zeros(feature_config: FeatureConfig) -> Self {
        ClassifierModel {
            theta: vec![0.0; feature_config.hash_dim + 1],
            feature_config,
            decision_threshold: crate::equiv::DEFAULT_DECISION_THRESHOLD,
            version: MODEL_FORMAT_VERSION,
        }
    }

    pub fn bias(&self) -> f64 {
        *self.theta.last().expect("theta holds the bias")
    }

    pub fn weights(&self) -> &[f64] {
        &self.theta[..self.theta.len() - 1]
    }

    pub fn score_features(&self, x: &SparseVector) -> f64 {
        x.dot(self.weights()) + self.bias()
    }

    /// Probability that the pair is equivalent, strictly inside (0, 1).
    pub fn predict_proba(&self, a: &str, b: &str) -> f64 {
        let x = featurize(a, b, &self.feature_config);
        sigmoid(self.score_features(&x)).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
    }

    pub fn predict(&self, a: &str, b: &str) -> bool {
        self.predict_proba(a, b) >= self.decision_threshold
    }

    pub fn is_well_formed(&self) -> bool {
        self.theta.len() == self.feature_config.hash_dim + 1 && self.theta.iter().all(|w| w.is_finite())
    }
}

pub fn predict_proba(model: &ClassifierModel, a: &str, b: &str) -> f64 {
    model.predict_proba(a, b)
}

impl PairScorer for ClassifierModel {
    fn probability(&self, a: &str, b: &str) -> Result<f64, DetectError> {
        Ok(self.predict_proba(a, b))
    }

    fn source(&self) -> VerdictSource {
        VerdictSource::Classifier
    }
}

/// Precision / recall / F1 with confusion counts on binarized labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

impl BinaryMetrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize, threshold: f64) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        BinaryMetrics { tp, fp, tn, fn_, precision, recall, f1, accuracy: ratio(tp + tn, tp + fp + tn + fn_), threshold }
    }
}

/// Scores `model` on the non-discarded pairs of `data`.
pub fn evaluate(model: &ClassifierModel, data: &[LabeledPair]) -> BinaryMetrics {
    use rayon::prelude::*;
    let outcomes: Vec<(bool, bool)> = data
        .par_iter()
        .filter_map(|p| match p.label() {
            BinaryLabel::Discard => None,
            label => Some((label == BinaryLabel::Positive, model.predict(&p.sentence1, &p.sentence2))),
        })
        .collect();
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (truth, pred) in outcomes {
        match (truth, pred) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    BinaryMetrics::from_counts(tp, fp, tn, fn_, model.decision_threshold)
}
