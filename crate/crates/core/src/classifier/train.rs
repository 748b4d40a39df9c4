//! Seeded SGD for the logistic pair model.
//!
//! The per-sample objective is the log loss plus `l2 / 2 * ||w||^2` (bias not
//! regularized). L2 decay is applied lazily through a global scale factor so
//! each step only touches the sample's nonzero features. Exact duplicate
//! samples are collapsed into one weighted sample before training, so the
//! fitted model depends on the data distribution rather than on how many
//! times a pair was repeated.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{featurize, FeatureConfig, SparseVector};
use super::{sigmoid, BinaryLabel, ClassifierModel, LabeledPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial step size; epoch `t` (1-based) uses `learning_rate / sqrt(t)`.
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 3, l2: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training data needs both classes after binarization (positives={positives}, negatives={negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Weighted mean objective over the training set after each epoch.
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
    pub unique_samples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub discarded: usize,
}

/// A featurized training sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: SparseVector,
    pub y: f64,
    pub weight: f64,
}

/// Log loss of one sample plus the L2 term, with `theta = [w.., bias]`.
pub fn sample_loss(theta: &[f64], x: &SparseVector, y: f64, l2: f64) -> f64 {
    let (w, b) = theta.split_at(theta.len() - 1);
    let z = x.dot(w) + b[0];
    // log(1 + e^z) - y z, computed stably
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Dense gradient of [`sample_loss`] with respect to `theta`.
pub fn sample_gradient(theta: &[f64], x: &SparseVector, y: f64, l2: f64) -> Vec<f64> {
    let (w, b) = theta.split_at(theta.len() - 1);
    let residual = sigmoid(x.dot(w) + b[0]) - y;
    let mut g: Vec<f64> = w.iter().map(|wi| l2 * wi).collect();
    for (i, v) in x.iter() {
        g[i as usize] += residual * v;
    }
    g.push(residual);
    g
}

/// Collapses exact duplicates and featurizes. Returns samples in order of
/// first appearance, with weights normalized to mean 1.
pub fn prepare(data: &[LabeledPair], features: &FeatureConfig) -> (Vec<Sample>, TrainReport) {
    let mut index: HashMap<(&str, &str, bool), usize> = HashMap::new();
    let mut unique: Vec<(&LabeledPair, bool, f64)> = Vec::new();
    let (mut positives, mut negatives, mut discarded) = (0, 0, 0);
    for pair in data {
        let positive = match pair.label() {
            BinaryLabel::Positive => {
                positives += 1;
                true
            }
            BinaryLabel::Negative => {
                negatives += 1;
                false
            }
            BinaryLabel::Discard => {
                discarded += 1;
                continue;
            }
        };
        let key = (pair.sentence1.as_str(), pair.sentence2.as_str(), positive);
        match index.get(&key) {
            Some(&i) => unique[i].2 += 1.0,
            None => {
                index.insert(key, unique.len());
                unique.push((pair, positive, 1.0));
            }
        }
    }
    let mean_weight = (positives + negatives) as f64 / unique.len().max(1) as f64;
    let samples: Vec<Sample> = unique
        .par_iter()
        .map(|(pair, positive, count)| Sample {
            x: featurize(&pair.sentence1, &pair.sentence2, features),
            y: if *positive { 1.0 } else { 0.0 },
            weight: count / mean_weight,
        })
        .collect();
    let report = TrainReport {
        epoch_losses: Vec::new(),
        samples: positives + negatives,
        unique_samples: samples.len(),
        positives,
        negatives,
        discarded,
    };
    (samples, report)
}

/// Weighted mean objective over `samples` at `theta`.
pub fn objective(theta: &[f64], samples: &[Sample], l2: f64) -> f64 {
    let (w, b) = theta.split_at(theta.len() - 1);
    let penalty = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    let total_weight: f64 = samples.iter().map(|s| s.weight).sum();
    let data: f64 = samples
        .iter()
        .map(|s| {
            let z = s.x.dot(w) + b[0];
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            s.weight * (softplus - s.y * z)
        })
        .sum();
    data / total_weight + penalty
}

pub fn train(
    data: &[LabeledPair],
    features: &FeatureConfig,
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainReport), TrainError> {
    features.validate().map_err(TrainError::Config)?;
    if !(config.learning_rate > 0.0) || config.epochs == 0 || !(config.l2 >= 0.0) {
        return Err(TrainError::Config("learning_rate > 0, epochs >= 1 and l2 >= 0 are required".into()));
    }
    let (samples, mut report) = prepare(data, features);
    if report.positives == 0 || report.negatives == 0 {
        return Err(TrainError::SingleClass { positives: report.positives, negatives: report.negatives });
    }

    let dim = features.hash_dim;
    let mut v = vec![0.0f64; dim];
    let mut scale = 1.0f64;
    let mut bias = 0.0f64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for epoch in 1..=config.epochs {
        let lr = config.learning_rate / (epoch as f64).sqrt();
        let decay = 1.0 - lr * config.l2;
        order.shuffle(&mut rng);
        for &i in &order {
            let s = &samples[i];
            let z = scale * s.x.dot(&v) + bias;
            let g = (sigmoid(z) - s.y) * s.weight;
            scale *= decay;
            if scale < 1e-9 {
                v.iter_mut().for_each(|x| *x *= scale);
                scale = 1.0;
            }
            let step = lr * g / scale;
            for (j, xj) in s.x.iter() {
                v[j as usize] -= step * xj;
            }
            bias -= lr * g;
        }
        let mut theta: Vec<f64> = v.iter().map(|x| x * scale).collect();
        theta.push(bias);
        report.epoch_losses.push(objective(&theta, &samples, config.l2));
    }

    let mut theta: Vec<f64> = v.into_iter().map(|x| x * scale).collect();
    theta.push(bias);
    let mut model = ClassifierModel::zeros(features.clone());
    model.theta = theta;
    Ok((model, report))
}
