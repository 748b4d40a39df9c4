//! EM refinement of negative multi-sentence pairs.
//!
//! A negative pair whose sides share equivalent context sentences teaches the
//! model that those shared sentences signal non-equivalence. The E-step uses
//! the current model to find sub-sentence pairs it is confident are
//! equivalent and strips them from both sides; the M-step retrains on the
//! refined data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::FeatureConfig;
use super::sentences::split_sentences;
use super::train::{train, TrainConfig, TrainError};
use super::{evaluate, BinaryLabel, BinaryMetrics, ClassifierModel, LabeledPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Sub-pairs scoring above this are treated as equivalent and removed.
    pub tau: f64,
    pub max_iterations: usize,
    pub min_f1_gain: f64,
    pub train: TrainConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { tau: 0.95, max_iterations: 5, min_f1_gain: 0.002, train: TrainConfig::default() }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be >= 1".into());
        }
        if !(self.min_f1_gain >= 0.0) {
            return Err(format!("min_f1_gain must be >= 0, got {}", self.min_f1_gain));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EmError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid EM configuration: {0}")]
    Config(String),
    #[error("validation set has no labeled (non-discarded) pairs")]
    EmptyValidation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineStats {
    /// Samples with at least one sub-pair removed.
    pub modified: usize,
    pub removed_subpairs: usize,
    /// Samples dropped because a side became empty.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub data: Vec<LabeledPair>,
    pub stats: RefineStats,
}

/// One E-step. Only negatives with more than one sentence on some side are
/// touched. Every sentence taking part in a sub-pair scoring above `tau` is
/// removed from its side.
pub fn e_step_refine(data: &[LabeledPair], model: &ClassifierModel, tau: f64) -> Refined {
    use rayon::prelude::*;
    let outcomes: Vec<(Option<LabeledPair>, usize)> = data
        .par_iter()
        .map(|pair| {
            if pair.label() != BinaryLabel::Negative {
                return (Some(pair.clone()), 0);
            }
            let a = split_sentences(&pair.sentence1);
            let b = split_sentences(&pair.sentence2);
            if a.len() < 2 && b.len() < 2 {
                return (Some(pair.clone()), 0);
            }
            let mut used_a = vec![false; a.len()];
            let mut used_b = vec![false; b.len()];
            let mut removed = 0;
            for (i, sa) in a.iter().enumerate() {
                for (j, sb) in b.iter().enumerate() {
                    if model.predict_proba(sa, sb) > tau {
                        used_a[i] = true;
                        used_b[j] = true;
                        removed += 1;
                    }
                }
            }
            if removed == 0 {
                return (Some(pair.clone()), 0);
            }
            let keep = |parts: &[&str], used: &[bool]| -> String {
                parts.iter().zip(used).filter(|(_, u)| !**u).map(|(s, _)| *s).collect::<Vec<_>>().join(" ")
            };
            let s1 = keep(&a, &used_a);
            let s2 = keep(&b, &used_b);
            if s1.is_empty() || s2.is_empty() {
                return (None, removed);
            }
            let mut refined = pair.clone();
            refined.sentence1 = s1;
            refined.sentence2 = s2;
            (Some(refined), removed)
        })
        .collect();

    let mut stats = RefineStats::default();
    let mut out = Vec::with_capacity(outcomes.len());
    for (pair, removed) in outcomes {
        stats.removed_subpairs += removed;
        if removed > 0 {
            stats.modified += 1;
        }
        match pair {
            Some(p) => out.push(p),
            None => stats.dropped += 1,
        }
    }
    Refined { data: out, stats }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    /// 0 is the plain fit on unrefined data.
    pub iteration: usize,
    pub validation: BinaryMetrics,
    pub refine: RefineStats,
    pub train_samples: usize,
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub model: ClassifierModel,
    pub history: Vec<EmIteration>,
    pub best_iteration: usize,
}

impl EmOutcome {
    pub fn best(&self) -> &EmIteration {
        &self.history[self.best_iteration]
    }
}

/// Alternates E- and M-steps until the validation F1 gain drops below
/// `min_f1_gain` or `max_iterations` fits (the plain one included) have run. Each E-step
/// refines the original data with the latest model. Returns the model with
/// the best validation F1 (earliest on ties).
pub fn em_train(
    train_data: &[LabeledPair],
    validation: &[LabeledPair],
    features: &FeatureConfig,
    config: &EmConfig,
) -> Result<EmOutcome, EmError> {
    config.validate().map_err(EmError::Config)?;
    if validation.iter().all(|p| p.label() == BinaryLabel::Discard) {
        return Err(EmError::EmptyValidation);
    }
    let (mut model, report) = train(train_data, features, &config.train)?;
    let mut f1 = evaluate(&model, validation);
    let mut history = vec![EmIteration {
        iteration: 0,
        validation: f1,
        refine: RefineStats::default(),
        train_samples: report.samples,
    }];
    let mut best = (0, model.clone());
    log::info!("em iteration 0: f1={:.4}", f1.f1);

    for iteration in 1..config.max_iterations {
        let refined = e_step_refine(train_data, &model, config.tau);
        let (next, report) = train(&refined.data, features, &config.train)?;
        let metrics = evaluate(&next, validation);
        log::info!(
            "em iteration {iteration}: f1={:.4} modified={} removed={} dropped={}",
            metrics.f1,
            refined.stats.modified,
            refined.stats.removed_subpairs,
            refined.stats.dropped
        );
        history.push(EmIteration { iteration, validation: metrics, refine: refined.stats, train_samples: report.samples });
        if metrics.f1 > history[best.0].validation.f1 {
            best = (iteration, next.clone());
        }
        let gain = metrics.f1 - f1.f1;
        model = next;
        f1 = metrics;
        if gain < config.min_f1_gain {
            break;
        }
    }
    Ok(EmOutcome { model: best.1, history, best_iteration: best.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features() -> FeatureConfig {
        FeatureConfig { hash_dim: 1 << 12, ..Default::default() }
    }

    /// Scores 1 for identical sentences, 0 otherwise, via a huge weight on
    /// the ratio bucket for an exact match.
    fn identity_model() -> ClassifierModel {
        let f = FeatureConfig { pair_features: vec![super::super::PairFeature::RatioBucket], ..features() };
        let mut m = ClassifierModel::zeros(f.clone());
        let x = super::super::featurize("same", "same", &f);
        for (i, _) in x.iter() {
            m.theta[i as usize] = 60.0;
        }
        *m.theta.last_mut().unwrap() = -30.0;
        m
    }

    #[test]
    fn refine_strips_confident_subpairs_from_negatives_only() {
        let m = identity_model();
        assert!(m.predict_proba("Ctx one.", "Ctx one.") > 0.99);
        assert!(m.predict_proba("Ctx one.", "Other stuff entirely here.") < 0.5);
        let data = vec![
            LabeledPair::new("Ctx one. Add 3.", "Ctx one. Sub 4.", 0),
            LabeledPair::new("Ctx one. Add 3.", "Ctx one. Add three.", 4),
            LabeledPair::new("Single.", "Single.", 1),
            LabeledPair::new("A a. B b.", "A a. B b.", 0),
        ];
        let r = e_step_refine(&data, &m, 0.95);
        assert_eq!(r.data.len(), 3);
        assert_eq!(r.data[0].sentence1, "Add 3.");
        assert_eq!(r.data[0].sentence2, "Sub 4.");
        assert_eq!(r.data[1], data[1]);
        assert_eq!(r.data[2], data[2]);
        assert_eq!(r.stats, RefineStats { modified: 2, removed_subpairs: 3, dropped: 1 });
    }

    #[test]
    fn refine_is_noop_without_confident_pairs() {
        let m = ClassifierModel::zeros(features());
        let data = vec![LabeledPair::new("A. B.", "C. D.", 0)];
        let r = e_step_refine(&data, &m, 0.95);
        assert_eq!(r.data, data);
        assert_eq!(r.stats, RefineStats::default());
    }

    #[test]
    fn rejects_bad_config_and_empty_validation() {
        let data = vec![LabeledPair::new("a", "a", 4), LabeledPair::new("a", "b", 0)];
        let bad = EmConfig { tau: 1.0, ..Default::default() };
        assert!(matches!(em_train(&data, &data, &features(), &bad), Err(EmError::Config(_))));
        let bad = EmConfig { max_iterations: 0, ..Default::default() };
        assert!(matches!(em_train(&data, &data, &features(), &bad), Err(EmError::Config(_))));
        let val = vec![LabeledPair::new("a", "b", 2)];
        assert_eq!(em_train(&data, &val, &features(), &EmConfig::default()).unwrap_err(), EmError::EmptyValidation);
    }

    #[test]
    fn single_iteration_is_plain_training() {
        let data = vec![
            LabeledPair::new("add 3 to 4", "add 3 to 4 now", 4),
            LabeledPair::new("x. add 3.", "y. sub 2.", 0),
            LabeledPair::new("mul 2 by 5", "mul 2 by 5 now", 3),
            LabeledPair::new("a. b.", "c. d.", 1),
        ];
        let cfg = EmConfig { max_iterations: 1, ..Default::default() };
        let out = em_train(&data, &data, &features(), &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_iteration, 0);
        let (plain, _) = train(&data, &features(), &cfg.train).unwrap();
        assert_eq!(out.model, plain);
    }
}
