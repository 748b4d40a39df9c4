//! Shared domain types: problems, candidate steps, and search configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("{field}: {reason}")]
    Field { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ValidationError {
    ValidationError::Field { field, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: String,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
}

impl ProblemInstance {
    pub fn new(id: impl Into<String>, statement: impl Into<String>) -> Self {
        ProblemInstance { id: id.into(), statement: statement.into(), reference_answer: None }
    }

    pub fn with_answer(mut self, answer: impl Into<String>) -> Self {
        self.reference_answer = Some(answer.into());
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(invalid("id", "must be nonempty"));
        }
        if self.statement.trim().is_empty() {
            return Err(invalid("statement", format!("problem {} has an empty statement", self.id)));
        }
        Ok(())
    }
}

/// Checks ids are nonempty and unique across a benchmark set.
pub fn validate_problem_set(problems: &[ProblemInstance]) -> Result<(), ValidationError> {
    let mut seen = std::collections::HashSet::new();
    for p in problems {
        p.validate()?;
        if !seen.insert(p.id.as_str()) {
            return Err(invalid("id", format!("duplicate problem id {}", p.id)));
        }
    }
    Ok(())
}

/// One generated reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStep {
    pub text: String,
    pub gen_tokens: u64,
    /// Generator preference, higher is better. `None` when the generator
    /// supplies no score.
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub terminal: bool,
}

impl CandidateStep {
    pub fn new(text: impl Into<String>, gen_tokens: u64) -> Self {
        CandidateStep { text: text.into(), gen_tokens, score: None, terminal: false }
    }

    pub fn scored(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn terminal(mut self, terminal: bool) -> Self {
        self.terminal = terminal;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Mcts,
    Sbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    pub simulations: usize,
    pub c_puct: f64,
    pub tree_max_width: usize,
    pub tree_max_depth: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub beam_size: usize,
    pub pruning_enabled: bool,
    pub ratio_threshold: f64,
    pub seed: u64,
    /// What to do when the detector fails on a pair: `true` treats the pair as
    /// non-equivalent and keeps searching, `false` aborts the problem.
    pub detector_fallback: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            algorithm: Algorithm::Mcts,
            simulations: 20,
            c_puct: 1.25,
            tree_max_width: 10,
            tree_max_depth: 50,
            temperature: 0.7,
            max_new_tokens: 1024,
            beam_size: 3,
            pruning_enabled: true,
            ratio_threshold: 0.75,
            seed: 0,
            detector_fallback: true,
        }
    }
}

impl SearchConfig {
    pub fn mcts() -> Self {
        SearchConfig::default()
    }

    pub fn sbs() -> Self {
        SearchConfig { algorithm: Algorithm::Sbs, ..SearchConfig::default() }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.simulations == 0 {
            return Err(invalid("simulations", "must be positive"));
        }
        if !(self.c_puct > 0.0 && self.c_puct.is_finite()) {
            return Err(invalid("c_puct", "must be a positive real"));
        }
        if self.tree_max_width == 0 {
            return Err(invalid("tree_max_width", "must be positive"));
        }
        if self.tree_max_depth == 0 {
            return Err(invalid("tree_max_depth", "must be positive"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be nonnegative"));
        }
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens", "must be positive"));
        }
        if self.beam_size == 0 {
            return Err(invalid("beam_size", "must be positive"));
        }
        if self.beam_size > self.tree_max_width {
            return Err(invalid(
                "beam_size",
                format!("{} exceeds tree_max_width {}", self.beam_size, self.tree_max_width),
            ));
        }
        if !(0.0..=1.0).contains(&self.ratio_threshold) {
            return Err(invalid("ratio_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = SearchConfig::default();
        assert_eq!(c.simulations, 20);
        assert_eq!(c.c_puct, 1.25);
        assert_eq!(c.tree_max_width, 10);
        assert_eq!(c.tree_max_depth, 50);
        assert_eq!(c.temperature, 0.7);
        assert_eq!(c.max_new_tokens, 1024);
        assert_eq!(c.beam_size, 3);
        assert_eq!(c.ratio_threshold, 0.75);
        c.validate().unwrap();
        SearchConfig::sbs().validate().unwrap();
    }

    #[test]
    fn beam_wider_than_tree_rejected() {
        let c = SearchConfig { beam_size: 11, ..SearchConfig::sbs() };
        assert!(matches!(c.validate(), Err(ValidationError::Field { field: "beam_size", .. })));
    }

    #[test]
    fn duplicate_problem_ids_rejected() {
        let ps = vec![ProblemInstance::new("p1", "x"), ProblemInstance::new("p1", "y")];
        assert!(validate_problem_set(&ps).is_err());
        assert!(validate_problem_set(&ps[..1]).is_ok());
        assert!(ProblemInstance::new("", "x").validate().is_err());
        assert!(ProblemInstance::new("p", " ").validate().is_err());
    }
}
