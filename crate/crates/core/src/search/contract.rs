use std::sync::Arc;

use regex::Regex;

use crate::adapters::AdapterError;
use crate::domain::{CandidateStep, ProblemInstance};

/// Produces candidate next steps for a partial reasoning path.
pub trait Generator: Send + Sync {
    /// Returns at most `n` candidates, each carrying its generation cost.
    fn expand(
        &self,
        problem: &ProblemInstance,
        path: &[CandidateStep],
        n: usize,
        temperature: f64,
        max_new_tokens: usize,
    ) -> Result<Vec<CandidateStep>, AdapterError>;

    /// Whether `path` is complete. Defaults to the last step's flag.
    fn is_terminal(&self, _problem: &ProblemInstance, path: &[CandidateStep]) -> bool {
        path.last().is_some_and(|s| s.terminal)
    }

    fn extract_answer(&self, step: &CandidateStep) -> Option<String> {
        AnswerPattern::default().extract(&step.text)
    }
}

/// Process reward: a quality score in `[0, 1]` for a path ending in its
/// newest step. Must be pure with respect to its inputs.
pub trait RewardModel: Send + Sync {
    fn score(&self, problem: &ProblemInstance, path: &[CandidateStep]) -> Result<f64, AdapterError>;
}

impl<G: Generator + ?Sized> Generator for Arc<G> {
    fn expand(
        &self,
        problem: &ProblemInstance,
        path: &[CandidateStep],
        n: usize,
        temperature: f64,
        max_new_tokens: usize,
    ) -> Result<Vec<CandidateStep>, AdapterError> {
        (**self).expand(problem, path, n, temperature, max_new_tokens)
    }

    fn is_terminal(&self, problem: &ProblemInstance, path: &[CandidateStep]) -> bool {
        (**self).is_terminal(problem, path)
    }

    fn extract_answer(&self, step: &CandidateStep) -> Option<String> {
        (**self).extract_answer(step)
    }
}

impl<R: RewardModel + ?Sized> RewardModel for Arc<R> {
    fn score(&self, problem: &ProblemInstance, path: &[CandidateStep]) -> Result<f64, AdapterError> {
        (**self).score(problem, path)
    }
}

/// Final-answer pattern; the first capture group is the answer.
#[derive(Debug, Clone)]
pub struct AnswerPattern(Regex);

pub const DEFAULT_ANSWER_PATTERN: &str =
    r"(?:\\boxed\{([^{}]*)\}|[Tt]he (?:final )?answer is:?\s*\$?([^\s$]+?)\$?\.?\s*$)";

impl AnswerPattern {
    pub fn new(pattern: &str) -> Result<Self, regex::Error> {
        Regex::new(pattern).map(AnswerPattern)
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.0.is_match(text)
    }

    pub fn extract(&self, text: &str) -> Option<String> {
        let caps = self.0.captures_iter(text).last()?;
        caps.iter().skip(1).flatten().next().map(|m| m.as_str().trim().to_owned())
    }
}

impl Default for AnswerPattern {
    fn default() -> Self {
        AnswerPattern::new(DEFAULT_ANSWER_PATTERN).expect("default answer pattern compiles")
    }
}
