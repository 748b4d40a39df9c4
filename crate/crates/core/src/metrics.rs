//! Token accounting and the Acc / Tokens / Ratio report math.
//!
//! Only generated tokens are counted. Prompt tokens are not part of the
//! ledger, and reports state this in their `token_accounting` field.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOKEN_ACCOUNTING: &str = "generated-only";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("token count must be nonnegative, got {0}")]
    NegativeTokens(i64),
    #[error("ratio baseline must be positive (got 0 baseline tokens)")]
    ZeroBaseline,
    #[error("problem {0} has no reference answer")]
    MissingReference(String),
}

/// Cumulative generated-token accounting for one search run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub generated_total: u64,
    pub per_depth: BTreeMap<usize, u64>,
    pub pruned_candidates: u64,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a signed token count, rejecting negative values.
    pub fn add(&mut self, depth: usize, tokens: i64) -> Result<(), MetricsError> {
        if tokens < 0 {
            return Err(MetricsError::NegativeTokens(tokens));
        }
        self.record(depth, tokens as u64);
        Ok(())
    }

    pub fn record(&mut self, depth: usize, tokens: u64) {
        self.generated_total += tokens;
        *self.per_depth.entry(depth).or_insert(0) += tokens;
    }

    pub fn record_pruned(&mut self, count: u64) {
        self.pruned_candidates += count;
    }

    /// Associative, commutative merge used when combining per-problem ledgers.
    pub fn merge(&mut self, other: &TokenLedger) {
        self.generated_total += other.generated_total;
        for (&d, &t) in &other.per_depth {
            *self.per_depth.entry(d).or_insert(0) += t;
        }
        self.pruned_candidates += other.pruned_candidates;
    }

    pub fn is_consistent(&self) -> bool {
        self.per_depth.values().sum::<u64>() == self.generated_total
    }
}

/// A percentage value rendered with two decimals.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Percentage(pub f64);

impl Percentage {
    /// Value rounded to two decimals, as rendered in reports.
    pub fn rounded(self) -> f64 {
        (self.0 * 100.0).round() / 100.0
    }
}

impl fmt::Display for Percentage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.0)
    }
}

impl Serialize for Percentage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.rounded())
    }
}

impl<'de> Deserialize<'de> for Percentage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Percentage)
    }
}

/// `100 * tokens / baseline_tokens`.
pub fn compute_ratio(tokens: u64, baseline_tokens: u64) -> Result<Percentage, MetricsError> {
    if baseline_tokens == 0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok(Percentage(100.0 * tokens as f64 / baseline_tokens as f64))
}

/// Answer-equality predicate used for accuracy scoring.
pub trait AnswerChecker: Send + Sync {
    fn matches(&self, answer: &str, reference: &str) -> bool;
}

/// Equality after trimming whitespace and trailing punctuation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedEquality;

impl NormalizedEquality {
    pub fn normalize(s: &str) -> &str {
        s.trim().trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
    }
}

impl AnswerChecker for NormalizedEquality {
    fn matches(&self, answer: &str, reference: &str) -> bool {
        Self::normalize(answer) == Self::normalize(reference)
    }
}

impl<F> AnswerChecker for F
where
    F: Fn(&str, &str) -> bool + Send + Sync,
{
    fn matches(&self, answer: &str, reference: &str) -> bool {
        self(answer, reference)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerRecord {
    pub problem_id: String,
    pub final_answer: Option<String>,
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyOutcome {
    pub accuracy: Percentage,
    pub solved: usize,
    pub counted: usize,
    pub errors: Vec<MetricsError>,
}

/// Percentage of records whose answer matches the reference.
///
/// Records without a reference answer are reported in `errors`. With
/// `strict = true` they still count in the denominator (as unsolved); with
/// `strict = false` they are excluded from it.
pub fn score_accuracy(
    results: &[AnswerRecord],
    checker: &dyn AnswerChecker,
    strict: bool,
) -> AccuracyOutcome {
    let mut solved = 0;
    let mut counted = 0;
    let mut errors = Vec::new();
    for r in results {
        match &r.reference {
            None => {
                errors.push(MetricsError::MissingReference(r.problem_id.clone()));
                if strict {
                    counted += 1;
                }
            }
            Some(reference) => {
                counted += 1;
                if r.final_answer.as_deref().is_some_and(|a| checker.matches(a, reference)) {
                    solved += 1;
                }
            }
        }
    }
    let accuracy = if counted == 0 { 0.0 } else { 100.0 * solved as f64 / counted as f64 };
    AccuracyOutcome { accuracy: Percentage(accuracy), solved, counted, errors }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub problem_id: String,
    pub solved: bool,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    #[serde(rename = "method")]
    pub method_name: String,
    #[serde(rename = "acc")]
    pub accuracy: Percentage,
    pub tokens: u64,
    /// Relative to `baseline`; `None` when the baseline generated no tokens.
    pub ratio: Option<Percentage>,
    pub baseline: String,
    pub per_problem: Vec<ProblemResult>,
    #[serde(default)]
    pub pruned_candidates: u64,
    pub token_accounting: String,
}

impl BenchReport {
    /// Builds a report; `baseline` is `(name, tokens)` of the reference run,
    /// or `None` when this run is its own baseline.
    pub fn build(
        method_name: impl Into<String>,
        per_problem: Vec<ProblemResult>,
        pruned_candidates: u64,
        baseline: Option<(&str, u64)>,
    ) -> Self {
        let method_name = method_name.into();
        let tokens: u64 = per_problem.iter().map(|p| p.tokens).sum();
        let solved = per_problem.iter().filter(|p| p.solved).count();
        let accuracy = if per_problem.is_empty() {
            0.0
        } else {
            100.0 * solved as f64 / per_problem.len() as f64
        };
        let (baseline_name, baseline_tokens) =
            baseline.map(|(n, t)| (n.to_owned(), t)).unwrap_or_else(|| (method_name.clone(), tokens));
        BenchReport {
            ratio: compute_ratio(tokens, baseline_tokens).ok(),
            accuracy: Percentage(accuracy),
            tokens,
            baseline: baseline_name,
            method_name,
            per_problem,
            pruned_candidates,
            token_accounting: TOKEN_ACCOUNTING.to_owned(),
        }
    }
}

/// Renders reports as an aligned Acc / Tokens / Ratio table.
pub fn render_table(reports: &[BenchReport]) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.method_name.clone(),
                format!("{}", r.accuracy),
                r.tokens.to_string(),
                r.ratio.map_or_else(|| "n/a".to_owned(), |p| format!("{p}%")),
            ]
        })
        .collect();
    let header = ["Method", "Acc", "Tokens", "Ratio"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: [&str; 4], out: &mut String| {
        out.push_str(&format!(
            "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}\n",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        ));
    };
    line(header, &mut out);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 6));
    out.push('\n');
    for row in &rows {
        line([&row[0], &row[1], &row[2], &row[3]], &mut out);
    }
    out
}
