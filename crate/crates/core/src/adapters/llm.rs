//! Remote generator, process reward model and pair scorer.

use serde::{Deserialize, Serialize};

use crate::domain::{CandidateStep, ProblemInstance};
use crate::equiv::{DetectError, PairScorer, VerdictSource};
use crate::search::{AnswerPattern, Generator, RewardModel, DEFAULT_ANSWER_PATTERN};

use super::http::{excerpt, ChatClient, ChatMessage, EndpointConfig};
use super::AdapterError;

pub const DEFAULT_SYSTEM_PROMPT: &str = "Solve the problem step by step. Write exactly one reasoning step per \
reply. When you reach the result, end that step with \"The answer is X.\"";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: EndpointConfig,
    #[serde(default = "default_system")]
    pub system_prompt: String,
    #[serde(default = "default_stop")]
    pub stop: Vec<String>,
    #[serde(default = "default_pattern")]
    pub answer_pattern: String,
    /// Ask for token log-probabilities to score candidates.
    #[serde(default = "default_true")]
    pub logprobs: bool,
}

fn default_system() -> String {
    DEFAULT_SYSTEM_PROMPT.into()
}
fn default_stop() -> Vec<String> {
    vec!["\n\n".into()]
}
fn default_pattern() -> String {
    DEFAULT_ANSWER_PATTERN.into()
}
fn default_true() -> bool {
    true
}

impl LlmConfig {
    pub fn new(endpoint: EndpointConfig) -> Self {
        LlmConfig {
            endpoint,
            system_prompt: default_system(),
            stop: default_stop(),
            answer_pattern: default_pattern(),
            logprobs: true,
        }
    }
}

/// Steps so far, one per line, after the problem statement.
fn render_path(problem: &ProblemInstance, path: &[CandidateStep]) -> String {
    let mut s = format!("Problem: {}", problem.statement);
    for (i, step) in path.iter().enumerate() {
        s.push_str(&format!("\nStep {}: {}", i + 1, step.text.trim()));
    }
    s
}

/// Candidate generator backed by a chat-completions endpoint.
pub struct LlmGenerator {
    client: ChatClient,
    config: LlmConfig,
    pattern: AnswerPattern,
}

impl LlmGenerator {
    pub fn new(config: LlmConfig) -> Result<Self, AdapterError> {
        let pattern = AnswerPattern::new(&config.answer_pattern)
            .map_err(|e| AdapterError::Config(format!("answer_pattern: {e}")))?;
        Ok(LlmGenerator { client: ChatClient::new(config.endpoint.clone())?, config, pattern })
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }

    /// Samples `n` next-step candidates. Token counts come from the
    /// server's reported completion usage.
    pub fn llm_expand(
        &self,
        problem: &ProblemInstance,
        path: &[CandidateStep],
        n: usize,
        temperature: f64,
        max_new_tokens: usize,
    ) -> Result<Vec<CandidateStep>, AdapterError> {
        if n == 0 {
            return Err(AdapterError::Config("requested 0 candidates".into()));
        }
        let messages = vec![
            ChatMessage::system(self.config.system_prompt.clone()),
            ChatMessage::user(render_path(problem, path)),
        ];
        let mut req = self.client.request(messages, n, temperature, max_new_tokens);
        req.logprobs = self.config.logprobs;
        req.stop = self.config.stop.clone();
        let mut resp = self.client.complete(&req)?;
        if resp.choices.is_empty() {
            return Err(AdapterError::Parse { message: "response has no choices".into(), excerpt: String::new() });
        }
        resp.choices.sort_by_key(|c| c.index);
        let tokens = resp.tokens_per_choice();
        let out = resp
            .choices
            .iter()
            .zip(tokens)
            .take(n)
            .map(|(c, t)| {
                let text = c.text().trim().to_owned();
                let terminal = self.pattern.is_match(&text);
                let mut step = CandidateStep::new(text, t).terminal(terminal);
                step.score = c.mean_logprob();
                step
            })
            .collect();
        Ok(out)
    }
}

impl Generator for LlmGenerator {
    fn expand(
        &self,
        problem: &ProblemInstance,
        path: &[CandidateStep],
        n: usize,
        temperature: f64,
        max_new_tokens: usize,
    ) -> Result<Vec<CandidateStep>, AdapterError> {
        self.llm_expand(problem, path, n, temperature, max_new_tokens)
    }

    fn extract_answer(&self, step: &CandidateStep) -> Option<String> {
        self.pattern.extract(&step.text)
    }
}

#[derive(Deserialize)]
struct ScoreBody {
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    reward: Option<f64>,
    #[serde(default)]
    probability: Option<f64>,
}

/// Reads a scalar from a response body: a top-level `score`, `reward` or
/// `probability` field, else the first choice's content as a number or as a
/// JSON object with one of those fields.
pub(crate) fn parse_scalar(body: &str) -> Result<f64, AdapterError> {
    let bad = |message: &str| AdapterError::Parse { message: message.into(), excerpt: excerpt(body) };
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| bad(&e.to_string()))?;
    let pick = |v: &serde_json::Value| {
        serde_json::from_value::<ScoreBody>(v.clone()).ok().and_then(|b| b.score.or(b.reward).or(b.probability))
    };
    if let Some(x) = pick(&value) {
        return Ok(x);
    }
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| bad("no score field and no message content"))?
        .trim();
    if let Ok(x) = content.parse::<f64>() {
        return Ok(x);
    }
    serde_json::from_str::<serde_json::Value>(content)
        .ok()
        .and_then(|v| if v.is_number() { v.as_f64() } else { pick(&v) })
        .ok_or_else(|| bad("message content is not a number"))
}

/// Process reward model served behind a chat-completions endpoint.
pub struct PrmClient {
    client: ChatClient,
}

impl PrmClient {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, AdapterError> {
        Ok(PrmClient { client: ChatClient::new(endpoint)? })
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }

    /// Scores the path ending in its newest step, clamped to `[0, 1]`.
    pub fn prm_score(&self, problem: &ProblemInstance, path: &[CandidateStep]) -> Result<f64, AdapterError> {
        let steps: Vec<&str> = path.iter().map(|s| s.text.as_str()).collect();
        let messages = vec![ChatMessage::user(problem.statement.clone()), ChatMessage::assistant(steps.join("\n\n"))];
        let req = self.client.request(messages, 1, 0.0, 1);
        let body = self.client.post(&serde_json::to_value(&req).expect("request serializes"))?;
        let raw = parse_scalar(&body)?;
        if raw.is_nan() {
            return Err(AdapterError::Parse { message: "score is NaN".into(), excerpt: excerpt(&body) });
        }
        let clamped = raw.clamp(0.0, 1.0);
        if clamped != raw {
            log::warn!("reward {raw} for problem {} outside [0, 1]; clamped to {clamped}", problem.id);
        }
        Ok(clamped)
    }
}

impl RewardModel for PrmClient {
    fn score(&self, problem: &ProblemInstance, path: &[CandidateStep]) -> Result<f64, AdapterError> {
        self.prm_score(problem, path)
    }
}

pub const REMOTE_SCORER_PROMPT: &str = "Return only the probability, between 0 and 1, that the two reasoning \
steps below are semantically equivalent.";

/// Equivalence probability from a remotely served classifier.
pub struct RemoteScorer {
    client: ChatClient,
}

impl RemoteScorer {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, AdapterError> {
        Ok(RemoteScorer { client: ChatClient::new(endpoint)? })
    }
}

impl PairScorer for RemoteScorer {
    fn probability(&self, a: &str, b: &str) -> Result<f64, DetectError> {
        let messages = vec![
            ChatMessage::system(REMOTE_SCORER_PROMPT),
            ChatMessage::user(format!("Sentence1: {a}\nSentence2: {b}")),
        ];
        let req = self.client.request(messages, 1, 0.0, 8);
        let body = self
            .client
            .post(&serde_json::to_value(&req).expect("request serializes"))
            .map_err(|e| DetectError::Transport(e.to_string()))?;
        let p = parse_scalar(&body).map_err(|e| DetectError::Unavailable(e.to_string()))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(DetectError::Unavailable(format!("probability {p} outside [0, 1]")));
        }
        Ok(p)
    }

    fn source(&self) -> VerdictSource {
        VerdictSource::External
    }
}
