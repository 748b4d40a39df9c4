//! Deterministic arithmetic reasoning domain for desk-scale verification.
//!
//! Each problem starts from a value and is solved by a fixed-length chain of
//! add/subtract operations. At every depth a handful of canonical operations
//! are available and exactly one of them lies on the correct path. Candidate
//! steps are surface renderings of canonical operations; two steps are
//! equivalent iff they render the same canonical operation, which the
//! domain can recover by parsing the text back.
//!
//! Everything is derived from stable hashes of `(seed, problem id, path)`,
//! so the generator and reward are pure functions of their inputs.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterError;
use crate::classifier::LabeledPair;
use crate::domain::{CandidateStep, ProblemInstance, ValidationError};
use crate::equiv::OracleDetector;
use crate::search::{Generator, RewardModel};
use crate::util::{rng_from, Fnv64};

const ADD_TEMPLATES: [&str; 8] = [
    "Add {k} to {v} to get {r}.",
    "Adding {k} to {v} gives {r}.",
    "We add {k} to {v}, which gives {r}.",
    "Next, add {k} to {v} to get {r}.",
    "Then {v} + {k} = {r}.",
    "Now we add {k} to {v} and get {r}.",
    "So {v} plus {k} equals {r}.",
    "Increase {v} by {k} to obtain {r}.",
];

const SUB_TEMPLATES: [&str; 8] = [
    "Subtract {k} from {v} to get {r}.",
    "Subtracting {k} from {v} gives {r}.",
    "We subtract {k} from {v}, which gives {r}.",
    "Next, subtract {k} from {v} to get {r}.",
    "Then {v} - {k} = {r}.",
    "Now we subtract {k} from {v} and get {r}.",
    "So {v} minus {k} equals {r}.",
    "Decrease {v} by {k} to obtain {r}.",
];

pub const MAX_VARIANTS: usize = ADD_TEMPLATES.len();
const ANSWER_SUFFIX: &str = " The answer is ";
const OPERAND_RANGE: std::ops::RangeInclusive<i64> = 2..=60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Subtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Op {
    pub kind: OpKind,
    pub operand: i64,
}

impl Op {
    pub fn apply(self, v: i64) -> i64 {
        match self.kind {
            OpKind::Add => v + self.operand,
            OpKind::Subtract => v - self.operand,
        }
    }

    fn templates(self) -> &'static [&'static str; 8] {
        match self.kind {
            OpKind::Add => &ADD_TEMPLATES,
            OpKind::Subtract => &SUB_TEMPLATES,
        }
    }
}

/// Canonical identity of a step: the operation and the value it acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalStep {
    pub op: Op,
    pub input: i64,
}

impl CanonicalStep {
    pub fn output(self) -> i64 {
        self.op.apply(self.input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomainConfig {
    /// Canonical operations available at each depth.
    pub n_ops: usize,
    /// Surface renderings per canonical operation (at most 8).
    pub variants_per_op: usize,
    /// Probability that a candidate after the first re-renders the canonical
    /// operation of an earlier sibling.
    pub duplication_rate: f64,
    pub depth: usize,
    /// Inclusive range of generated tokens per candidate.
    pub tokens_per_step: (u64, u64),
    /// Standard deviation of the Gaussian noise added to rewards.
    pub reward_noise: f64,
    /// Added to the on-path operation's latent plausibility. Fresh
    /// operations are drawn in proportion to plausibility and scored by its
    /// log, so 0 makes the generator uninformative.
    pub prior_signal: f64,
    pub seed: u64,
}

impl Default for SyntheticDomainConfig {
    fn default() -> Self {
        SyntheticDomainConfig {
            n_ops: 10,
            variants_per_op: 8,
            duplication_rate: 0.5,
            depth: 6,
            tokens_per_step: (20, 60),
            reward_noise: 0.05,
            prior_signal: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticDomainConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let bad = |field, reason: &str| Err(ValidationError::Field { field, reason: reason.into() });
        if self.n_ops == 0 {
            return bad("n_ops", "must be positive");
        }
        if self.variants_per_op == 0 || self.variants_per_op > MAX_VARIANTS {
            return bad("variants_per_op", "must lie in 1..=8");
        }
        if !(0.0..=1.0).contains(&self.duplication_rate) {
            return bad("duplication_rate", "must lie in [0, 1]");
        }
        if self.tokens_per_step.0 > self.tokens_per_step.1 {
            return bad("tokens_per_step", "min exceeds max");
        }
        if !(self.reward_noise >= 0.0 && self.reward_noise.is_finite()) {
            return bad("reward_noise", "must be nonnegative");
        }
        if !(self.prior_signal >= 0.0 && self.prior_signal.is_finite()) {
            return bad("prior_signal", "must be nonnegative");
        }
        Ok(())
    }
}

struct TemplateParser {
    regex: Regex,
    kind: OpKind,
}

fn template_regex(template: &str) -> Regex {
    let mut pattern = String::from("^");
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        pattern.push_str(&regex::escape(&rest[..start]));
        let name = &rest[start + 1..start + 2];
        pattern.push_str(&format!("(?P<{name}>-?\\d+)"));
        rest = &rest[start + 3..];
    }
    pattern.push_str(&regex::escape(rest));
    pattern.push('$');
    Regex::new(&pattern).expect("template regex compiles")
}

pub fn render(op: Op, variant: usize, input: i64) -> String {
    op.templates()[variant % MAX_VARIANTS]
        .replace("{k}", &op.operand.to_string())
        .replace("{v}", &input.to_string())
        .replace("{r}", &op.apply(input).to_string())
}

fn render_step(op: Op, variant: usize, input: i64, terminal: bool) -> String {
    let mut text = render(op, variant, input);
    if terminal {
        text.push_str(&format!("{ANSWER_SUFFIX}{}.", op.apply(input)));
    }
    text
}

/// Parses surface text back to its canonical step.
pub struct Canonicalizer {
    parsers: Vec<TemplateParser>,
}

impl Default for Canonicalizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Canonicalizer {
    pub fn new() -> Self {
        let parsers = ADD_TEMPLATES
            .iter()
            .map(|t| TemplateParser { regex: template_regex(t), kind: OpKind::Add })
            .chain(SUB_TEMPLATES.iter().map(|t| TemplateParser { regex: template_regex(t), kind: OpKind::Subtract }))
            .collect();
        Canonicalizer { parsers }
    }

    pub fn canonicalize(&self, text: &str) -> Option<CanonicalStep> {
        let body = match text.find(ANSWER_SUFFIX) {
            Some(i) => &text[..i],
            None => text,
        };
        for p in &self.parsers {
            if let Some(c) = p.regex.captures(body) {
                let num = |n: &str| c.name(n)?.as_str().parse::<i64>().ok();
                let step = CanonicalStep { op: Op { kind: p.kind, operand: num("k")? }, input: num("v")? };
                if step.output() == num("r")? {
                    return Some(step);
                }
            }
        }
        None
    }
}

/// Per-problem facts derived from the seed and problem id.
#[derive(Debug, Clone)]
struct ProblemFacts {
    start: i64,
    /// Operations available at depth `d` (1-based) live at index `d - 1`.
    ops: Vec<Vec<Op>>,
    plausibility: Vec<Vec<f64>>,
    on_path: Vec<usize>,
}

pub struct SyntheticDomain {
    pub config: SyntheticDomainConfig,
    canon: Canonicalizer,
}

impl SyntheticDomain {
    pub fn new(config: SyntheticDomainConfig) -> Result<Self, ValidationError> {
        config.validate()?;
        Ok(SyntheticDomain { config, canon: Canonicalizer::new() })
    }

    pub fn canonicalize(&self, text: &str) -> Option<CanonicalStep> {
        self.canon.canonicalize(text)
    }

    /// Ground-truth detector for this domain.
    pub fn oracle_detector() -> OracleDetector<impl Fn(&str) -> Option<CanonicalStep> + Send + Sync> {
        let canon = Canonicalizer::new();
        OracleDetector::new(move |s: &str| canon.canonicalize(s))
    }

    fn problem_hash(&self, id: &str) -> Fnv64 {
        Fnv64::new().str("synthetic").u64(self.config.seed).str(id)
    }

    fn facts(&self, id: &str) -> ProblemFacts {
        let mut rng = rng_from(self.problem_hash(id).str("facts").finish());
        let start = rng.random_range(10..=99);
        let mut ops = Vec::with_capacity(self.config.depth);
        let mut plausibility = Vec::with_capacity(self.config.depth);
        let mut on_path = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            let mut layer: Vec<Op> = Vec::with_capacity(self.config.n_ops);
            while layer.len() < self.config.n_ops {
                let kind = if rng.random_bool(0.5) { OpKind::Add } else { OpKind::Subtract };
                let op = Op { kind, operand: rng.random_range(OPERAND_RANGE) };
                if !layer.contains(&op) {
                    layer.push(op);
                }
            }
            let target = rng.random_range(0..layer.len());
            let plaus = (0..layer.len())
                .map(|i| {
                    let u: f64 = rng.random_range(0.05..1.0);
                    if i == target { u + self.config.prior_signal } else { u }
                })
                .collect();
            ops.push(layer);
            plausibility.push(plaus);
            on_path.push(target);
        }
        ProblemFacts { start, ops, plausibility, on_path }
    }

    pub fn problem(&self, index: usize) -> ProblemInstance {
        let id = format!("syn-{index:04}");
        let facts = self.facts(&id);
        let answer = self.solution_steps(&facts).last().map_or(facts.start, |s| s.output());
        ProblemInstance::new(
            id,
            format!(
                "Start from {} and apply {} arithmetic operations to reach the target value.",
                facts.start, self.config.depth
            ),
        )
        .with_answer(answer.to_string())
    }

    pub fn problems(&self, count: usize) -> Vec<ProblemInstance> {
        (0..count).map(|i| self.problem(i)).collect()
    }

    fn solution_steps(&self, facts: &ProblemFacts) -> Vec<CanonicalStep> {
        let mut v = facts.start;
        let mut out = Vec::with_capacity(facts.ops.len());
        for (layer, &t) in facts.ops.iter().zip(&facts.on_path) {
            let step = CanonicalStep { op: layer[t], input: v };
            v = step.output();
            out.push(step);
        }
        out
    }

    /// Canonical steps of the correct path for a problem.
    pub fn solution(&self, problem: &ProblemInstance) -> Vec<CanonicalStep> {
        self.solution_steps(&self.facts(&problem.id))
    }

    fn parse_path(&self, path: &[CandidateStep]) -> Result<Vec<CanonicalStep>, AdapterError> {
        path.iter()
            .map(|s| {
                self.canon.canonicalize(&s.text).ok_or_else(|| AdapterError::Parse {
                    message: "step is not a synthetic-domain rendering".into(),
                    excerpt: excerpt(&s.text),
                })
            })
            .collect()
    }

    /// Keyed by canonical steps, so equivalent wordings reach the same state.
    fn path_hash(&self, problem: &ProblemInstance, steps: &[CanonicalStep], tag: &str) -> u64 {
        steps
            .iter()
            .fold(self.problem_hash(&problem.id).str(tag), |h, s| {
                h.u64(matches!(s.op.kind, OpKind::Add) as u64).u64(s.op.operand as u64).u64(s.input as u64)
            })
            .finish()
    }

    /// Emits `n` candidates for the node reached by `path`.
    pub fn synthetic_expand(
        &self,
        problem: &ProblemInstance,
        path: &[CandidateStep],
        n: usize,
    ) -> Result<Vec<CandidateStep>, AdapterError> {
        if path.len() >= self.config.depth || n == 0 {
            return Ok(Vec::new());
        }
        let facts = self.facts(&problem.id);
        let parsed = self.parse_path(path)?;
        let input = parsed.last().map_or(facts.start, |s| s.output());
        let layer = &facts.ops[path.len()];
        let plaus = &facts.plausibility[path.len()];
        let terminal = path.len() + 1 == self.config.depth;
        let variants = self.config.variants_per_op;

        let mut rng = rng_from(self.path_hash(problem, &parsed, "expand"));
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        let mut used_variants: Vec<Vec<usize>> = vec![Vec::new(); layer.len()];
        let mut out = Vec::with_capacity(n);
        for c in 0..n {
            let op_idx = if c > 0 && rng.random_bool(self.config.duplication_rate) {
                *chosen.choose(&mut rng).expect("nonempty")
            } else {
                let fresh: Vec<usize> = (0..layer.len()).filter(|i| !chosen.contains(i)).collect();
                match fresh.choose_weighted(&mut rng, |&i| plaus[i]) {
                    Ok(&i) => i,
                    Err(_) => rng.random_range(0..layer.len()),
                }
            };
            let unused: Vec<usize> = (0..variants).filter(|v| !used_variants[op_idx].contains(v)).collect();
            let variant = match unused.choose(&mut rng) {
                Some(&v) => v,
                None => rng.random_range(0..variants),
            };
            used_variants[op_idx].push(variant);
            chosen.push(op_idx);

            let (lo, hi) = self.config.tokens_per_step;
            let tokens = rng.random_range(lo..=hi);
            let jitter: f64 = rng.random_range(-0.05..0.05);
            out.push(
                CandidateStep::new(render_step(layer[op_idx], variant, input, terminal), tokens)
                    .scored(plaus[op_idx].max(1e-6).ln() + jitter)
                    .terminal(terminal),
            );
        }
        Ok(out)
    }

    /// Whether every step of `path` follows the correct solution.
    pub fn on_path(&self, problem: &ProblemInstance, path: &[CandidateStep]) -> Result<bool, AdapterError> {
        let parsed = self.parse_path(path)?;
        let solution = self.solution(problem);
        Ok(parsed.iter().zip(&solution).all(|(a, b)| a == b))
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(120).collect()
}

impl Generator for SyntheticDomain {
    fn expand(
        &self,
        problem: &ProblemInstance,
        path: &[CandidateStep],
        n: usize,
        _temperature: f64,
        _max_new_tokens: usize,
    ) -> Result<Vec<CandidateStep>, AdapterError> {
        self.synthetic_expand(problem, path, n)
    }

    fn is_terminal(&self, _problem: &ProblemInstance, path: &[CandidateStep]) -> bool {
        path.len() >= self.config.depth
    }
}

impl RewardModel for SyntheticDomain {
    /// 1 on the correct path, 0 off it, plus clamped Gaussian noise.
    fn score(&self, problem: &ProblemInstance, path: &[CandidateStep]) -> Result<f64, AdapterError> {
        let parsed = self.parse_path(path)?;
        let solution = self.solution(problem);
        let base = if parsed.iter().zip(&solution).all(|(a, b)| a == b) { 1.0 } else { 0.0 };
        if self.config.reward_noise == 0.0 {
            return Ok(base);
        }
        let mut rng = rng_from(self.path_hash(problem, &parsed, "reward"));
        let noise = Normal::new(0.0, self.config.reward_noise).expect("finite std").sample(&mut rng);
        Ok((base + noise).clamp(0.0, 1.0))
    }
}

/// Shape of a synthetic labeled-pair corpus for classifier training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairCorpusConfig {
    pub pairs: usize,
    pub positive_fraction: f64,
    /// Fraction of negatives rendered with the same template on both sides,
    /// so only the numbers differ.
    pub hard_negative_fraction: f64,
    /// Fraction of negatives that get equivalent context sentences planted
    /// in front of the differing step.
    pub planted_fraction: f64,
    /// Inclusive range of planted context sentences.
    pub planted_sentences: (usize, usize),
    pub variants_per_op: usize,
    pub seed: u64,
}

impl Default for PairCorpusConfig {
    fn default() -> Self {
        PairCorpusConfig {
            pairs: 1000,
            positive_fraction: 0.5,
            hard_negative_fraction: 0.5,
            planted_fraction: 0.0,
            planted_sentences: (2, 3),
            variants_per_op: MAX_VARIANTS,
            seed: 0,
        }
    }
}

fn random_op<R: Rng>(rng: &mut R) -> Op {
    let kind = if rng.random_bool(0.5) { OpKind::Add } else { OpKind::Subtract };
    Op { kind, operand: rng.random_range(OPERAND_RANGE) }
}

fn two_variants<R: Rng>(rng: &mut R, n: usize) -> (usize, usize) {
    let a = rng.random_range(0..n);
    if n == 1 {
        return (a, a);
    }
    let b = (a + rng.random_range(1..n)) % n;
    (a, b)
}

/// Labeled step pairs whose ground truth is canonical-operation equality.
/// Positives are two renderings of one operation (level 4); negatives render
/// two different operations on the same value (level 0).
pub fn pair_corpus(config: &PairCorpusConfig) -> Vec<LabeledPair> {
    let mut rng = rng_from(Fnv64::new().str("pair-corpus").u64(config.seed).finish());
    let nv = config.variants_per_op.clamp(1, MAX_VARIANTS);
    (0..config.pairs)
        .map(|_| {
            let input = rng.random_range(-50..=150);
            let a = random_op(&mut rng);
            if rng.random_bool(config.positive_fraction) {
                let (va, vb) = two_variants(&mut rng, nv);
                return LabeledPair::new(render(a, va, input), render(a, vb, input), 4);
            }
            let b = loop {
                let b = random_op(&mut rng);
                if b != a {
                    break b;
                }
            };
            let (va, vb) = if rng.random_bool(config.hard_negative_fraction) {
                let v = rng.random_range(0..nv);
                (v, v)
            } else {
                (rng.random_range(0..nv), rng.random_range(0..nv))
            };
            let mut s1 = render(a, va, input);
            let mut s2 = render(b, vb, input);
            if rng.random_bool(config.planted_fraction) {
                let (lo, hi) = config.planted_sentences;
                let count = rng.random_range(lo..=hi.max(lo));
                let mut v = input;
                let mut ctx1 = Vec::with_capacity(count + 1);
                let mut ctx2 = Vec::with_capacity(count + 1);
                for _ in 0..count {
                    let op = random_op(&mut rng);
                    let (x, y) = two_variants(&mut rng, nv);
                    ctx1.push(render(op, x, v));
                    ctx2.push(render(op, y, v));
                    v = op.apply(v);
                }
                ctx1.push(render(a, va, v));
                ctx2.push(render(b, vb, v));
                s1 = ctx1.join(" ");
                s2 = ctx2.join(" ");
            }
            LabeledPair::new(s1, s2, 0)
        })
        .collect()
}
