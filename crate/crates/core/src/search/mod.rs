//! MCTS and step-level beam search with sibling pruning.
//!
//! Both engines share one expansion routine: request up to
//! `tree_max_width` candidates, charge their generation tokens to the ledger,
//! then (when pruning is on and a detector is supplied) group the sibling
//! batch and flag every non-representative as pruned. Pruned nodes stay in
//! the tree but are never selected.

mod contract;
mod mcts;
mod sbs;
pub mod trace;
pub mod tree;

use serde::Serialize;
use thiserror::Error;

use crate::adapters::AdapterError;
use crate::domain::{Algorithm, CandidateStep, ProblemInstance, SearchConfig, ValidationError};
use crate::equiv::{group_candidates, group_candidates_lenient, select_representatives, Detector, GroupingError};
use crate::metrics::{AnswerChecker, NormalizedEquality, TokenLedger};

pub use contract::{AnswerPattern, Generator, RewardModel, DEFAULT_ANSWER_PATTERN};
pub use mcts::mcts_search;
pub use sbs::sbs_search;
pub use trace::{
    audit_limits, audit_pruning, emit_trace, read_trace, replay_ledger, replay_path, AuditSummary, EventKind,
    EventPayload, SearchTrace, TraceError, TraceEvent,
};
pub use tree::{NodeId, SearchTree, SearchTreeNode};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    Config(#[from] ValidationError),
    #[error("{algorithm:?} search requested with a config for {configured:?}")]
    AlgorithmMismatch { algorithm: Algorithm, configured: Algorithm },
    #[error("problem {problem}: generator failed at node {node}: {source}")]
    Generator { problem: String, node: NodeId, source: AdapterError },
    #[error("problem {problem}: reward model failed at node {node}: {source}")]
    Reward { problem: String, node: NodeId, source: AdapterError },
    #[error("problem {problem}: detector failed in sibling batch of node {node}: {source}")]
    Detector { problem: String, node: NodeId, source: GroupingError },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SearchStats {
    pub simulations: usize,
    pub expansions: usize,
    pub detector_calls: usize,
    /// Pairs whose detection failed and were treated as distinct.
    pub detector_failures: usize,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub problem_id: String,
    pub answer: Option<String>,
    pub solved: bool,
    /// Node whose path produced the answer (the root when nothing was found).
    pub final_node: NodeId,
    pub final_path: Vec<CandidateStep>,
    pub ledger: TokenLedger,
    pub trace: SearchTrace,
    pub tree: SearchTree,
    pub stats: SearchStats,
    /// SBS only: the surviving beam, best first.
    pub beam: Vec<NodeId>,
}

/// Runs the engine named by `config.algorithm`.
pub fn search(
    problem: &ProblemInstance,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
    detector: Option<&dyn Detector>,
    config: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    match config.algorithm {
        Algorithm::Mcts => mcts_search(problem, generator, reward, detector, config),
        Algorithm::Sbs => sbs_search(problem, generator, reward, detector, config),
    }
}

pub(crate) struct Engine<'a> {
    pub problem: &'a ProblemInstance,
    pub generator: &'a dyn Generator,
    pub reward: &'a dyn RewardModel,
    pub detector: Option<&'a dyn Detector>,
    pub config: &'a SearchConfig,
    pub tree: SearchTree,
    pub ledger: TokenLedger,
    pub trace: SearchTrace,
    pub stats: SearchStats,
}

impl<'a> Engine<'a> {
    pub fn new(
        problem: &'a ProblemInstance,
        generator: &'a dyn Generator,
        reward: &'a dyn RewardModel,
        detector: Option<&'a dyn Detector>,
        config: &'a SearchConfig,
        algorithm: Algorithm,
    ) -> Result<Self, SearchError> {
        config.validate()?;
        if config.algorithm != algorithm {
            return Err(SearchError::AlgorithmMismatch { algorithm, configured: config.algorithm });
        }
        let root_terminal = generator.is_terminal(problem, &[]);
        Ok(Engine {
            problem,
            generator,
            reward,
            detector: if config.pruning_enabled { detector } else { None },
            config,
            tree: SearchTree::new(root_terminal),
            ledger: TokenLedger::new(),
            trace: SearchTrace::new(problem.id.clone()),
            stats: SearchStats::default(),
        })
    }

    /// Expands `node` and prunes the new sibling batch. Returns all new
    /// children, pruned ones included.
    pub fn expand(&mut self, node: NodeId) -> Result<Vec<NodeId>, SearchError> {
        let path = self.tree.path(node);
        let width = self.config.tree_max_width;
        let mut candidates = self
            .generator
            .expand(self.problem, &path, width, self.config.temperature, self.config.max_new_tokens)
            .map_err(|source| SearchError::Generator { problem: self.problem.id.clone(), node, source })?;
        if candidates.len() > width {
            log::warn!("generator returned {} candidates for width {width}; truncating", candidates.len());
            candidates.truncate(width);
        }
        let batch = self.stats.expansions as u64;
        self.stats.expansions += 1;
        self.tree.nodes[node].expanded = true;

        let mut children = Vec::with_capacity(candidates.len());
        let mut child_path = path;
        for cand in &candidates {
            child_path.push(cand.clone());
            let terminal = self.generator.is_terminal(self.problem, &child_path);
            child_path.pop();
            let id = self.tree.add_child(node, cand.clone(), terminal);
            let depth = self.tree.nodes[id].depth;
            self.ledger.record(depth, cand.gen_tokens);
            self.trace.push(
                id,
                EventPayload::Expand {
                    parent: node,
                    batch,
                    depth,
                    tokens: cand.gen_tokens,
                    terminal,
                    score: cand.score,
                    text: cand.text.clone(),
                },
            );
            children.push(id);
        }

        if let (Some(detector), true) = (self.detector, candidates.len() > 1) {
            let grouping = if self.config.detector_fallback {
                group_candidates_lenient(&candidates, detector)
            } else {
                group_candidates(&candidates, detector)
                    .map_err(|source| SearchError::Detector { problem: self.problem.id.clone(), node, source })?
            };
            self.stats.detector_calls += grouping.detector_calls;
            self.stats.detector_failures += grouping.failed_pairs.len();
            let selection = select_representatives(&grouping, &candidates);
            for link in selection.pruned {
                let (id, rep) = (children[link.index], children[link.representative]);
                let n = &mut self.tree.nodes[id];
                n.pruned = true;
                n.representative = Some(rep);
                self.ledger.record_pruned(1);
                self.trace.push(id, EventPayload::Prune { parent: node, batch, representative: rep });
            }
        }
        self.assign_priors(node);
        Ok(children)
    }

    /// Softmax of generator scores over retained children; uniform when any
    /// retained child lacks a score.
    fn assign_priors(&mut self, node: NodeId) {
        let retained: Vec<NodeId> = self.tree.retained_children(node).collect();
        if retained.is_empty() {
            return;
        }
        let scores: Option<Vec<f64>> =
            retained.iter().map(|&c| self.tree.nodes[c].step.as_ref().and_then(|s| s.score)).collect();
        let priors = match scores {
            Some(s) if s.iter().all(|v| v.is_finite()) => {
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / total).collect()
            }
            _ => vec![1.0 / retained.len() as f64; retained.len()],
        };
        for (c, p) in retained.into_iter().zip(priors) {
            self.tree.nodes[c].prior = p;
        }
    }

    /// Reward of the path ending at `node`, cached on the node. The root has
    /// no step to score and is valued 0.
    pub fn evaluate(&mut self, node: NodeId) -> Result<f64, SearchError> {
        if node == 0 {
            return Ok(0.0);
        }
        if let Some(r) = self.tree.nodes[node].reward {
            return Ok(r);
        }
        let path = self.tree.path(node);
        let r = self
            .reward
            .score(self.problem, &path)
            .map_err(|source| SearchError::Reward { problem: self.problem.id.clone(), node, source })?;
        let r = if r.is_nan() { 0.0 } else { r.clamp(0.0, 1.0) };
        self.tree.nodes[node].reward = Some(r);
        Ok(r)
    }

    pub fn can_expand(&self, node: NodeId) -> bool {
        let n = &self.tree.nodes[node];
        !n.terminal && !n.expanded && n.depth < self.config.tree_max_depth
    }

    /// Closes the trace with the TERMINAL record and assembles the outcome.
    pub fn finish(mut self, final_node: NodeId, beam: Vec<NodeId>) -> SearchOutcome {
        let node = &self.tree.nodes[final_node];
        let answer = if node.terminal { node.step.as_ref().and_then(|s| self.generator.extract_answer(s)) } else { None };
        let solved = match (&answer, &self.problem.reference_answer) {
            (Some(a), Some(r)) => NormalizedEquality.matches(a, r),
            _ => false,
        };
        self.trace.push(
            final_node,
            EventPayload::Terminal { answer: answer.clone(), tokens: self.ledger.generated_total, solved },
        );
        SearchOutcome {
            problem_id: self.problem.id.clone(),
            answer,
            solved,
            final_node,
            final_path: self.tree.path(final_node),
            ledger: self.ledger,
            trace: self.trace,
            tree: self.tree,
            stats: self.stats,
            beam,
        }
    }
}
