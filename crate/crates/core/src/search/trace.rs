//! Search trace events, JSONL persistence, ledger replay and audits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CandidateStep, SearchConfig};
use crate::equiv::Detector;
use crate::metrics::TokenLedger;

use super::tree::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Expand,
    Prune,
    Select,
    Backup,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventPayload {
    /// A new child created by expansion `batch` of `parent`.
    Expand {
        parent: NodeId,
        batch: u64,
        depth: usize,
        tokens: u64,
        terminal: bool,
        score: Option<f64>,
        text: String,
    },
    Prune {
        parent: NodeId,
        batch: u64,
        representative: NodeId,
    },
    /// MCTS: a selection step of `simulation`. SBS: a beam survivor.
    Select {
        parent: NodeId,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        simulation: Option<usize>,
        value: f64,
    },
    Backup {
        simulation: usize,
        value: f64,
        path_len: usize,
    },
    Terminal {
        answer: Option<String>,
        tokens: u64,
        solved: bool,
    },
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::Expand { .. } => EventKind::Expand,
            EventPayload::Prune { .. } => EventKind::Prune,
            EventPayload::Select { .. } => EventKind::Select,
            EventPayload::Backup { .. } => EventKind::Backup,
            EventPayload::Terminal { .. } => EventKind::Terminal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub problem_id: String,
    pub seq: u64,
    pub node_id: NodeId,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// Append-only, totally ordered event log of one search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub problem_id: String,
    pub events: Vec<TraceEvent>,
}

impl SearchTrace {
    pub fn new(problem_id: impl Into<String>) -> Self {
        SearchTrace { problem_id: problem_id.into(), events: Vec::new() }
    }

    pub fn push(&mut self, node_id: NodeId, payload: EventPayload) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { problem_id: self.problem_id.clone(), seq, node_id, payload });
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.payload.kind() == kind).count()
    }

    pub fn final_record(&self) -> Option<&EventPayload> {
        self.events.last().map(|e| &e.payload).filter(|p| p.kind() == EventKind::Terminal)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trace file {path} line {line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
}

/// Writes one JSON object per event, one per line.
pub fn emit_trace(trace: &SearchTrace, path: &Path) -> Result<(), TraceError> {
    let io = |source| TraceError::Io { path: path.to_path_buf(), source };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for e in &trace.events {
        serde_json::to_writer(&mut w, e).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let file = fs::File::open(path).map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|source| TraceError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(event);
    }
    Ok(out)
}

/// Rebuilds the token ledger by folding EXPAND token counts and PRUNE events.
pub fn replay_ledger(events: &[TraceEvent]) -> TokenLedger {
    let mut ledger = TokenLedger::new();
    for e in events {
        match &e.payload {
            EventPayload::Expand { depth, tokens, .. } => ledger.record(*depth, *tokens),
            EventPayload::Prune { .. } => ledger.record_pruned(1),
            _ => {}
        }
    }
    ledger
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditSummary {
    pub batches: usize,
    pub candidates: usize,
    pub pruned: usize,
    pub detector_calls: usize,
}

struct Batch<'a> {
    parent: NodeId,
    members: Vec<(NodeId, &'a str)>,
    pruned: BTreeMap<NodeId, NodeId>,
}

fn batches(events: &[TraceEvent]) -> Result<BTreeMap<u64, Batch<'_>>, Vec<String>> {
    let mut out: BTreeMap<u64, Batch> = BTreeMap::new();
    let mut problems = Vec::new();
    for e in events {
        match &e.payload {
            EventPayload::Expand { parent, batch, text, .. } => {
                let b = out.entry(*batch).or_insert_with(|| Batch {
                    parent: *parent,
                    members: Vec::new(),
                    pruned: BTreeMap::new(),
                });
                if b.parent != *parent {
                    problems.push(format!("batch {batch} mixes parents {} and {parent}", b.parent));
                }
                b.members.push((e.node_id, text.as_str()));
            }
            EventPayload::Prune { parent, batch, representative } => match out.get_mut(batch) {
                Some(b) if b.parent == *parent && b.members.iter().any(|(id, _)| *id == e.node_id) => {
                    b.pruned.insert(e.node_id, *representative);
                }
                _ => problems.push(format!("PRUNE of node {} does not reference an EXPAND in batch {batch}", e.node_id)),
            },
            _ => {}
        }
    }
    if problems.is_empty() { Ok(out) } else { Err(problems) }
}

/// Re-checks every pruning decision in a trace against `detector`: no two
/// retained siblings are equivalent, and every pruned sibling links to a
/// retained, equivalent representative in its own batch.
pub fn audit_pruning(events: &[TraceEvent], detector: &dyn Detector) -> Result<AuditSummary, Vec<String>> {
    let batches = batches(events)?;
    let mut problems = Vec::new();
    let mut summary = AuditSummary::default();
    for (id, b) in &batches {
        summary.batches += 1;
        summary.candidates += b.members.len();
        summary.pruned += b.pruned.len();
        let text_of = |node: NodeId| b.members.iter().find(|(n, _)| *n == node).map(|(_, t)| *t);
        let retained: Vec<(NodeId, &str)> =
            b.members.iter().filter(|(n, _)| !b.pruned.contains_key(n)).copied().collect();
        for (i, (na, ta)) in retained.iter().enumerate() {
            for (nb, tb) in &retained[i + 1..] {
                summary.detector_calls += 1;
                match detector.detect(ta, tb) {
                    Ok(v) if v.equivalent() => {
                        problems.push(format!("batch {id}: retained siblings {na} and {nb} are equivalent"))
                    }
                    Ok(_) => {}
                    Err(e) => problems.push(format!("batch {id}: detector failed on {na}/{nb}: {e}")),
                }
            }
        }
        for (&pruned, &rep) in &b.pruned {
            if b.pruned.contains_key(&rep) {
                problems.push(format!("batch {id}: node {pruned} links to pruned node {rep}"));
                continue;
            }
            let (Some(tp), Some(tr)) = (text_of(pruned), text_of(rep)) else {
                problems.push(format!("batch {id}: representative {rep} of {pruned} is not a sibling"));
                continue;
            };
            summary.detector_calls += 1;
            match detector.detect(tp, tr) {
                Ok(v) if v.equivalent() => {}
                Ok(_) => problems.push(format!("batch {id}: pruned {pruned} is not equivalent to {rep}")),
                Err(e) => problems.push(format!("batch {id}: detector failed on {pruned}/{rep}: {e}")),
            }
        }
    }
    if problems.is_empty() { Ok(summary) } else { Err(problems) }
}

/// Checks that no expansion exceeded the configured width or depth.
pub fn audit_limits(events: &[TraceEvent], config: &SearchConfig) -> Result<(), Vec<String>> {
    let batches = batches(events)?;
    let mut problems = Vec::new();
    for (id, b) in &batches {
        if b.members.len() > config.tree_max_width {
            problems.push(format!("batch {id} has {} candidates > width {}", b.members.len(), config.tree_max_width));
        }
    }
    for e in events {
        if let EventPayload::Expand { depth, .. } = e.payload {
            if depth > config.tree_max_depth {
                problems.push(format!("node {} at depth {depth} > {}", e.node_id, config.tree_max_depth));
            }
        }
    }
    if problems.is_empty() { Ok(()) } else { Err(problems) }
}

/// Steps of the path ending at `node`, rebuilt from EXPAND events.
pub fn replay_path(events: &[TraceEvent], node: NodeId) -> Vec<CandidateStep> {
    let mut by_node: BTreeMap<NodeId, (NodeId, CandidateStep)> = BTreeMap::new();
    for e in events {
        if let EventPayload::Expand { parent, tokens, terminal, score, text, .. } = &e.payload {
            let mut step = CandidateStep::new(text.clone(), *tokens).terminal(*terminal);
            step.score = *score;
            by_node.insert(e.node_id, (*parent, step));
        }
    }
    let mut out = Vec::new();
    let mut cur = node;
    while let Some((parent, step)) = by_node.get(&cur) {
        out.push(step.clone());
        cur = *parent;
    }
    out.reverse();
    out
}
