use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use stepprune::adapters::synthetic::{SyntheticDomain, SyntheticDomainConfig};
use stepprune::adapters::AdapterError;
use stepprune::domain::{CandidateStep, ProblemInstance, SearchConfig};
use stepprune::equiv::{DetectError, Detector, Verdict, VerdictSource};
use stepprune::search::*;

fn domain(cfg: SyntheticDomainConfig) -> SyntheticDomain {
    SyntheticDomain::new(cfg).unwrap()
}

fn default_domain(seed: u64) -> SyntheticDomain {
    domain(SyntheticDomainConfig { seed, ..Default::default() })
}

fn mcts_cfg() -> SearchConfig {
    SearchConfig { simulations: 20, tree_max_width: 10, ..SearchConfig::mcts() }
}

fn sbs_cfg() -> SearchConfig {
    SearchConfig { tree_max_width: 10, beam_size: 3, ..SearchConfig::sbs() }
}

#[test]
fn width_one_pruned_equals_vanilla() {
    let d = default_domain(3);
    let oracle = SyntheticDomain::oracle_detector();
    let cfg = SearchConfig { tree_max_width: 1, beam_size: 1, ..mcts_cfg() };
    for p in d.problems(5) {
        let v = mcts_search(&p, &d, &d, None, &cfg).unwrap();
        let q = mcts_search(&p, &d, &d, Some(&oracle), &cfg).unwrap();
        assert_eq!(v.trace, q.trace);
        assert_eq!(v.answer, q.answer);
    }
}

#[test]
fn no_duplication_oracle_pruning_is_identity() {
    let d = domain(SyntheticDomainConfig { duplication_rate: 0.0, seed: 5, ..Default::default() });
    let oracle = SyntheticDomain::oracle_detector();
    for cfg in [mcts_cfg(), sbs_cfg()] {
        for p in d.problems(5) {
            let v = search(&p, &d, &d, None, &cfg).unwrap();
            let q = search(&p, &d, &d, Some(&oracle), &cfg).unwrap();
            assert_eq!(v.trace, q.trace);
            assert_eq!(v.ledger, q.ledger);
            assert_eq!(v.answer, q.answer);
            assert_eq!(q.ledger.pruned_candidates, 0);
        }
    }
}

#[test]
fn pruning_disabled_ignores_detector() {
    let d = default_domain(1);
    let oracle = SyntheticDomain::oracle_detector();
    let cfg = SearchConfig { pruning_enabled: false, ..mcts_cfg() };
    let p = d.problem(0);
    let v = mcts_search(&p, &d, &d, None, &cfg).unwrap();
    let q = mcts_search(&p, &d, &d, Some(&oracle), &cfg).unwrap();
    assert_eq!(v.trace, q.trace);
}

/// All root-to-leaf paths of the synthetic tree with their terminal reward.
fn enumerate(d: &SyntheticDomain, p: &ProblemInstance, width: usize) -> Vec<(Vec<CandidateStep>, f64)> {
    fn walk(
        d: &SyntheticDomain,
        p: &ProblemInstance,
        width: usize,
        path: &mut Vec<CandidateStep>,
        out: &mut Vec<(Vec<CandidateStep>, f64)>,
    ) {
        if d.is_terminal(p, path) {
            out.push((path.clone(), d.score(p, path).unwrap()));
            return;
        }
        for c in d.synthetic_expand(p, path, width).unwrap() {
            path.push(c);
            walk(d, p, width, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(d, p, width, &mut Vec::new(), &mut out);
    out
}

#[test]
fn tiny_tree_mcts_finds_exhaustive_optimum() {
    let d = domain(SyntheticDomainConfig { n_ops: 3, depth: 3, duplication_rate: 0.0, seed: 11, ..Default::default() });
    let cfg = SearchConfig { simulations: 200, tree_max_width: 3, ..SearchConfig::mcts() };
    for p in d.problems(10) {
        let leaves = enumerate(&d, &p, 3);
        assert_eq!(leaves.len(), 27);
        let best = leaves.iter().map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max);
        let out = mcts_search(&p, &d, &d, None, &cfg).unwrap();
        let reward = d.score(&p, &out.final_path).unwrap();
        assert_eq!(out.final_path.len(), 3);
        assert_eq!(reward, best, "{}", p.id);
    }
}

struct TerminalRoot;

impl Generator for TerminalRoot {
    fn expand(&self, _: &ProblemInstance, _: &[CandidateStep], _: usize, _: f64, _: usize) -> Result<Vec<CandidateStep>, AdapterError> {
        panic!("a terminal root is never expanded")
    }

    fn is_terminal(&self, _: &ProblemInstance, _: &[CandidateStep]) -> bool {
        true
    }
}

impl RewardModel for TerminalRoot {
    fn score(&self, _: &ProblemInstance, _: &[CandidateStep]) -> Result<f64, AdapterError> {
        Ok(0.0)
    }
}

#[test]
fn terminal_root_yields_single_terminal_event() {
    let p = ProblemInstance::new("p", "already solved");
    for cfg in [mcts_cfg(), sbs_cfg()] {
        let out = search(&p, &TerminalRoot, &TerminalRoot, None, &cfg).unwrap();
        assert_eq!(out.trace.events.len(), 1);
        assert_eq!(out.trace.events[0].payload.kind(), EventKind::Terminal);
        assert_eq!(out.ledger.generated_total, 0);
        assert_eq!(out.answer, None);
    }
}

#[test]
fn trace_round_trip_and_replay() {
    let d = default_domain(9);
    let oracle = SyntheticDomain::oracle_detector();
    let dir = tempfile::tempdir().unwrap();
    for (i, cfg) in [mcts_cfg(), sbs_cfg()].into_iter().enumerate() {
        let p = d.problem(i);
        let out = search(&p, &d, &d, Some(&oracle), &cfg).unwrap();
        let path = dir.path().join(format!("t{i}.jsonl"));
        emit_trace(&out.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), out.trace.events.len());
        let events = read_trace(&path).unwrap();
        assert_eq!(events, out.trace.events);

        let replayed = replay_ledger(&events);
        assert_eq!(replayed, out.ledger);
        // independent fold over the raw JSON
        let total: u64 = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["event"] == "EXPAND")
            .map(|v| v["payload"]["tokens"].as_u64().unwrap())
            .sum();
        assert_eq!(total, out.ledger.generated_total);
        assert_eq!(out.trace.count(EventKind::Prune) as u64, out.ledger.pruned_candidates);
        assert!(out.ledger.pruned_candidates > 0);

        let last = text.lines().last().unwrap();
        let v: serde_json::Value = serde_json::from_str(last).unwrap();
        assert_eq!(v["event"], "TERMINAL");
        assert_eq!(v["payload"]["tokens"].as_u64().unwrap(), out.ledger.generated_total);
        assert_eq!(replay_path(&events, out.final_node), out.final_path);
    }
    let err = read_trace(&dir.path().join("missing.jsonl")).unwrap_err();
    assert!(err.to_string().contains("missing.jsonl"));
}

#[test]
fn backup_conservation_and_pruned_nodes_unvisited() {
    let d = default_domain(4);
    let oracle = SyntheticDomain::oracle_detector();
    for p in d.problems(10) {
        let out = mcts_search(&p, &d, &d, Some(&oracle), &mcts_cfg()).unwrap();
        assert_eq!(out.tree.root().n, 20);
        assert_eq!(out.stats.simulations, 20);
        assert!(out.tree.visits_conserved());
        for node in &out.tree.nodes {
            if node.pruned {
                assert_eq!(node.n, 0);
                assert!(!node.expanded);
                assert!(node.representative.is_some());
            }
        }
        for e in &out.trace.events {
            if e.payload.kind() == EventKind::Select {
                assert!(!out.tree.nodes[e.node_id].pruned);
            }
        }
    }
}

#[test]
fn searches_are_deterministic() {
    let oracle = SyntheticDomain::oracle_detector();
    for cfg in [mcts_cfg(), sbs_cfg()] {
        let a = default_domain(21);
        let b = default_domain(21);
        let p = a.problem(2);
        let x = search(&p, &a, &a, Some(&oracle), &cfg).unwrap();
        let y = search(&p, &b, &b, Some(&oracle), &cfg).unwrap();
        assert_eq!(x.trace, y.trace);
    }
}

#[test]
fn audits_hold_on_seeded_runs() {
    let oracle = SyntheticDomain::oracle_detector();
    for seed in 0..4 {
        let d = default_domain(seed);
        for cfg in [mcts_cfg(), sbs_cfg()] {
            for p in d.problems(3) {
                let out = search(&p, &d, &d, Some(&oracle), &cfg).unwrap();
                let summary = audit_pruning(&out.trace.events, &oracle).unwrap();
                assert_eq!(summary.pruned as u64, out.ledger.pruned_candidates);
                audit_limits(&out.trace.events, &cfg).unwrap();
            }
        }
    }
}

#[test]
fn audit_flags_tampered_traces() {
    let d = default_domain(2);
    let oracle = SyntheticDomain::oracle_detector();
    let p = d.problem(0);
    let out = mcts_search(&p, &d, &d, Some(&oracle), &mcts_cfg()).unwrap();
    // dropping a PRUNE leaves two equivalent siblings retained
    let mut events = out.trace.events.clone();
    let i = events.iter().position(|e| e.payload.kind() == EventKind::Prune).unwrap();
    events.remove(i);
    assert!(audit_pruning(&events, &oracle).is_err());
    // a vanilla trace with duplicates fails the retained-sibling check
    let vanilla = mcts_search(&p, &d, &d, None, &mcts_cfg()).unwrap();
    assert!(audit_pruning(&vanilla.trace.events, &oracle).is_err());
    let narrow = SearchConfig { tree_max_width: 3, ..mcts_cfg() };
    assert!(audit_limits(&out.trace.events, &narrow).is_err());
}

struct FlakyDetector(AtomicUsize);

impl Detector for FlakyDetector {
    fn detect(&self, _: &str, _: &str) -> Result<Verdict, DetectError> {
        if self.0.fetch_add(1, Ordering::Relaxed) % 2 == 0 {
            Err(DetectError::Unavailable("down".into()))
        } else {
            Ok(Verdict::distinct_rule(VerdictSource::External))
        }
    }

    fn name(&self) -> &str {
        "flaky"
    }
}

#[test]
fn detector_failure_falls_back_or_aborts() {
    let d = default_domain(6);
    let p = d.problem(0);
    let flaky = FlakyDetector(AtomicUsize::new(0));
    let out = mcts_search(&p, &d, &d, Some(&flaky), &mcts_cfg()).unwrap();
    assert!(out.stats.detector_failures > 0);
    assert_eq!(out.ledger.pruned_candidates, 0);

    let strict = SearchConfig { detector_fallback: false, ..mcts_cfg() };
    let err = mcts_search(&p, &d, &d, Some(&FlakyDetector(AtomicUsize::new(0))), &strict).unwrap_err();
    assert!(matches!(err, SearchError::Detector { .. }), "{err}");
}

struct Broken;

impl Generator for Broken {
    fn expand(&self, _: &ProblemInstance, _: &[CandidateStep], _: usize, _: f64, _: usize) -> Result<Vec<CandidateStep>, AdapterError> {
        Err(AdapterError::Transport { attempts: 4, message: "connection refused".into() })
    }
}

#[test]
fn generator_failure_aborts_with_diagnostic() {
    let d = default_domain(0);
    let p = d.problem(0);
    let err = mcts_search(&p, &Broken, &d, None, &mcts_cfg()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, SearchError::Generator { node: 0, .. }));
    assert!(msg.contains("syn-0000") && msg.contains("4 attempt"), "{msg}");
}

#[test]
fn algorithm_mismatch_and_invalid_config_rejected() {
    let d = default_domain(0);
    let p = d.problem(0);
    assert!(matches!(mcts_search(&p, &d, &d, None, &sbs_cfg()), Err(SearchError::AlgorithmMismatch { .. })));
    let bad = SearchConfig { simulations: 0, ..mcts_cfg() };
    assert!(matches!(mcts_search(&p, &d, &d, None, &bad), Err(SearchError::Config(_))));
}

/// Emits a fixed pool: classes A, B, C with two renderings each, scored so
/// that vanilla top-3 is dominated by class A.
struct PlantedPool;

const POOL: [(&str, f64); 6] = [
    ("A: add 3 to 4. The answer is 7.", 0.9),
    ("A: 4 + 3 = 7. The answer is 7.", 0.85),
    ("B: multiply 3 by 4. The answer is 12.", 0.6),
    ("B: 3 * 4 = 12. The answer is 12.", 0.55),
    ("C: subtract 3 from 4. The answer is 1.", 0.8),
    ("C: 4 - 3 = 1. The answer is 1.", 0.3),
];

impl Generator for PlantedPool {
    fn expand(&self, _: &ProblemInstance, _: &[CandidateStep], n: usize, _: f64, _: usize) -> Result<Vec<CandidateStep>, AdapterError> {
        Ok(POOL.iter().take(n).map(|(t, s)| CandidateStep::new(*t, 10).scored(*s).terminal(true)).collect())
    }
}

impl RewardModel for PlantedPool {
    fn score(&self, _: &ProblemInstance, path: &[CandidateStep]) -> Result<f64, AdapterError> {
        Ok(POOL.iter().find(|(t, _)| *t == path.last().unwrap().text).unwrap().1)
    }
}

fn class_detector() -> impl Detector {
    stepprune::equiv::OracleDetector::new(|s: &str| s.chars().next())
}

#[test]
fn sbs_prunes_before_top_k() {
    let p = ProblemInstance::new("pool", "planted");
    let cfg = SearchConfig { tree_max_width: 6, beam_size: 3, ..SearchConfig::sbs() };
    let det = class_detector();
    let pruned = sbs_search(&p, &PlantedPool, &PlantedPool, Some(&det), &cfg).unwrap();
    let classes: Vec<char> = pruned.beam.iter().map(|&n| pruned.tree.nodes[n].step.as_ref().unwrap().text.chars().next().unwrap()).collect();
    let mut sorted = classes.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec!['A', 'B', 'C']);

    let vanilla = sbs_search(&p, &PlantedPool, &PlantedPool, None, &cfg).unwrap();
    let vclasses: Vec<char> = vanilla.beam.iter().map(|&n| vanilla.tree.nodes[n].step.as_ref().unwrap().text.chars().next().unwrap()).collect();
    assert_eq!(vclasses, vec!['A', 'A', 'C']);
    assert_eq!(pruned.answer.as_deref(), Some("7"));

    // a beam wide enough for the whole pool keeps every retained candidate
    let wide = SearchConfig { beam_size: 6, ..cfg };
    let all = sbs_search(&p, &PlantedPool, &PlantedPool, Some(&det), &wide).unwrap();
    assert_eq!(all.beam.len(), 3);
    let full = sbs_search(&p, &PlantedPool, &PlantedPool, None, &wide).unwrap();
    assert_eq!(full.beam.len(), 6);
}

#[test]
fn sbs_survivors_never_equivalent_when_pruned() {
    let oracle = SyntheticDomain::oracle_detector();
    let mut vanilla_dupes = 0;
    for seed in 0..20 {
        let d = default_domain(seed);
        let p = d.problem(0);
        for (det, out) in [
            (true, sbs_search(&p, &d, &d, Some(&oracle), &sbs_cfg()).unwrap()),
            (false, sbs_search(&p, &d, &d, None, &sbs_cfg()).unwrap()),
        ] {
            // survivors of each round, grouped by depth
            let mut by_depth: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for e in &out.trace.events {
                if e.payload.kind() == EventKind::Select {
                    by_depth.entry(out.tree.nodes[e.node_id].depth).or_default().push(e.node_id);
                }
            }
            for survivors in by_depth.values() {
                for (i, &a) in survivors.iter().enumerate() {
                    for &b in &survivors[i + 1..] {
                        let (na, nb) = (&out.tree.nodes[a], &out.tree.nodes[b]);
                        if na.parent != nb.parent {
                            continue;
                        }
                        let eq = oracle
                            .detect(&na.step.as_ref().unwrap().text, &nb.step.as_ref().unwrap().text)
                            .unwrap()
                            .equivalent();
                        if det {
                            assert!(!eq, "pruned SBS kept equivalent siblings");
                        } else if eq {
                            vanilla_dupes += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(vanilla_dupes > 0, "vanilla SBS should sometimes keep equivalent siblings");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pruning_never_costs_tokens(seed in 0u64..10_000, problem in 0usize..50) {
        let d = default_domain(seed);
        let oracle = SyntheticDomain::oracle_detector();
        let p = d.problem(problem);
        let v = mcts_search(&p, &d, &d, None, &mcts_cfg()).unwrap();
        let q = mcts_search(&p, &d, &d, Some(&oracle), &mcts_cfg()).unwrap();
        prop_assert!(q.ledger.generated_total <= v.ledger.generated_total);
    }

    #[test]
    fn limits_respected(seed in 0u64..1000, width in 1usize..6, depth in 1usize..5, sims in 1usize..30) {
        let d = domain(SyntheticDomainConfig { depth: 8, seed, ..Default::default() });
        let oracle = SyntheticDomain::oracle_detector();
        let cfg = SearchConfig { tree_max_width: width, tree_max_depth: depth, simulations: sims, beam_size: width.min(3), ..SearchConfig::mcts() };
        let p = d.problem(0);
        let out = mcts_search(&p, &d, &d, Some(&oracle), &cfg).unwrap();
        prop_assert!(audit_limits(&out.trace.events, &cfg).is_ok());
        prop_assert!(out.tree.visits_conserved());
        prop_assert_eq!(out.tree.root().n, sims as u64);
        let sbs = SearchConfig { algorithm: stepprune::domain::Algorithm::Sbs, ..cfg.clone() };
        let out = sbs_search(&p, &d, &d, Some(&oracle), &sbs).unwrap();
        prop_assert!(audit_limits(&out.trace.events, &sbs).is_ok());
        prop_assert!(out.beam.len() <= sbs.beam_size);
    }
}
