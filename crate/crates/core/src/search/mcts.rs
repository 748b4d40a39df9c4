use crate::domain::{Algorithm, ProblemInstance, SearchConfig};
use crate::equiv::Detector;

use super::trace::EventPayload;
use super::tree::{NodeId, SearchTree};
use super::{Engine, Generator, RewardModel, SearchError, SearchOutcome};

fn puct(tree: &SearchTree, parent: NodeId, child: NodeId, c_puct: f64) -> f64 {
    let p = &tree.nodes[parent];
    let c = &tree.nodes[child];
    c.q() + c_puct * c.prior * (p.n as f64).sqrt() / (1.0 + c.n as f64)
}

/// Argmax of PUCT over retained children; the earliest child wins ties.
fn select_child(tree: &SearchTree, node: NodeId, c_puct: f64) -> Option<(NodeId, f64)> {
    let mut best: Option<(NodeId, f64)> = None;
    for c in tree.retained_children(node) {
        let v = puct(tree, node, c, c_puct);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best
}

/// Follows the most-visited retained child (higher Q on ties) from the root.
fn principal_leaf(tree: &SearchTree) -> NodeId {
    let mut node = 0;
    loop {
        let mut best: Option<NodeId> = None;
        for c in tree.retained_children(node).filter(|&c| tree.nodes[c].n > 0) {
            best = match best {
                None => Some(c),
                Some(b) => {
                    let (nc, nb) = (&tree.nodes[c], &tree.nodes[b]);
                    if nc.n > nb.n || (nc.n == nb.n && nc.q() > nb.q()) { Some(c) } else { Some(b) }
                }
            };
        }
        match best {
            Some(c) => node = c,
            None => return node,
        }
    }
}

/// PUCT-guided MCTS with reward-model leaf evaluation.
///
/// Each simulation descends through retained children by PUCT, expands the
/// reached leaf if it is non-terminal and above the depth limit, evaluates
/// that leaf with the reward model, and backs the value up to the root. The
/// answer comes from the principal path of visit counts.
pub fn mcts_search(
    problem: &ProblemInstance,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
    detector: Option<&dyn Detector>,
    config: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    let mut engine = Engine::new(problem, generator, reward, detector, config, Algorithm::Mcts)?;
    if engine.tree.root().terminal {
        return Ok(engine.finish(0, Vec::new()));
    }

    for sim in 0..config.simulations {
        let mut node = 0;
        let mut visited = vec![0];
        while engine.tree.nodes[node].expanded {
            let Some((child, value)) = select_child(&engine.tree, node, config.c_puct) else { break };
            engine.trace.push(child, EventPayload::Select { parent: node, simulation: Some(sim), value });
            node = child;
            visited.push(child);
        }
        if engine.can_expand(node) {
            engine.expand(node)?;
        }
        let value = engine.evaluate(node)?;
        engine.tree.nodes[node].direct_evals += 1;
        for &id in &visited {
            let n = &mut engine.tree.nodes[id];
            n.n += 1;
            n.w += value;
        }
        engine.trace.push(node, EventPayload::Backup { simulation: sim, value, path_len: visited.len() - 1 });
        engine.stats.simulations += 1;
    }

    let leaf = principal_leaf(&engine.tree);
    Ok(engine.finish(leaf, Vec::new()))
}
