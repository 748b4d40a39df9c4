use crate::domain::{Algorithm, ProblemInstance, SearchConfig};
use crate::equiv::Detector;

use super::trace::EventPayload;
use super::tree::NodeId;
use super::{Engine, Generator, RewardModel, SearchError, SearchOutcome};

/// Step-level beam search.
///
/// Every non-terminal beam item is expanded into one sibling batch, which is
/// pruned before any ranking. Retained children are scored by the reward
/// model and pooled with the beam's finished paths; the best `beam_size`
/// survive. The answer is the best-scoring terminal path in the final beam.
pub fn sbs_search(
    problem: &ProblemInstance,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
    detector: Option<&dyn Detector>,
    config: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    let mut engine = Engine::new(problem, generator, reward, detector, config, Algorithm::Sbs)?;
    if engine.tree.root().terminal {
        return Ok(engine.finish(0, Vec::new()));
    }

    let mut beam: Vec<NodeId> = vec![0];
    loop {
        if beam.iter().all(|&b| !engine.can_expand(b)) {
            break;
        }
        let mut pool: Vec<(NodeId, f64)> = Vec::new();
        for &item in &beam {
            if !engine.can_expand(item) {
                let score = engine.evaluate(item)?;
                pool.push((item, score));
                continue;
            }
            let children = engine.expand(item)?;
            for child in children {
                if engine.tree.nodes[child].pruned {
                    continue;
                }
                let score = engine.evaluate(child)?;
                pool.push((child, score));
            }
        }
        if pool.is_empty() {
            break;
        }
        pool.sort_by(|a, b| b.1.total_cmp(&a.1));
        pool.truncate(config.beam_size);
        for &(node, score) in &pool {
            let parent = engine.tree.nodes[node].parent.unwrap_or(0);
            engine.trace.push(node, EventPayload::Select { parent, simulation: None, value: score });
        }
        beam = pool.into_iter().map(|(n, _)| n).collect();
    }

    let best = beam
        .iter()
        .copied()
        .filter(|&b| engine.tree.nodes[b].terminal)
        .chain(beam.iter().copied())
        .next()
        .unwrap_or(0);
    Ok(engine.finish(best, beam))
}
