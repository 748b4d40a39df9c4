use serde::Serialize;

use crate::domain::CandidateStep;

pub type NodeId = usize;

#[derive(Debug, Clone, Serialize)]
pub struct SearchTreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// The step that led here; `None` only for the root.
    pub step: Option<CandidateStep>,
    pub depth: usize,
    pub children: Vec<NodeId>,
    /// Visit count.
    pub n: u64,
    /// Total backed-up value.
    pub w: f64,
    pub prior: f64,
    /// Cached reward of the path ending here.
    pub reward: Option<f64>,
    pub pruned: bool,
    pub representative: Option<NodeId>,
    pub expanded: bool,
    pub terminal: bool,
    /// Simulations whose evaluation happened at this node.
    pub direct_evals: u64,
}

impl SearchTreeNode {
    pub fn q(&self) -> f64 {
        if self.n == 0 { 0.0 } else { self.w / self.n as f64 }
    }
}

/// Arena-allocated search tree; node 0 is the root.
#[derive(Debug, Clone, Serialize)]
pub struct SearchTree {
    pub nodes: Vec<SearchTreeNode>,
}

impl SearchTree {
    pub fn new(root_terminal: bool) -> Self {
        SearchTree {
            nodes: vec![SearchTreeNode {
                id: 0,
                parent: None,
                step: None,
                depth: 0,
                children: Vec::new(),
                n: 0,
                w: 0.0,
                prior: 1.0,
                reward: None,
                pruned: false,
                representative: None,
                expanded: false,
                terminal: root_terminal,
                direct_evals: 0,
            }],
        }
    }

    pub fn root(&self) -> &SearchTreeNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_child(&mut self, parent: NodeId, step: CandidateStep, terminal: bool) -> NodeId {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(SearchTreeNode {
            id,
            parent: Some(parent),
            step: Some(step),
            depth,
            children: Vec::new(),
            n: 0,
            w: 0.0,
            prior: 0.0,
            reward: None,
            pruned: false,
            representative: None,
            expanded: false,
            terminal,
            direct_evals: 0,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Node ids from the root down to `node`, inclusive.
    pub fn lineage(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// The reasoning path (steps) ending at `node`.
    pub fn path(&self, node: NodeId) -> Vec<CandidateStep> {
        self.lineage(node).into_iter().filter_map(|id| self.nodes[id].step.clone()).collect()
    }

    pub fn retained_children(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes[node].children.iter().copied().filter(|&c| !self.nodes[c].pruned)
    }

    /// Checks `N = sum(children N) + direct_evals` at every node.
    pub fn visits_conserved(&self) -> bool {
        self.nodes.iter().all(|node| {
            let below: u64 = node.children.iter().map(|&c| self.nodes[c].n).sum();
            node.n == below + node.direct_evals
        })
    }
}
