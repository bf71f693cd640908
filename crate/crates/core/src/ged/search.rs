//! Tree search over partial node mappings, shared by A* and beam search.
//!
//! g1 nodes are assigned in a fixed order (descending degree, then index);
//! a search node holds the g2 images of the first `depth` nodes in that
//! order. Costs are tracked doubled so the half-integral heuristic stays in
//! integers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::lsap::hungarian;
use super::GedError;
use crate::graph::{Label, PaddedPair};

pub(crate) struct Problem {
    n: usize,
    order: Vec<usize>,
    l1: Vec<Label>,
    l2: Vec<Label>,
    a1: Vec<bool>,
    a2: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct SearchNode {
    pub images: Vec<u8>,
    pub used: u64,
    /// Exact cost among assigned nodes.
    pub g: u32,
    /// Admissible lower bound on the remaining cost.
    pub h: u32,
}

impl SearchNode {
    pub fn f(&self) -> u32 {
        self.g + self.h
    }
}

impl Problem {
    pub const MAX_NODES: usize = 64;

    pub fn new(pair: &PaddedPair) -> Result<Self, GedError> {
        let n = pair.size();
        if n > Self::MAX_NODES {
            return Err(GedError::TooLarge { size: n, cap: Self::MAX_NODES });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&k| (std::cmp::Reverse(pair.degree1(k)), k));
        let mut a1 = vec![false; n * n];
        let mut a2 = vec![false; n * n];
        for u in 0..n {
            for v in 0..n {
                a1[u * n + v] = pair.edge1(u, v);
                a2[u * n + v] = pair.edge2(u, v);
            }
        }
        Ok(Self {
            n,
            order,
            l1: (0..n).map(|k| pair.label1(k)).collect(),
            l2: (0..n).map(|k| pair.label2(k)).collect(),
            a1,
            a2,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn root(&self) -> SearchNode {
        let mut root = SearchNode { images: Vec::new(), used: 0, g: 0, h: 0 };
        root.h = self.heuristic(&root);
        root
    }

    /// Converts a complete node into a mapping indexed by g1 node.
    pub fn mapping(&self, node: &SearchNode) -> Vec<usize> {
        let mut mapping = vec![0; self.n];
        for (d, &img) in node.images.iter().enumerate() {
            mapping[self.order[d]] = img as usize;
        }
        mapping
    }

    /// Children in ascending order of g2 image.
    pub fn expand(&self, node: &SearchNode) -> Vec<SearchNode> {
        let depth = node.images.len();
        let n = self.n;
        let k = self.order[depth];
        let mut children = Vec::with_capacity(n - depth);
        for v in 0..n {
            if node.used & (1 << v) != 0 {
                continue;
            }
            let mut g = node.g + u32::from(self.l1[k] != self.l2[v]);
            for (e, &img) in node.images.iter().enumerate() {
                let k2 = self.order[e];
                if self.a1[k * n + k2] != self.a2[v * n + img as usize] {
                    g += 1;
                }
            }
            let mut images = node.images.clone();
            images.push(v as u8);
            let mut child = SearchNode { images, used: node.used | (1 << v), g, h: 0 };
            child.h = self.heuristic(&child);
            children.push(child);
        }
        children
    }

    /// Lower bound on the cost still to be paid.
    ///
    /// Cross pairs (assigned, unassigned) are bounded per assigned node by the
    /// difference of its edge counts into the unassigned sets. Nodes and the
    /// pairs among unassigned nodes are bounded by an assignment over
    /// `label mismatch + |inner degree difference| / 2`, since each inner pair
    /// is seen from both endpoints.
    fn heuristic(&self, node: &SearchNode) -> u32 {
        let n = self.n;
        let depth = node.images.len();
        if depth == n {
            return 0;
        }
        let rest1 = &self.order[depth..];
        let rest2: Vec<usize> = (0..n).filter(|&v| node.used & (1 << v) == 0).collect();

        let count_into = |adj: &[bool], u: usize, set: &mut dyn Iterator<Item = usize>| {
            set.filter(|&w| adj[u * n + w]).count() as i64
        };

        let mut doubled: i64 = 0;
        for (e, &img) in node.images.iter().enumerate() {
            let k = self.order[e];
            let c1 = count_into(&self.a1, k, &mut rest1.iter().copied());
            let c2 = count_into(&self.a2, img as usize, &mut rest2.iter().copied());
            doubled += 2 * (c1 - c2).abs();
        }

        let d1: Vec<i64> =
            rest1.iter().map(|&u| count_into(&self.a1, u, &mut rest1.iter().copied())).collect();
        let d2: Vec<i64> =
            rest2.iter().map(|&w| count_into(&self.a2, w, &mut rest2.iter().copied())).collect();
        let r = rest1.len();
        let cost = |i: usize, j: usize| -> f64 {
            let mismatch = if self.l1[rest1[i]] != self.l2[rest2[j]] { 2 } else { 0 };
            (mismatch + (d1[i] - d2[j]).abs()) as f64
        };
        let assignment = hungarian(r, cost);
        doubled += assignment.iter().enumerate().map(|(i, &j)| cost(i, j) as i64).sum::<i64>();

        // The true remaining cost is integral.
        ((doubled + 1) / 2) as u32
    }
}

struct HeapEntry {
    node: SearchNode,
    seq: u64,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Max-heap: smaller f first, then deeper, then earlier insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .node
            .f()
            .cmp(&self.node.f())
            .then_with(|| self.node.images.len().cmp(&other.node.images.len()))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Best-first search; returns the first complete node popped. Children whose
/// bound exceeds `upper_bound` are never queued.
pub(crate) fn astar(
    problem: &Problem,
    upper_bound: u32,
    max_expansions: u64,
) -> Result<(SearchNode, u64), GedError> {
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    heap.push(HeapEntry { node: problem.root(), seq });
    let mut expanded = 0u64;
    while let Some(HeapEntry { node, .. }) = heap.pop() {
        if node.images.len() == problem.size() {
            return Ok((node, expanded));
        }
        expanded += 1;
        if expanded > max_expansions {
            return Err(GedError::BudgetExceeded { expanded: max_expansions });
        }
        for child in problem.expand(&node) {
            if child.f() <= upper_bound {
                seq += 1;
                heap.push(HeapEntry { node: child, seq });
            }
        }
    }
    Err(GedError::Internal("search exhausted without a complete mapping".into()))
}

/// Level-synchronous search keeping the `width` best nodes per depth
/// (ordered by f, then image sequence). `None` keeps every node whose bound
/// does not exceed `upper_bound`, which makes the search exact.
pub(crate) fn beam(problem: &Problem, width: Option<usize>, upper_bound: u32) -> SearchNode {
    let mut level = vec![problem.root()];
    for _ in 0..problem.size() {
        let mut next: Vec<SearchNode> = level.iter().flat_map(|s| problem.expand(s)).collect();
        match width {
            Some(w) => {
                next.sort_by(|a, b| a.f().cmp(&b.f()).then_with(|| a.images.cmp(&b.images)));
                next.truncate(w.max(1));
            }
            None => next.retain(|s| s.f() <= upper_bound),
        }
        level = next;
    }
    level
        .into_iter()
        .min_by(|a, b| a.g.cmp(&b.g).then_with(|| a.images.cmp(&b.images)))
        .expect("beam keeps at least one node per level")
}
