//! Labeled undirected graphs, size padding, and the edit cost induced by a
//! node alignment.
//!
//! Node labels are interned to `u32` ids through a [`Vocab`]. Padding nodes
//! carry [`NULL_LABEL`], which never collides with an interned id, so a
//! padded node always mismatches a real one.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interned node label.
pub type Label = u32;

/// Reserved label carried by padding nodes.
pub const NULL_LABEL: Label = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph `{id}` has no nodes")]
    Empty { id: String },
    #[error("graph `{id}`: edge ({u}, {v}) references a node outside 0..{n}")]
    EdgeOutOfRange { id: String, u: usize, v: usize, n: usize },
    #[error("graph `{id}`: self-loop on node {u}")]
    SelfLoop { id: String, u: usize },
    #[error("graph `{id}`: duplicate edge ({u}, {v})")]
    DuplicateEdge { id: String, u: usize, v: usize },
    #[error("graph `{id}` uses the reserved null label")]
    ReservedLabel { id: String },
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// String label interner shared by a graph collection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, Label>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary whose ids follow the order of `names`.
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for name in names {
            vocab.intern(&name.into());
        }
        vocab
    }

    pub fn intern(&mut self, name: &str) -> Label {
        if self.index.len() != self.names.len() {
            self.rebuild_index();
        }
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as Label;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<Label> {
        if self.index.len() == self.names.len() {
            self.index.get(name).copied()
        } else {
            self.names.iter().position(|n| n == name).map(|i| i as Label)
        }
    }

    pub fn name(&self, id: Label) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as Label))
            .collect();
    }
}

/// Wire format of a graph: `{"id", "labels", "edges"}` with 0-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphJson {
    pub id: String,
    pub labels: Vec<String>,
    pub edges: Vec<[usize; 2]>,
}

/// Labeled undirected simple graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    id: String,
    labels: Vec<Label>,
    /// Sorted, each pair stored once with `u < v`.
    edges: Vec<(usize, usize)>,
    adj: Vec<bool>,
}

impl Graph {
    pub fn new(
        id: impl Into<String>,
        labels: Vec<Label>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let id = id.into();
        let n = labels.len();
        if n == 0 {
            return Err(GraphError::Empty { id });
        }
        if labels.contains(&NULL_LABEL) {
            return Err(GraphError::ReservedLabel { id });
        }
        let mut adj = vec![false; n * n];
        let mut list = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange { id, u: a, v: b, n });
            }
            if a == b {
                return Err(GraphError::SelfLoop { id, u: a });
            }
            let (u, v) = if a < b { (a, b) } else { (b, a) };
            if adj[u * n + v] {
                return Err(GraphError::DuplicateEdge { id, u, v });
            }
            adj[u * n + v] = true;
            adj[v * n + u] = true;
            list.push((u, v));
        }
        list.sort_unstable();
        Ok(Self { id, labels, edges: list, adj })
    }

    pub fn from_json(json: &GraphJson, vocab: &mut Vocab) -> Result<Self, GraphError> {
        let labels = json.labels.iter().map(|l| vocab.intern(l)).collect();
        Self::new(json.id.clone(), labels, json.edges.iter().map(|e| (e[0], e[1])))
    }

    /// Serializes with label names from `vocab`; unknown ids fall back to their
    /// decimal form.
    pub fn to_json(&self, vocab: &Vocab) -> GraphJson {
        GraphJson {
            id: self.id.clone(),
            labels: self
                .labels
                .iter()
                .map(|&l| vocab.name(l).map(str::to_string).unwrap_or_else(|| l.to_string()))
                .collect(),
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, k: usize) -> Label {
        self.labels[k]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let n = self.labels.len();
        u < n && v < n && self.adj[u * n + v]
    }

    pub fn degree(&self, u: usize) -> usize {
        let n = self.labels.len();
        self.adj[u * n..(u + 1) * n].iter().filter(|&&b| b).count()
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.labels.len();
        self.adj[u * n..(u + 1) * n]
            .iter()
            .enumerate()
            .filter_map(|(v, &b)| b.then_some(v))
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Returns the graph with node `k` moved to position `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count();
        assert_eq!(perm.len(), n, "permutation length must equal node count");
        let mut labels = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            labels[p] = self.labels[k];
        }
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::new(self.id.clone(), labels, edges).expect("permutation preserves validity")
    }
}

/// Two graphs viewed at a common size `max(N1, N2)`; the smaller one gains
/// isolated [`NULL_LABEL`] nodes at the end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedPair {
    pub g1: Graph,
    pub g2: Graph,
    size: usize,
}

impl PaddedPair {
    pub fn new(g1: Graph, g2: Graph) -> Self {
        let size = g1.node_count().max(g2.node_count());
        Self { g1, g2, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label1(&self, k: usize) -> Label {
        padded_label(&self.g1, k)
    }

    pub fn label2(&self, k: usize) -> Label {
        padded_label(&self.g2, k)
    }

    pub fn edge1(&self, u: usize, v: usize) -> bool {
        self.g1.has_edge(u, v)
    }

    pub fn edge2(&self, u: usize, v: usize) -> bool {
        self.g2.has_edge(u, v)
    }

    pub fn degree1(&self, u: usize) -> usize {
        if u < self.g1.node_count() {
            self.g1.degree(u)
        } else {
            0
        }
    }

    pub fn degree2(&self, u: usize) -> usize {
        if u < self.g2.node_count() {
            self.g2.degree(u)
        } else {
            0
        }
    }
}

fn padded_label(g: &Graph, k: usize) -> Label {
    if k < g.node_count() {
        g.label(k)
    } else {
        NULL_LABEL
    }
}

pub fn pad_pair(g1: &Graph, g2: &Graph) -> PaddedPair {
    PaddedPair::new(g1.clone(), g2.clone())
}

/// Bijection on the padded index set: g1 node `k` maps to g2 node `mapping[k]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Alignment {
    pub mapping: Vec<usize>,
}

impl Alignment {
    pub fn new(mapping: Vec<usize>) -> Self {
        Self { mapping }
    }

    pub fn identity(n: usize) -> Self {
        Self { mapping: (0..n).collect() }
    }

    pub fn validate(&self, size: usize) -> Result<(), GraphError> {
        if self.mapping.len() != size {
            return Err(GraphError::InvalidAlignment(format!(
                "mapping has length {}, expected {size}",
                self.mapping.len()
            )));
        }
        let mut seen = vec![false; size];
        for (k, &m) in self.mapping.iter().enumerate() {
            if m >= size {
                return Err(GraphError::InvalidAlignment(format!(
                    "node {k} maps to {m}, outside 0..{size}"
                )));
            }
            if std::mem::replace(&mut seen[m], true) {
                return Err(GraphError::InvalidAlignment(format!(
                    "target {m} is used more than once"
                )));
            }
        }
        Ok(())
    }

    pub fn inverse(&self) -> Alignment {
        let mut inv = vec![0; self.mapping.len()];
        for (k, &m) in self.mapping.iter().enumerate() {
            inv[m] = k;
        }
        Alignment { mapping: inv }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCost {
    pub node_cost: u32,
    pub edge_cost: u32,
}

impl EditCost {
    pub fn total(&self) -> u32 {
        self.node_cost + self.edge_cost
    }
}

/// Unit-cost edit cost of transforming `g1` into `g2` under `alignment`.
///
/// Edge cost counts unordered padded index pairs that are an edge in exactly
/// one graph after mapping.
pub fn ged_under_mapping(pair: &PaddedPair, alignment: &Alignment) -> Result<EditCost, GraphError> {
    alignment.validate(pair.size())?;
    Ok(cost_unchecked(pair, &alignment.mapping))
}

pub(crate) fn cost_unchecked(pair: &PaddedPair, mapping: &[usize]) -> EditCost {
    let n = pair.size();
    let node_cost = (0..n)
        .filter(|&k| pair.label1(k) != pair.label2(mapping[k]))
        .count() as u32;
    let mut edge_cost = 0;
    for k in 0..n {
        for l in (k + 1)..n {
            if pair.edge1(k, l) != pair.edge2(mapping[k], mapping[l]) {
                edge_cost += 1;
            }
        }
    }
    EditCost { node_cost, edge_cost }
}

/// Normalized similarity `exp(-ged / ((n1 + n2) / 2))` of unpadded sizes.
pub fn sim_from_ged(ged: i64, n1: usize, n2: usize) -> Result<f64, GraphError> {
    if ged < 0 {
        return Err(GraphError::Domain(format!("negative GED {ged}")));
    }
    if n1 == 0 || n2 == 0 {
        return Err(GraphError::Domain("node counts must be positive".into()));
    }
    Ok((-(ged as f64) / ((n1 + n2) as f64 / 2.0)).exp())
}

/// Aligned and unaligned nodes/edges of one graph, in unpadded indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Substructure {
    pub aligned_nodes: Vec<usize>,
    pub aligned_edges: Vec<(usize, usize)>,
    pub unaligned_nodes: Vec<usize>,
    pub unaligned_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstructurePartition {
    pub g1: Substructure,
    pub g2: Substructure,
    pub n1: usize,
    pub n2: usize,
}

impl SubstructurePartition {
    /// Edit cost recovered from the partition alone.
    ///
    /// Every relabel puts one node in each unaligned set and every
    /// insertion/deletion puts one node in exactly one of them; there are
    /// `|n1 - n2|` of the latter.
    pub fn edit_cost(&self) -> EditCost {
        let us = self.g1.unaligned_nodes.len() + self.g2.unaligned_nodes.len();
        let node_cost = (us + self.n1.abs_diff(self.n2)) / 2;
        let edge_cost = self.g1.unaligned_edges.len() + self.g2.unaligned_edges.len();
        EditCost { node_cost: node_cost as u32, edge_cost: edge_cost as u32 }
    }
}

pub fn extract_partition(
    pair: &PaddedPair,
    alignment: &Alignment,
) -> Result<SubstructurePartition, GraphError> {
    alignment.validate(pair.size())?;
    let inverse = alignment.inverse();
    let side = |g: &Graph, own: &dyn Fn(usize) -> Label, other: &dyn Fn(usize) -> Label, other_edge: &dyn Fn(usize, usize) -> bool, map: &[usize]| {
        let mut s = Substructure::default();
        for k in 0..g.node_count() {
            if own(k) == other(map[k]) {
                s.aligned_nodes.push(k);
            } else {
                s.unaligned_nodes.push(k);
            }
        }
        for &(u, v) in g.edges() {
            if other_edge(map[u], map[v]) {
                s.aligned_edges.push((u, v));
            } else {
                s.unaligned_edges.push((u, v));
            }
        }
        s
    };
    let g1 = side(
        &pair.g1,
        &|k| pair.label1(k),
        &|k| pair.label2(k),
        &|u, v| pair.edge2(u, v),
        &alignment.mapping,
    );
    let g2 = side(
        &pair.g2,
        &|k| pair.label2(k),
        &|k| pair.label1(k),
        &|u, v| pair.edge1(u, v),
        &inverse.mapping,
    );
    Ok(SubstructurePartition {
        g1,
        g2,
        n1: pair.g1.node_count(),
        n2: pair.g2.node_count(),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The worked example pair: a labeled 4-cycle against a 4-cycle with a
    /// pendant node. Indices are 0-based (node `v(k)` is index `k-1`).
    pub fn worked_pair() -> (Graph, Graph, Alignment) {
        // g1 labels: v1=A v2=B v3=A v4=C ; g2: v1=A v2=D v3=D v4=A v5=B
        let g1 = Graph::new("gi", vec![0, 1, 0, 2], [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let g2 = Graph::new(
            "gj",
            vec![0, 3, 3, 0, 1],
            [(0, 4), (3, 4), (2, 3), (1, 2), (1, 4)],
        )
        .unwrap();
        // v1->v1, v2->v5, v3->v4, v4->v3, pad->v2
        let a = Alignment::new(vec![0, 4, 3, 2, 1]);
        (g1, g2, a)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::worked_pair;
    use super::*;

    fn path3() -> Graph {
        Graph::new("p", vec![0, 0, 0], [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn rejects_invalid_graphs() {
        assert!(matches!(Graph::new("e", vec![], []), Err(GraphError::Empty { .. })));
        assert!(matches!(
            Graph::new("s", vec![0, 0], [(1, 1)]),
            Err(GraphError::SelfLoop { .. })
        ));
        assert!(matches!(
            Graph::new("d", vec![0, 0], [(0, 1), (1, 0)]),
            Err(GraphError::DuplicateEdge { .. })
        ));
        assert!(matches!(
            Graph::new("r", vec![0, 0], [(0, 2)]),
            Err(GraphError::EdgeOutOfRange { .. })
        ));
    }

    #[test]
    fn pad_equal_sizes_adds_nothing() {
        let p = pad_pair(&path3(), &path3());
        assert_eq!(p.size(), 3);
        assert!((0..3).all(|k| p.label1(k) != NULL_LABEL && p.label2(k) != NULL_LABEL));
    }

    #[test]
    fn pad_four_vs_five() {
        let (g1, g2, _) = worked_pair();
        let p = pad_pair(&g1, &g2);
        assert_eq!(p.size(), 5);
        assert_eq!(p.label1(4), NULL_LABEL);
        assert_eq!(p.degree1(4), 0);
        assert_eq!(p.g1, g1);
    }

    #[test]
    fn pad_single_nodes() {
        let a = Graph::new("a", vec![0], []).unwrap();
        assert_eq!(pad_pair(&a, &a).size(), 1);
    }

    #[test]
    fn identity_on_identical_graph_costs_nothing() {
        let g = path3();
        let p = pad_pair(&g, &g);
        let c = ged_under_mapping(&p, &Alignment::identity(3)).unwrap();
        assert_eq!((c.node_cost, c.edge_cost, c.total()), (0, 0, 0));
    }

    #[test]
    fn single_relabel() {
        let a = Graph::new("a", vec![0], []).unwrap();
        let b = Graph::new("b", vec![1], []).unwrap();
        let c = ged_under_mapping(&pad_pair(&a, &b), &Alignment::identity(1)).unwrap();
        assert_eq!((c.node_cost, c.edge_cost), (1, 0));
    }

    #[test]
    fn rejects_non_bijective_mapping() {
        let g = path3();
        let p = pad_pair(&g, &g);
        let err = ged_under_mapping(&p, &Alignment::new(vec![0, 0, 1])).unwrap_err();
        assert!(matches!(err, GraphError::InvalidAlignment(_)));
        assert!(ged_under_mapping(&p, &Alignment::new(vec![0, 1])).is_err());
    }

    #[test]
    fn worked_pair_cost_under_listed_alignment() {
        let (g1, g2, a) = worked_pair();
        let c = ged_under_mapping(&pad_pair(&g1, &g2), &a).unwrap();
        // relabel v4 + insert v2 ; delete e(1,4) + insert e(2,3), e(2,5)
        assert_eq!((c.node_cost, c.edge_cost), (2, 3));
    }

    #[test]
    fn sim_values() {
        assert_eq!(sim_from_ged(0, 4, 4).unwrap(), 1.0);
        assert!((sim_from_ged(4, 4, 5).unwrap() - 0.411_112_290_507_187).abs() < 1e-12);
        assert!((sim_from_ged(9, 9, 9).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-12);
        assert!(matches!(sim_from_ged(-1, 3, 3), Err(GraphError::Domain(_))));
    }

    #[test]
    fn partition_of_identical_graphs() {
        let g = path3();
        let part = extract_partition(&pad_pair(&g, &g), &Alignment::identity(3)).unwrap();
        assert_eq!(part.g1.aligned_nodes, vec![0, 1, 2]);
        assert_eq!(part.g1.aligned_edges, vec![(0, 1), (1, 2)]);
        assert!(part.g1.unaligned_nodes.is_empty() && part.g1.unaligned_edges.is_empty());
        assert!(part.g2.unaligned_nodes.is_empty() && part.g2.unaligned_edges.is_empty());
    }

    #[test]
    fn partition_of_worked_pair() {
        let (g1, g2, a) = worked_pair();
        let part = extract_partition(&pad_pair(&g1, &g2), &a).unwrap();
        assert_eq!(part.g1.aligned_nodes, vec![0, 1, 2]);
        assert_eq!(part.g1.aligned_edges, vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(part.g1.unaligned_nodes, vec![3]);
        assert_eq!(part.g1.unaligned_edges, vec![(0, 3)]);
        assert_eq!(part.g2.aligned_nodes, vec![0, 3, 4]);
        assert_eq!(part.g2.aligned_edges, vec![(0, 4), (2, 3), (3, 4)]);
        assert_eq!(part.g2.unaligned_nodes, vec![1, 2]);
        assert_eq!(part.g2.unaligned_edges, vec![(1, 2), (1, 4)]);
        assert_eq!(part.edit_cost(), EditCost { node_cost: 2, edge_cost: 3 });
    }

    #[test]
    fn partition_of_different_single_nodes() {
        let a = Graph::new("a", vec![0], []).unwrap();
        let b = Graph::new("b", vec![1], []).unwrap();
        let part = extract_partition(&pad_pair(&a, &b), &Alignment::identity(1)).unwrap();
        assert_eq!(part.g1.unaligned_nodes, vec![0]);
        assert_eq!(part.g2.unaligned_nodes, vec![0]);
    }

    #[test]
    fn json_round_trip_interns_labels() {
        let json = GraphJson {
            id: "x".into(),
            labels: vec!["C".into(), "O".into(), "C".into()],
            edges: vec![[2, 0], [1, 2]],
        };
        let mut vocab = Vocab::new();
        let g = Graph::from_json(&json, &mut vocab).unwrap();
        assert_eq!(g.labels(), &[0, 1, 0]);
        assert_eq!(g.edges(), &[(0, 2), (1, 2)]);
        assert_eq!(vocab.len(), 2);
        let back = g.to_json(&vocab);
        assert_eq!(back.edges, vec![[0, 2], [1, 2]]);
        assert_eq!(back.labels, json.labels);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn graph_and_perm() -> impl Strategy<Value = (Graph, Graph, Vec<usize>)> {
            (1usize..7).prop_flat_map(|n| {
                let pairs = n * (n - 1) / 2;
                (
                    proptest::collection::vec(0u32..3, n),
                    proptest::collection::vec(any::<bool>(), pairs),
                    proptest::collection::vec(0u32..3, n),
                    proptest::collection::vec(any::<bool>(), pairs),
                    Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                )
                    .prop_map(move |(l1, e1, l2, e2, perm)| {
                        let mk = |id: &str, l: Vec<u32>, e: Vec<bool>| {
                            let mut edges = vec![];
                            let mut i = 0;
                            for u in 0..n {
                                for v in (u + 1)..n {
                                    if e[i] {
                                        edges.push((u, v));
                                    }
                                    i += 1;
                                }
                            }
                            Graph::new(id, l, edges).unwrap()
                        };
                        (mk("a", l1, e1), mk("b", l2, e2), perm)
                    })
            })
        }

        proptest! {
            #[test]
            fn partition_reconstructs_mapping_cost((g1, g2, perm) in graph_and_perm()) {
                let pair = pad_pair(&g1, &g2);
                let a = Alignment::new(perm);
                let cost = ged_under_mapping(&pair, &a).unwrap();
                let part = extract_partition(&pair, &a).unwrap();
                prop_assert_eq!(part.edit_cost(), cost);
                let n1 = part.g1.aligned_nodes.len() + part.g1.unaligned_nodes.len();
                prop_assert_eq!(n1, g1.node_count());
                let e2 = part.g2.aligned_edges.len() + part.g2.unaligned_edges.len();
                prop_assert_eq!(e2, g2.edge_count());
            }

            #[test]
            fn sim_strictly_decreasing(ged in 0i64..200, n1 in 1usize..40, n2 in 1usize..40) {
                let a = sim_from_ged(ged, n1, n2).unwrap();
                let b = sim_from_ged(ged + 1, n1, n2).unwrap();
                prop_assert!(b < a);
                prop_assert!(a <= 1.0);
                prop_assert_eq!(a == 1.0, ged == 0);
            }
        }
    }
}
