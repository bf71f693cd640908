//! Exact and approximate graph edit distance.
//!
//! * [`exact_ged_bruteforce`]: enumerates every alignment; the oracle.
//! * [`exact_ged_astar`]: best-first search with an admissible bound.
//! * [`beam_ged`]: the same search truncated to a fixed width per level.
//! * [`hungarian_ged`]: bipartite assignment over node substitution costs.
//! * [`ground_truth_ged`]: the labeling policy used for datasets.
//!
//! Every result carries a witnessing alignment whose induced cost equals the
//! reported value.

mod lsap;
mod search;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lsap::solve_lsap;

use crate::graph::{cost_unchecked, Alignment, EditCost, GraphError, PaddedPair};
use search::Problem;

/// Largest padded size the brute-force oracle accepts by default.
pub const DEFAULT_BRUTE_CAP: usize = 8;
/// Default A* expansion budget.
pub const DEFAULT_MAX_EXPANSIONS: u64 = 2_000_000;
/// Default beam width for the min-of-heuristics policy.
pub const DEFAULT_BEAM_WIDTH: usize = 100;
/// Cost of forbidden cells in the assignment matrix.
pub const LSAP_SENTINEL: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GedError {
    #[error("padded size {size} exceeds the cap of {cap}")]
    TooLarge { size: usize, cap: usize },
    #[error("search budget of {expanded} expansions exhausted")]
    BudgetExceeded { expanded: u64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GedMethod {
    Brute,
    Astar,
    Beam { width: Option<usize> },
    Hungarian,
}

impl fmt::Display for GedMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GedMethod::Brute => write!(f, "brute"),
            GedMethod::Astar => write!(f, "astar"),
            GedMethod::Beam { width: Some(w) } => write!(f, "beam({w})"),
            GedMethod::Beam { width: None } => write!(f, "beam(inf)"),
            GedMethod::Hungarian => write!(f, "hungarian"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GedResult {
    pub value: u32,
    pub alignment: Alignment,
    pub cost: EditCost,
    pub method: GedMethod,
    pub exact: bool,
}

impl GedResult {
    fn from_mapping(pair: &PaddedPair, mapping: Vec<usize>, method: GedMethod) -> Self {
        let cost = cost_unchecked(pair, &mapping);
        let exact = matches!(method, GedMethod::Brute | GedMethod::Astar | GedMethod::Beam { width: None });
        Self { value: cost.total(), alignment: Alignment::new(mapping), cost, method, exact }
    }
}

/// Beam width; `Unbounded` keeps every node that can still beat the
/// Hungarian upper bound and is therefore exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamWidth {
    Finite(usize),
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    Exact,
    MinHeuristics { beam_width: usize },
}

pub fn exact_ged_bruteforce(pair: &PaddedPair) -> Result<GedResult, GedError> {
    exact_ged_bruteforce_capped(pair, DEFAULT_BRUTE_CAP)
}

/// Minimum over all `size!` alignments, visited in lexicographic order so the
/// lexicographically smallest optimal mapping wins ties.
pub fn exact_ged_bruteforce_capped(pair: &PaddedPair, cap: usize) -> Result<GedResult, GedError> {
    let n = pair.size();
    if n > cap {
        return Err(GedError::TooLarge { size: n, cap });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = cost_unchecked(pair, &perm).total();
    while next_permutation(&mut perm) {
        let c = cost_unchecked(pair, &perm).total();
        if c < best_cost {
            best_cost = c;
            best.clone_from(&perm);
        }
    }
    Ok(GedResult::from_mapping(pair, best, GedMethod::Brute))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

pub fn exact_ged_astar(pair: &PaddedPair) -> Result<GedResult, GedError> {
    exact_ged_astar_with_budget(pair, DEFAULT_MAX_EXPANSIONS)
}

/// A* over partial mappings. Fails with [`GedError::BudgetExceeded`] rather
/// than return a non-optimal value.
pub fn exact_ged_astar_with_budget(pair: &PaddedPair, max_expansions: u64) -> Result<GedResult, GedError> {
    let problem = Problem::new(pair)?;
    let upper = hungarian_ged(pair)?.value;
    let (node, _) = search::astar(&problem, upper, max_expansions)?;
    Ok(GedResult::from_mapping(pair, problem.mapping(&node), GedMethod::Astar))
}

/// Beam search; always an upper bound on the exact distance.
pub fn beam_ged(pair: &PaddedPair, width: BeamWidth) -> Result<GedResult, GedError> {
    let problem = Problem::new(pair)?;
    let (w, upper) = match width {
        BeamWidth::Finite(w) => (Some(w.max(1)), u32::MAX),
        BeamWidth::Unbounded => (None, hungarian_ged(pair)?.value),
    };
    let node = search::beam(&problem, w, upper);
    Ok(GedResult::from_mapping(pair, problem.mapping(&node), GedMethod::Beam { width: w }))
}

/// Bipartite assignment cost matrix of size `(n1 + n2)²`.
///
/// Substitution costs label mismatch plus half the degree difference;
/// deletion and insertion cost one plus half the degree, on the diagonal of
/// their blocks only.
pub fn hungarian_cost_matrix(pair: &PaddedPair) -> Vec<Vec<f64>> {
    let n1 = pair.g1.node_count();
    let n2 = pair.g2.node_count();
    let size = n1 + n2;
    let mut c = vec![vec![0.0; size]; size];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = match (i < n1, j < n2) {
                (true, true) => {
                    let mismatch = f64::from(u8::from(pair.g1.label(i) != pair.g2.label(j)));
                    mismatch + 0.5 * pair.g1.degree(i).abs_diff(pair.g2.degree(j)) as f64
                }
                (true, false) if j - n2 == i => 1.0 + 0.5 * pair.g1.degree(i) as f64,
                (false, true) if i - n1 == j => 1.0 + 0.5 * pair.g2.degree(j) as f64,
                (false, false) => 0.0,
                _ => LSAP_SENTINEL,
            };
        }
    }
    c
}

/// Assignment-based approximation. The reported value is the cost induced
/// by the assignment's alignment, not the assignment objective, so it is an
/// upper bound on the exact distance.
pub fn hungarian_ged(pair: &PaddedPair) -> Result<GedResult, GedError> {
    let n = pair.size();
    let n1 = pair.g1.node_count();
    let n2 = pair.g2.node_count();
    let (assignment, _) = solve_lsap(&hungarian_cost_matrix(pair))?;
    let mut mapping = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    for (i, &j) in assignment.iter().enumerate().take(n1) {
        if j < n2 {
            mapping[i] = j;
            taken[j] = true;
        }
    }
    let free_targets = (0..n).filter(|&j| !taken[j]);
    let free_sources: Vec<usize> = (0..n).filter(|&i| mapping[i] == usize::MAX).collect();
    for (i, j) in free_sources.into_iter().zip(free_targets) {
        mapping[i] = j;
    }
    debug_assert!(mapping.iter().all(|&m| m < n));
    Ok(GedResult::from_mapping(pair, mapping, GedMethod::Hungarian))
}

/// Dataset labeling: exact A*, or the minimum of beam and Hungarian
/// (beam wins ties).
pub fn ground_truth_ged(pair: &PaddedPair, policy: LabelPolicy) -> Result<GedResult, GedError> {
    match policy {
        LabelPolicy::Exact => exact_ged_astar(pair),
        LabelPolicy::MinHeuristics { beam_width } => {
            let beam = beam_ged(pair, BeamWidth::Finite(beam_width))?;
            let hung = hungarian_ged(pair)?;
            Ok(if hung.value < beam.value { hung } else { beam })
        }
    }
}
