//! Synthetic graphs with GED labels, extra-instance swap pairs, and the
//! on-disk dataset layout.
//!
//! A dataset directory holds `graphs.json` (array of graph JSON objects),
//! `manifest.json`, and `pairs.{train,val,test}.jsonl` with one
//! `{"g1", "g2", "ged", "sim", "source"}` object per line. Graphs are split
//! 60/20/20; training pairs are formed among training graphs, while every
//! validation or test graph acts as a query against a database of training
//! graphs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ged::{exact_ged_astar, ground_truth_ged, GedError, LabelPolicy, DEFAULT_BEAM_WIDTH};
use crate::graph::{extract_partition, pad_pair, sim_from_ged, Graph, GraphError, GraphJson, Label, Vocab};
use crate::metrics::QueryScores;
use crate::train::Example;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ged(#[from] GedError),
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("pair refers to unknown graph `{0}`")]
    UnknownGraph(String),
    #[error("duplicate graph id `{0}`")]
    DuplicateId(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Exact,
    MinHeuristics,
}

/// Labeled pair of graphs. `sim` uses the unpadded node counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub g1: Graph,
    pub g2: Graph,
    pub ged: u32,
    pub sim: f64,
    pub source: LabelSource,
}

/// One line of a `pairs.*.jsonl` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub g1: String,
    pub g2: String,
    pub ged: u32,
    pub sim: f64,
    pub source: LabelSource,
}

impl PairSample {
    pub fn record(&self) -> PairRecord {
        PairRecord {
            g1: self.g1.id().to_string(),
            g2: self.g2.id().to_string(),
            ged: self.ged,
            sim: self.sim,
            source: self.source,
        }
    }
}

/// Which engine labels a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeler {
    /// Pairs whose padded size is at most this are labeled exactly.
    pub exact_cap: usize,
    pub beam_width: usize,
}

impl Default for Labeler {
    fn default() -> Self {
        Self { exact_cap: 8, beam_width: DEFAULT_BEAM_WIDTH }
    }
}

impl Labeler {
    /// Exact A* within the cap, otherwise the best of beam and Hungarian.
    /// An A* run that exhausts its expansion budget also falls back.
    pub fn label(&self, g1: &Graph, g2: &Graph) -> Result<PairSample> {
        let pair = pad_pair(g1, g2);
        let (result, source) = if pair.size() <= self.exact_cap {
            match exact_ged_astar(&pair) {
                Ok(r) => (r, LabelSource::Exact),
                Err(GedError::BudgetExceeded { .. }) => (self.heuristic(&pair)?, LabelSource::MinHeuristics),
                Err(e) => return Err(e.into()),
            }
        } else {
            (self.heuristic(&pair)?, LabelSource::MinHeuristics)
        };
        let sim = sim_from_ged(result.value as i64, g1.node_count(), g2.node_count())?;
        Ok(PairSample { g1: g1.clone(), g2: g2.clone(), ged: result.value, sim, source })
    }

    fn heuristic(&self, pair: &crate::graph::PaddedPair) -> std::result::Result<crate::ged::GedResult, GedError> {
        ground_truth_ged(pair, LabelPolicy::MinHeuristics { beam_width: self.beam_width })
    }
}

/// Uniform labels and independent edges with probability `edge_prob`;
/// redrawn until connected when `connected` is set.
pub fn gen_random_graph(
    id: impl Into<String>,
    n: usize,
    label_vocab: usize,
    edge_prob: f64,
    connected: bool,
    rng: &mut impl Rng,
) -> Result<Graph> {
    if n == 0 || label_vocab == 0 || !(0.0..=1.0).contains(&edge_prob) {
        return Err(DataError::Config(format!(
            "need n ≥ 1, a non-empty vocabulary and edge_prob in [0, 1] (n = {n}, vocab = {label_vocab}, p = {edge_prob})"
        )));
    }
    if connected && n > 1 && edge_prob == 0.0 {
        return Err(DataError::Config("a connected graph needs edge_prob > 0".into()));
    }
    let id = id.into();
    loop {
        let labels: Vec<Label> = (0..n).map(|_| rng.gen_range(0..label_vocab as Label)).collect();
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen_bool(edge_prob) {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::new(id.clone(), labels, edges)?;
        if !connected || g.is_connected() {
            return Ok(g);
        }
    }
}

/// Applies `k_ops` random edits (edge insertion/deletion, isolated node
/// insertion/deletion, relabel) so that `k_ops` bounds the true distance.
/// Impossible draws are resampled.
pub fn apply_random_edits(base: &Graph, k_ops: usize, label_vocab: usize, rng: &mut impl Rng) -> Result<Graph> {
    let mut labels = base.labels().to_vec();
    let mut edges: Vec<(usize, usize)> = base.edges().to_vec();
    let mut done = 0;
    while done < k_ops {
        let n = labels.len();
        let ok = match rng.gen_range(0..5) {
            0 => {
                let free: Vec<(usize, usize)> = (0..n)
                    .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
                    .filter(|e| !edges.contains(e))
                    .collect();
                free.choose(rng).map(|&e| edges.push(e)).is_some()
            }
            1 => {
                if edges.is_empty() {
                    false
                } else {
                    edges.swap_remove(rng.gen_range(0..edges.len()));
                    true
                }
            }
            2 => {
                labels.push(rng.gen_range(0..label_vocab as Label));
                true
            }
            3 => {
                let isolated: Vec<usize> =
                    (0..n).filter(|&k| n > 1 && !edges.iter().any(|&(u, v)| u == k || v == k)).collect();
                match isolated.choose(rng) {
                    Some(&k) => {
                        labels.remove(k);
                        for e in edges.iter_mut() {
                            let shift = |x: usize| if x > k { x - 1 } else { x };
                            *e = (shift(e.0), shift(e.1));
                        }
                        true
                    }
                    None => false,
                }
            }
            _ => {
                if label_vocab < 2 {
                    false
                } else {
                    let k = rng.gen_range(0..n);
                    let new = (labels[k] + rng.gen_range(1..label_vocab as Label)) % label_vocab as Label;
                    labels[k] = new;
                    true
                }
            }
        };
        if ok {
            done += 1;
        }
    }
    Ok(Graph::new(format!("{}~e{k_ops}", base.id()), labels, edges)?)
}

/// `(base, edited base)` labeled by `labeler`; the edit count never serves as
/// the label.
pub fn gen_pair_by_edits(
    base: &Graph,
    k_ops: usize,
    label_vocab: usize,
    labeler: &Labeler,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    let edited = apply_random_edits(base, k_ops, label_vocab, rng)?;
    labeler.label(base, &edited)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EisMode {
    Aligned,
    Unaligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisConfig {
    pub core_nodes: (usize, usize),
    pub attachment_nodes: (usize, usize),
    pub label_vocab: usize,
    pub edge_prob: f64,
}

impl Default for EisConfig {
    fn default() -> Self {
        Self { core_nodes: (3, 5), attachment_nodes: (0, 3), label_vocab: 3, edge_prob: 0.4 }
    }
}

/// Two pairs built for a representation swap, plus the node indices that
/// were meant to align (the shared core, which occupies the first nodes of
/// every graph).
#[derive(Debug, Clone, PartialEq)]
pub struct EisPairs {
    pub mode: EisMode,
    pub first: PairSample,
    pub second: PairSample,
    pub intended_aligned: (Vec<usize>, Vec<usize>),
}

/// Glues `part` onto `core` with one edge from the part's first node to a
/// random core node; core nodes keep indices `0..core.len()`.
fn graft(id: String, core: &Graph, part: Option<&Graph>, anchor: usize) -> Result<Graph> {
    let mut labels = core.labels().to_vec();
    let mut edges = core.edges().to_vec();
    if let Some(p) = part {
        let off = labels.len();
        labels.extend_from_slice(p.labels());
        edges.extend(p.edges().iter().map(|&(u, v)| (u + off, v + off)));
        edges.push((anchor, off));
    }
    Ok(Graph::new(id, labels, edges)?)
}

fn random_part(cfg: &EisConfig, id: &str, rng: &mut impl Rng) -> Result<Option<Graph>> {
    let n = rng.gen_range(cfg.attachment_nodes.0..=cfg.attachment_nodes.1);
    if n == 0 {
        return Ok(None);
    }
    gen_random_graph(id, n, cfg.label_vocab, cfg.edge_prob, true, rng).map(Some)
}

/// Aligned mode: both pairs share one core `C`, pair₁ = (C⊕A₁, C⊕A₂) and
/// pair₂ = (C⊕B₁, C⊕B₂). Unaligned mode: the attachments `D₁, D₂` are shared
/// and grafted at the same anchor onto two different cores, pair₁ =
/// (C₁⊕D₁, C₁⊕D₂), pair₂ = (C₂⊕D₁, C₂⊕D₂).
pub fn gen_eis_pairs<R: Rng>(mode: EisMode, cfg: &EisConfig, labeler: &Labeler, tag: &str, rng: &mut R) -> Result<EisPairs> {
    let core_n = rng.gen_range(cfg.core_nodes.0..=cfg.core_nodes.1);
    let core = |name: &str, rng: &mut R| gen_random_graph(format!("{tag}.{name}"), core_n, cfg.label_vocab, cfg.edge_prob, true, rng);
    let (c1, c2, parts) = match mode {
        EisMode::Aligned => {
            let c = core("core", rng)?;
            let parts = [
                random_part(cfg, "a1", rng)?,
                random_part(cfg, "a2", rng)?,
                random_part(cfg, "b1", rng)?,
                random_part(cfg, "b2", rng)?,
            ];
            (c.clone(), c, parts)
        }
        EisMode::Unaligned => {
            let c1 = core("core1", rng)?;
            let c2 = core("core2", rng)?;
            let d1 = random_part(cfg, "d1", rng)?;
            let d2 = random_part(cfg, "d2", rng)?;
            (c1, c2, [d1.clone(), d2.clone(), d1, d2])
        }
    };
    let anchor = rng.gen_range(0..core_n);
    let g = |k: usize, c: &Graph| graft(format!("{tag}.g{k}"), c, parts[k].as_ref(), anchor);
    let (g1, g2, g3, g4) = (g(0, &c1)?, g(1, &c1)?, g(2, &c2)?, g(3, &c2)?);
    let core_idx: Vec<usize> = (0..core_n).collect();
    Ok(EisPairs {
        mode,
        first: labeler.label(&g1, &g2)?,
        second: labeler.label(&g3, &g4)?,
        intended_aligned: (core_idx.clone(), core_idx),
    })
}

/// Whether some optimal alignment of `sample` keeps every intended node in
/// the aligned sets of both graphs. Enumerates all alignments, so only
/// suitable for small pairs.
pub fn audit_intended_alignment(sample: &PairSample, intended: &(Vec<usize>, Vec<usize>)) -> Result<bool> {
    let pair = pad_pair(&sample.g1, &sample.g2);
    let n = pair.size();
    if n > crate::ged::DEFAULT_BRUTE_CAP {
        return Err(GedError::TooLarge { size: n, cap: crate::ged::DEFAULT_BRUTE_CAP }.into());
    }
    let optimum = exact_ged_astar(&pair)?.value;
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let alignment = crate::graph::Alignment::new(perm.clone());
        let cost = crate::graph::ged_under_mapping(&pair, &alignment)?.total();
        if cost == optimum {
            let part = extract_partition(&pair, &alignment)?;
            if intended.0.iter().all(|k| part.g1.aligned_nodes.contains(k))
                && intended.1.iter().all(|k| part.g2.aligned_nodes.contains(k))
            {
                return Ok(true);
            }
        }
        // Next permutation in lexicographic order.
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            return Ok(false);
        };
        let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).expect("successor exists");
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
}

/// Recorded in EIS manifests so the construction can be audited.
pub const EIS_INTERPRETATION: &str = "aligned: one random core C shared by both pairs, pair1 = (C+A1, C+A2), \
pair2 = (C+B1, C+B2); unaligned: attachments D1, D2 shared by both pairs and grafted at the same anchor \
onto different cores C1, C2. Attachments are small connected random graphs joined to the core by one edge; \
the core occupies the first node indices of every graph and is the intended aligned part.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisSampleJson {
    pub g1: GraphJson,
    pub g2: GraphJson,
    pub ged: u32,
    pub sim: f64,
    pub source: LabelSource,
}

/// One line of an EIS file: both pairs with inline graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisRecord {
    pub mode: EisMode,
    pub first: EisSampleJson,
    pub second: EisSampleJson,
    pub intended_aligned: (Vec<usize>, Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisManifest {
    pub mode: EisMode,
    pub count: usize,
    pub seed: u64,
    pub config: EisConfig,
    pub labeler: Labeler,
    pub vocab: Vec<String>,
    pub interpretation: String,
}

impl EisRecord {
    pub fn new(set: &EisPairs, vocab: &Vocab) -> Self {
        let sample = |s: &PairSample| EisSampleJson {
            g1: s.g1.to_json(vocab),
            g2: s.g2.to_json(vocab),
            ged: s.ged,
            sim: s.sim,
            source: s.source,
        };
        Self { mode: set.mode, first: sample(&set.first), second: sample(&set.second), intended_aligned: set.intended_aligned.clone() }
    }

    pub fn into_pairs(self, vocab: &mut Vocab) -> Result<EisPairs> {
        let mut sample = |s: EisSampleJson| -> Result<PairSample> {
            Ok(PairSample {
                g1: Graph::from_json(&s.g1, vocab)?,
                g2: Graph::from_json(&s.g2, vocab)?,
                ged: s.ged,
                sim: s.sim,
                source: s.source,
            })
        };
        let first = sample(self.first)?;
        let second = sample(self.second)?;
        Ok(EisPairs { mode: self.mode, first, second, intended_aligned: self.intended_aligned })
    }
}

/// `count` EIS sets in one mode, each tagged `eis{k}`.
pub fn gen_eis_set(mode: EisMode, count: usize, cfg: &EisConfig, labeler: &Labeler, seed: u64) -> Result<Vec<EisPairs>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|k| gen_eis_pairs(mode, cfg, labeler, &format!("eis{k}"), &mut rng)).collect()
}

pub fn write_eis(path: &Path, sets: &[EisPairs], vocab: &Vocab) -> Result<()> {
    let records: Vec<EisRecord> = sets.iter().map(|s| EisRecord::new(s, vocab)).collect();
    write_lines(path, &records)
}

pub fn read_eis(path: &Path, vocab: &mut Vocab) -> Result<Vec<EisPairs>> {
    read_lines::<EisRecord>(path)?.into_iter().map(|r| r.into_pairs(vocab)).collect()
}

/// How pairs are formed from the graph splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairPlan {
    /// Training pairs sampled among training graphs; `None` uses all
    /// unordered pairs.
    pub train_pairs: Option<usize>,
    /// Database size per validation/test query, drawn from the training
    /// graphs; `None` uses every training graph.
    pub database_size: Option<usize>,
    /// Adds `(G, G)` for every training graph.
    pub self_pairs: bool,
}

impl Default for PairPlan {
    fn default() -> Self {
        Self { train_pairs: None, database_size: None, self_pairs: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub label_vocab: usize,
    pub edge_prob: f64,
    pub connected: bool,
    pub seed: u64,
    pub labeler: Labeler,
    pub pairs: PairPlan,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_graphs: 200,
            min_nodes: 5,
            max_nodes: 10,
            label_vocab: 3,
            edge_prob: 0.4,
            connected: false,
            seed: 0,
            labeler: Labeler::default(),
            pairs: PairPlan::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_graphs < 3 {
            return Err(DataError::Config("need at least 3 graphs to form three splits".into()));
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return Err(DataError::Config(format!("bad node range {}..={}", self.min_nodes, self.max_nodes)));
        }
        if self.label_vocab == 0 || !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(DataError::Config("need a non-empty vocabulary and edge_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub labeler: Labeler,
    pub pairs: PairPlan,
    /// Generation settings; absent for ingested graph collections.
    pub generator: Option<GenConfig>,
    pub vocab: Vec<String>,
    pub splits: Splits,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vocab,
    pub graphs: Vec<Graph>,
    pub train: Vec<PairRecord>,
    pub val: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

/// 60/20/20 split sizes; validation and test get the rounded share.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = ((n as f64) * 0.2).round() as usize;
    let test = val;
    (n - val - test, val, test)
}

/// Labels `jobs` pairs at a time; output order matches input order.
pub fn label_pairs(graphs: &[Graph], pairs: &[(usize, usize)], labeler: &Labeler, jobs: usize) -> Result<Vec<PairRecord>> {
    let work = |&(i, j): &(usize, usize)| labeler.label(&graphs[i], &graphs[j]).map(|s| s.record());
    if jobs <= 1 {
        return pairs.iter().map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DataError::Config(format!("thread pool: {e}")))?;
    pool.install(|| pairs.par_iter().map(work).collect())
}

/// Splits `graphs` (shuffled with `seed`) and labels training pairs and
/// query/database pairs.
pub fn build_from_graphs(
    graphs: Vec<Graph>,
    vocab: Vocab,
    labeler: Labeler,
    plan: &PairPlan,
    seed: u64,
    generator: Option<GenConfig>,
    jobs: usize,
) -> Result<Dataset> {
    let mut seen = HashMap::new();
    for (k, g) in graphs.iter().enumerate() {
        if seen.insert(g.id().to_string(), k).is_some() {
            return Err(DataError::DuplicateId(g.id().to_string()));
        }
    }
    if graphs.len() < 3 {
        return Err(DataError::Config("need at least 3 graphs to form three splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(graphs.len());
    let train_idx = &order[..n_train];
    let val_idx = &order[n_train..n_train + n_val];
    let test_idx = &order[n_train + n_val..];

    let mut train_pairs: Vec<(usize, usize)> = Vec::new();
    for (a, &i) in train_idx.iter().enumerate() {
        for &j in &train_idx[a + 1..] {
            train_pairs.push((i, j));
        }
    }
    if let Some(k) = plan.train_pairs {
        train_pairs.shuffle(&mut rng);
        train_pairs.truncate(k);
    }
    if plan.self_pairs {
        train_pairs.extend(train_idx.iter().map(|&i| (i, i)));
    }
    let mut query_pairs = |queries: &[usize]| {
        let mut out = Vec::new();
        for &q in queries {
            let mut db = train_idx.to_vec();
            if let Some(k) = plan.database_size {
                db.shuffle(&mut rng);
                db.truncate(k);
                db.sort_unstable();
            }
            out.extend(db.into_iter().map(|d| (q, d)));
        }
        out
    };
    let val_pairs = query_pairs(val_idx);
    let test_pairs = query_pairs(test_idx);

    let train = label_pairs(&graphs, &train_pairs, &labeler, jobs)?;
    let val = label_pairs(&graphs, &val_pairs, &labeler, jobs)?;
    let test = label_pairs(&graphs, &test_pairs, &labeler, jobs)?;
    let ids = |idx: &[usize]| idx.iter().map(|&k| graphs[k].id().to_string()).collect();
    let counts = BTreeMap::from([
        ("graphs".to_string(), graphs.len()),
        ("train_pairs".to_string(), train.len()),
        ("val_pairs".to_string(), val.len()),
        ("test_pairs".to_string(), test.len()),
    ]);
    let manifest = DatasetManifest {
        seed,
        labeler,
        pairs: plan.clone(),
        generator,
        vocab: vocab.names().to_vec(),
        splits: Splits { train: ids(train_idx), val: ids(val_idx), test: ids(test_idx) },
        counts,
    };
    Ok(Dataset { manifest, vocab, graphs, train, val, test })
}

/// Label names `l0, l1, …`.
pub fn generated_vocab(size: usize) -> Vocab {
    Vocab::from_names((0..size).map(|k| format!("l{k}")))
}

/// Generates the graph population and labels all splits.
pub fn build_dataset(cfg: &GenConfig, jobs: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graphs = (0..cfg.num_graphs)
        .map(|k| {
            let n = rng.gen_range(cfg.min_nodes..=cfg.max_nodes);
            gen_random_graph(format!("g{k:04}"), n, cfg.label_vocab, cfg.edge_prob, cfg.connected, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    build_from_graphs(graphs, generated_vocab(cfg.label_vocab), cfg.labeler, &cfg.pairs, cfg.seed, Some(cfg.clone()), jobs)
}

/// Reads an array of graph JSON objects.
pub fn read_graphs(path: &Path, vocab: &mut Vocab) -> Result<Vec<Graph>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: Vec<GraphJson> =
        serde_json::from_str(&text).map_err(|e| DataError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    raw.iter().map(|g| Graph::from_json(g, vocab).map_err(DataError::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    write_lines(path, pairs)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in items {
        serde_json::to_writer(&mut w, p).expect("serializable");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    read_lines(path)
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let graphs: Vec<GraphJson> = self.graphs.iter().map(|g| g.to_json(&self.vocab)).collect();
        write_json(&dir.join("graphs.json"), &graphs)?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        write_pairs(&dir.join("pairs.train.jsonl"), &self.train)?;
        write_pairs(&dir.join("pairs.val.jsonl"), &self.val)?;
        write_pairs(&dir.join("pairs.test.jsonl"), &self.test)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| DataError::Parse { path: manifest_path.clone(), message: e.to_string() })?;
        let mut vocab = Vocab::from_names(manifest.vocab.iter().cloned());
        let graphs = read_graphs(&dir.join("graphs.json"), &mut vocab)?;
        let ds = Self {
            manifest,
            vocab,
            graphs,
            train: read_pairs(&dir.join("pairs.train.jsonl"))?,
            val: read_pairs(&dir.join("pairs.val.jsonl"))?,
            test: read_pairs(&dir.join("pairs.test.jsonl"))?,
        };
        ds.index_of_ids()?;
        Ok(ds)
    }

    fn index_of_ids(&self) -> Result<HashMap<&str, usize>> {
        let index: HashMap<&str, usize> = self.graphs.iter().enumerate().map(|(k, g)| (g.id(), k)).collect();
        for p in self.train.iter().chain(&self.val).chain(&self.test) {
            for id in [&p.g1, &p.g2] {
                if !index.contains_key(id.as_str()) {
                    return Err(DataError::UnknownGraph(id.clone()));
                }
            }
        }
        Ok(index)
    }

    /// Pair records as index-based training examples.
    pub fn examples(&self, records: &[PairRecord]) -> Result<Vec<Example>> {
        let index = self.index_of_ids()?;
        records
            .iter()
            .map(|r| {
                let i = *index.get(r.g1.as_str()).ok_or_else(|| DataError::UnknownGraph(r.g1.clone()))?;
                let j = *index.get(r.g2.as_str()).ok_or_else(|| DataError::UnknownGraph(r.g2.clone()))?;
                Ok(Example { i, j, ged: r.ged as f64, sim: r.sim })
            })
            .collect()
    }

    pub fn split(&self, name: &str) -> Option<&[PairRecord]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Groups predictions by query graph (`g1`), in first-appearance order.
pub fn group_by_query(records: &[PairRecord], pred: &[f64]) -> Vec<(String, QueryScores)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, QueryScores> = HashMap::new();
    for (r, &p) in records.iter().zip(pred) {
        let entry = groups.entry(r.g1.as_str()).or_insert_with(|| {
            order.push(r.g1.clone());
            QueryScores { pred: Vec::new(), truth: Vec::new() }
        });
        entry.pred.push(p);
        entry.truth.push(r.sim);
    }
    order
        .into_iter()
        .map(|q| {
            let scores = groups.remove(q.as_str()).expect("grouped");
            (q, scores)
        })
        .collect()
}
