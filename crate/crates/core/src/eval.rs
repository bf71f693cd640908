//! Evaluation glue between trained models, datasets and metrics: split
//! reports, swap probes, top-k retrieval and GNCM weight dumps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{group_by_query, DataError, Dataset, EisPairs, Labeler, PairRecord};
use crate::graph::Graph;
use crate::metrics::{self, compare_scores, MetricError, MetricReport, RankScope};
use crate::model::{swap_inference, EncodedGraph, GcgSim, ModelError, SwapMode};
use crate::train::{predict_all, Example, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Predictions with `jobs` worker threads; chunk boundaries and output order
/// do not depend on `jobs`.
pub fn predict(model: &GcgSim, graphs: &[EncodedGraph], examples: &[Example], jobs: usize) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    if jobs <= 1 {
        return Ok(predict_all(model, graphs, examples)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Invalid(format!("thread pool: {e}")))?;
    let parts: Vec<Vec<f64>> = pool.install(|| {
        examples
            .par_chunks(CHUNK)
            .map(|c| predict_all(model, graphs, c))
            .collect::<std::result::Result<_, _>>()
    })?;
    Ok(parts.concat())
}

/// Every dataset graph encoded with the model's vocabulary, in dataset order.
pub fn encode_all(model: &GcgSim, graphs: &[Graph]) -> Result<Vec<EncodedGraph>> {
    Ok(graphs.iter().map(|g| model.encode(g)).collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
    /// MSE (×10⁻³) of predicting the mean training similarity everywhere.
    pub constant_mean_mse_e3: f64,
}

/// Mean of the training labels used as a constant prediction for `records`.
pub fn constant_mean_mse(train: &[PairRecord], records: &[PairRecord]) -> Result<f64> {
    if train.is_empty() {
        return Err(MetricError::Empty.into());
    }
    let mean = train.iter().map(|r| r.sim).sum::<f64>() / train.len() as f64;
    let truth: Vec<f64> = records.iter().map(|r| r.sim).collect();
    Ok(metrics::mse_metric(&vec![mean; truth.len()], &truth)?)
}

pub fn evaluate_split(model: &GcgSim, ds: &Dataset, split: &str, scope: RankScope, jobs: usize) -> Result<SplitReport> {
    let records = ds.split(split).ok_or_else(|| EvalError::Invalid(format!("unknown split `{split}`")))?;
    let graphs = encode_all(model, &ds.graphs)?;
    let pred = predict(model, &graphs, &ds.examples(records)?, jobs)?;
    let queries: Vec<_> = group_by_query(records, &pred).into_iter().map(|(_, q)| q).collect();
    Ok(SplitReport {
        split: split.to_string(),
        metrics: metrics::evaluate_query_set(&queries, scope)?,
        constant_mean_mse_e3: constant_mean_mse(&ds.train, records)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub mode: SwapMode,
    pub pairs: usize,
    pub mse_original: f64,
    pub mse_swapped: f64,
    /// `mse_swapped - mse_original`; positive values mean the swap degraded
    /// the predictions.
    pub mse_difference: f64,
}

impl SwapReport {
    fn new(mode: SwapMode, original: &[f64], swapped: &[f64], truth: &[f64]) -> Result<Self> {
        let mse_original = metrics::mse(original, truth)?;
        let mse_swapped = metrics::mse(swapped, truth)?;
        Ok(Self {
            mode,
            pairs: truth.len(),
            mse_original,
            mse_swapped,
            mse_difference: mse_swapped - mse_original,
        })
    }
}

/// Intra-instance swap over labeled pairs; targets stay the original ones.
pub fn swap_eval_iis(model: &GcgSim, graphs: &[EncodedGraph], examples: &[Example]) -> Result<SwapReport> {
    let mut original = Vec::with_capacity(examples.len());
    let mut swapped = Vec::with_capacity(examples.len());
    for e in examples {
        let (gi, gj) = lookup(graphs, e)?;
        let acts = model.infer(gi, gj)?;
        original.push(acts.sim);
        swapped.push(swap_inference(&model.config, &model.parameters, &acts, None, SwapMode::Iis)?.0);
    }
    let truth: Vec<f64> = examples.iter().map(|e| e.sim).collect();
    SwapReport::new(SwapMode::Iis, &original, &swapped, &truth)
}

fn lookup<'a>(graphs: &'a [EncodedGraph], e: &Example) -> Result<(&'a EncodedGraph, &'a EncodedGraph)> {
    match (graphs.get(e.i), graphs.get(e.j)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(EvalError::Invalid(format!("pair ({}, {}) is out of range for {} graphs", e.i, e.j, graphs.len()))),
    }
}

/// Extra-instance swap between the two pairs of each `EisPairs`.
pub fn swap_eval_eis(model: &GcgSim, sets: &[EisPairs], mode: SwapMode) -> Result<SwapReport> {
    if mode == SwapMode::Iis {
        return Err(EvalError::Invalid("use swap_eval_iis for intra-instance swaps".into()));
    }
    let (mut original, mut swapped, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for set in sets {
        let a = model.infer(&model.encode(&set.first.g1)?, &model.encode(&set.first.g2)?)?;
        let b = model.infer(&model.encode(&set.second.g1)?, &model.encode(&set.second.g2)?)?;
        let (sa, sb) = swap_inference(&model.config, &model.parameters, &a, Some(&b), mode)?;
        original.extend([a.sim, b.sim]);
        swapped.extend([sa, sb]);
        truth.extend([set.first.sim, set.second.sim]);
    }
    SwapReport::new(mode, &original, &swapped, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub id: String,
    pub predicted_sim: f64,
    pub ged: Option<u32>,
    pub sim: Option<f64>,
}

/// Database graphs ordered by predicted similarity to `query` (ties by
/// database order), truncated to `k`. With a labeler, each row also carries
/// the reference GED and similarity.
pub fn rank(model: &GcgSim, query: &Graph, database: &[Graph], k: usize, labeler: Option<&Labeler>) -> Result<Vec<RankRow>> {
    let q = model.encode(query)?;
    let mut scored = database
        .iter()
        .enumerate()
        .map(|(idx, g)| Ok((idx, model.predict(&q, &model.encode(g)?)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(compare_scores);
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (idx, s))| {
            let truth = labeler.map(|l| l.label(query, &database[idx])).transpose()?;
            Ok(RankRow {
                rank: r + 1,
                id: database[idx].id().to_string(),
                predicted_sim: s,
                ged: truth.as_ref().map(|t| t.ged),
                sim: truth.as_ref().map(|t| t.sim),
            })
        })
        .collect()
}

/// Per-layer GNCM node weights as CSV with header `layer,graph,node,omega`;
/// `graph` is 1 or 2.
pub fn gncm_csv(model: &GcgSim, g1: &Graph, g2: &Graph) -> Result<String> {
    let acts = model.infer(&model.encode(g1)?, &model.encode(g2)?)?;
    let mut out = String::from("layer,graph,node,omega\n");
    for (l, layer) in acts.layers.iter().enumerate() {
        for (graph, omega) in [(1, &layer.omega_i), (2, &layer.omega_j)] {
            for (node, w) in omega.iter().enumerate() {
                out.push_str(&format!("{},{graph},{node},{w}\n", l + 1));
            }
        }
    }
    Ok(out)
}
