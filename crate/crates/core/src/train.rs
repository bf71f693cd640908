//! Mini-batch training with Adam and best-validation checkpointing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward, iir_draw, pair_loss, Bound, EncodedGraph, GcgSim, ModelError, Parameters};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: &'static str, epoch: usize, step: u64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("example {index} refers to graph {graph}, but only {available} graphs are loaded")]
    GraphIndex { index: usize, graph: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(TrainError::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A labeled pair referring to graphs by index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub i: usize,
    pub j: usize,
    pub ged: f64,
    pub sim: f64,
}

fn check_examples(graphs: &[EncodedGraph], examples: &[Example]) -> Result<()> {
    for (index, e) in examples.iter().enumerate() {
        for graph in [e.i, e.j] {
            if graph >= graphs.len() {
                return Err(TrainError::GraphIndex { index, graph, available: graphs.len() });
            }
        }
    }
    Ok(())
}

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry are left unchanged.
    pub fn update(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                tensor.values[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
/// `replace[k]` is the replicate decision for `batch[k]`.
pub fn batch_gradients(
    model: &GcgSim,
    graphs: &[EncodedGraph],
    batch: &[Example],
    replace: &[bool],
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.config, &model.parameters, true)?;
    let mut losses: Vec<Tensor> = Vec::with_capacity(batch.len());
    for (e, &r) in batch.iter().zip(replace) {
        let (out, _) = forward(&model.config, &p, &graphs[e.i], &graphs[e.j], r, false)?;
        losses.push(pair_loss(&out, e.ged, e.sim, model.config.lambda)?);
    }
    let total = Tensor::concat(&losses).map_err(ModelError::from)?.sum_all();
    let mean = total.scale(1.0 / batch.len() as f64);
    mean.backward().map_err(ModelError::from)?;
    Ok((mean.item(), p.gradients()))
}

/// Mean loss in inference mode (no replicate).
pub fn evaluate_loss(model: &GcgSim, graphs: &[EncodedGraph], examples: &[Example]) -> Result<f64> {
    check_examples(graphs, examples)?;
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for chunk in examples.chunks(256) {
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.config, &model.parameters, false)?;
        for e in chunk {
            let (out, _) = forward(&model.config, &p, &graphs[e.i], &graphs[e.j], false, false)?;
            sum += pair_loss(&out, e.ged, e.sim, model.config.lambda)?.item();
        }
    }
    Ok(sum / examples.len() as f64)
}

/// Inference-mode similarity predictions.
pub fn predict_all(model: &GcgSim, graphs: &[EncodedGraph], examples: &[Example]) -> Result<Vec<f64>> {
    check_examples(graphs, examples)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(256) {
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.config, &model.parameters, false)?;
        for e in chunk {
            out.push(forward(&model.config, &p, &graphs[e.i], &graphs[e.j], false, false)?.0.sim.item());
        }
    }
    Ok(out)
}

fn clip(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub replaced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: u64,
}

/// Trains `model` in place and leaves it at the epoch with the lowest
/// validation loss (the last epoch when `val` is empty).
pub fn fit(
    model: &mut GcgSim,
    graphs: &[EncodedGraph],
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_examples(graphs, train)?;
    check_examples(graphs, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let probability = model.config.replace_probability();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut replaced = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&k| train[k]).collect();
            let flags: Vec<bool> = batch.iter().map(|_| iir_draw(&mut rng, probability, true)).collect();
            replaced += flags.iter().filter(|&&f| f).count();
            let (loss, mut grads) = batch_gradients(model, graphs, &batch, &flags)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { what: "loss", epoch, step: adam.step + 1 });
            }
            if grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { what: "gradient", epoch, step: adam.step + 1 });
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip(&mut grads, max_norm);
            }
            adam.update(&mut model.parameters, &grads);
            if !model.parameters.all_finite() {
                return Err(TrainError::NonFinite { what: "parameter", epoch, step: adam.step });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = if train.is_empty() { f64::NAN } else { loss_sum / train.len() as f64 };
        let val_loss = if val.is_empty() { train_loss } else { evaluate_loss(model, graphs, val)? };
        let stats = EpochStats { epoch, train_loss, val_loss, replaced };
        on_epoch(&stats);
        history.push(stats);
        let improves = match &best {
            None => true,
            Some((b, _, _)) => val_loss < *b || val.is_empty(),
        };
        if improves {
            best = Some((val_loss, epoch, model.parameters.clone()));
        }
    }
    let (best_val_loss, best_epoch) = match best {
        Some((loss, epoch, params)) => {
            model.parameters = params;
            (loss, epoch)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainReport { train_config: cfg.clone(), epochs: history, best_epoch, best_val_loss, steps: adam.step })
}
