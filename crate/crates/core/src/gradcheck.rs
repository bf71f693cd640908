//! Central finite-difference checks for the autodiff primitives and the full
//! model loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::model::{forward, init_parameters, pair_loss, Bound, EncodedGraph, ModelConfig, ModelError, Parameters};
use crate::tensor::{self, Tape, Tensor, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, as a fraction of the
    /// largest analytic gradient magnitude of the instance (at least 1).
    /// Central differences cannot resolve components far below that scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

impl GradCheckConfig {
    /// `|a - n| / max(|a|, |n|, floor * max(1, scale))`.
    pub fn relative_error(&self, analytic: f64, numeric: f64, scale: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor * scale.max(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub instance: usize,
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(name: &str) -> Self {
        Self { name: name.into(), instances: 0, coordinates: 0, max_rel_error: 0.0, worst: None, passed: true }
    }

    fn record(&mut self, cfg: &GradCheckConfig, m: Mismatch, scale: f64) {
        self.coordinates += 1;
        let err = cfg.relative_error(m.analytic, m.numeric, scale);
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
            self.worst = Some(m);
        }
        if !(err <= cfg.tolerance) {
            self.passed = false;
        }
    }
}

type ScalarFn = dyn for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> tensor::Result<Tensor<'t>>;

/// Compares the backward pass of `f` with central differences on every
/// coordinate of every input.
pub fn check_function(
    report: &mut GradCheckReport,
    instance: usize,
    inputs: &[TensorData],
    f: &ScalarFn,
    cfg: &GradCheckConfig,
) -> tensor::Result<()> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|d| tape.param(d)).collect();
    f(&tape, &leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |perturbed: &[TensorData]| -> tensor::Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = perturbed.iter().map(|d| tape.constant(d)).collect();
        Ok(f(&tape, &leaves)?.item())
    };
    let scale = max_abs(analytic.iter().flatten());
    let mut work = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..grad.len() {
            let original = work[input].values[index];
            work[input].values[index] = original + cfg.step;
            let plus = eval(&work)?;
            work[input].values[index] = original - cfg.step;
            let minus = eval(&work)?;
            work[input].values[index] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let m = Mismatch { instance, input: format!("#{input}"), index, analytic: grad[index], numeric };
            report.record(cfg, m, scale);
        }
    }
    report.instances = report.instances.max(instance + 1);
    Ok(())
}

fn max_abs<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.fold(0.0, |m, v| m.max(v.abs()))
}

/// Weighted sum `Σ out ⊙ w`, so every output element reaches the loss with
/// a distinct coefficient.
fn project<'t>(tape: &'t Tape, out: Tensor<'t>, rng_seed: u64) -> tensor::Result<Tensor<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = out.shape();
    let w: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(out.mul(&tape.leaf(&shape, w, false)?)?.sum_all())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], avoid: &[f64]) -> TensorData {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if avoid.iter().all(|&a| (v - a).abs() > 0.05) {
                break v;
            }
        })
        .collect();
    TensorData::new(shape.to_vec(), values).expect("shape matches")
}

struct Primitive {
    name: &'static str,
    shapes: fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    /// Points where the primitive is not differentiable.
    kinks: &'static [f64],
    f: Box<ScalarFn>,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4))
}

fn primitives() -> Vec<Primitive> {
    fn p(name: &'static str, shapes: fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>, kinks: &'static [f64], f: Box<ScalarFn>) -> Primitive {
        Primitive { name, shapes, kinks, f }
    }
    let same2 = |r: &mut ChaCha8Rng| {
        let (m, n, _) = dims(r);
        vec![vec![m, n], vec![m, n]]
    };
    let one = |r: &mut ChaCha8Rng| {
        let (m, n, _) = dims(r);
        vec![vec![m, n]]
    };
    let rows2 = |r: &mut ChaCha8Rng| {
        let (_, n, _) = dims(r);
        vec![vec![1, n + 1], vec![1, n + 1]]
    };
    vec![
        p("matmul", |r| {
            let (m, k, n) = dims(r);
            vec![vec![m, k], vec![k, n]]
        }, &[], Box::new(|t, x| project(t, x[0].matmul(&x[1])?, 1))),
        p("add", same2, &[], Box::new(|t, x| project(t, x[0].add(&x[1])?, 2))),
        p("add_row", |r| {
            let (m, n, _) = dims(r);
            vec![vec![m, n], vec![1, n]]
        }, &[], Box::new(|t, x| project(t, x[0].add(&x[1])?, 3))),
        p("sub", same2, &[], Box::new(|t, x| project(t, x[0].sub(&x[1])?, 4))),
        p("mul", same2, &[], Box::new(|t, x| project(t, x[0].mul(&x[1])?, 5))),
        p("scalar_mul", |r| {
            let (m, n, _) = dims(r);
            vec![vec![m, n], vec![1, 1]]
        }, &[], Box::new(|t, x| project(t, x[0].scalar_mul(&x[1])?, 6))),
        p("scale", one, &[], Box::new(|t, x| project(t, x[0].scale(-1.7), 7))),
        p("add_const", one, &[], Box::new(|t, x| project(t, x[0].add_const(0.3), 8))),
        p("relu", one, &[0.0], Box::new(|t, x| project(t, x[0].relu(), 9))),
        p("sigmoid", one, &[], Box::new(|t, x| project(t, x[0].sigmoid(), 10))),
        p("clamp", one, &[-0.5, 0.5], Box::new(|t, x| project(t, x[0].clamp(-0.5, 0.5), 11))),
        p("sum_rows", one, &[], Box::new(|t, x| project(t, x[0].sum_rows()?, 12))),
        p("sum_all", one, &[], Box::new(|t, x| project(t, x[0].sum_all(), 13))),
        p("concat", |r| {
            let (m, a, b) = dims(r);
            vec![vec![m, a], vec![m, b], vec![m, 2]]
        }, &[], Box::new(|t, x| project(t, Tensor::concat(x)?, 14))),
        p("transpose", one, &[], Box::new(|t, x| project(t, x[0].transpose()?, 15))),
        p("slice_rows", |r| {
            let (_, n, _) = dims(r);
            vec![vec![4, n]]
        }, &[], Box::new(|t, x| project(t, x[0].slice_rows(1, 3)?, 16))),
        p("reshape", |r| {
            let (m, n, _) = dims(r);
            vec![vec![m, 2 * n]]
        }, &[], Box::new(|t, x| {
            let s = x[0].shape();
            project(t, x[0].reshape(&[s[1] / 2, 2 * s[0]])?, 17)
        })),
        p("gather_rows", |r| {
            let (_, n, _) = dims(r);
            vec![vec![3, n]]
        }, &[], Box::new(|t, x| project(t, x[0].gather_rows(&[2, 0, 2, 1, 2])?, 18))),
        p("scatter_add_rows", |r| {
            let (_, n, _) = dims(r);
            vec![vec![5, n]]
        }, &[], Box::new(|t, x| project(t, x[0].scatter_add_rows(&[1, 0, 1, 3, 1], 4)?, 19))),
        p("l2_norm", one, &[], Box::new(|t, x| project(t, x[0].l2_norm(), 20))),
        p("dot", rows2, &[], Box::new(|t, x| project(t, x[0].dot(&x[1])?, 21))),
        p("cosine_similarity", rows2, &[], Box::new(|t, x| project(t, x[0].cosine_similarity(&x[1])?, 22))),
    ]
}

/// Names of the primitives covered by [`check_primitives`].
pub fn primitive_names() -> Vec<&'static str> {
    primitives().iter().map(|p| p.name).collect()
}

/// One report per primitive over `instances` random inputs each.
pub fn check_primitives(instances: usize, seed: u64, cfg: &GradCheckConfig) -> tensor::Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (k, prim) in primitives().into_iter().enumerate() {
        let mut report = GradCheckReport::new(prim.name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * k as u64));
        for instance in 0..instances {
            let inputs: Vec<TensorData> =
                (prim.shapes)(&mut rng).iter().map(|s| random(&mut rng, s, prim.kinks)).collect();
            check_function(&mut report, instance, &inputs, prim.f.as_ref(), cfg)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Small configuration that exercises every code path (including residual
/// projections) at a size where checking every parameter stays cheap.
pub fn small_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        channels: vec![8, 8, 6, 4],
        ntn_k: 4,
        head_hidden: 8,
        label_vocab_size: 3,
        seed,
        ..Default::default()
    }
}

fn random_graph(rng: &mut ChaCha8Rng, id: &str) -> Graph {
    let n = rng.gen_range(3..=6);
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(0.2) && !edges.contains(&(u, v)) {
                edges.push((u, v));
            }
        }
    }
    Graph::new(id, labels, edges).expect("valid random graph")
}

fn model_loss(cfg: &ModelConfig, params: &Parameters, gi: &EncodedGraph, gj: &EncodedGraph, replace: bool, target: (f64, f64)) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let p = Bound::new(&tape, cfg, params, false)?;
    let (out, _) = forward(cfg, &p, gi, gj, replace, false)?;
    Ok(pair_loss(&out, target.0, target.1, cfg.lambda)?.item())
}

/// Checks the gradient of the single-pair loss with respect to every model
/// parameter on `instances` random pairs and initializations. Odd instances
/// take the replicate branch.
pub fn check_model(instances: usize, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let mut report = GradCheckReport::new("model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for instance in 0..instances {
        let model_cfg = small_model_config(seed.wrapping_add(instance as u64));
        let mut params = init_parameters(&model_cfg)?;
        // Nonzero biases so that every bias path carries signal.
        params.map_values(|_, v| v.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1)));
        let gi = EncodedGraph::new(&random_graph(&mut rng, "a"), 3)?;
        let gj = EncodedGraph::new(&random_graph(&mut rng, "b"), 3)?;
        let target = (rng.gen_range(0.0..8.0f64).round(), rng.gen_range(0.05..1.0));
        let replace = instance % 2 == 1;

        let tape = Tape::new();
        let p = Bound::new(&tape, &model_cfg, &params, true)?;
        let (out, _) = forward(&model_cfg, &p, &gi, &gj, replace, false)?;
        pair_loss(&out, target.0, target.1, model_cfg.lambda)?.backward()?;
        let grads = p.gradients();
        drop(p);
        let scale = max_abs(grads.values().flatten());

        let mut work = params.clone();
        for (name, grad) in &grads {
            for (index, &analytic) in grad.iter().enumerate() {
                let original = work.tensors[name].values[index];
                let mut at = |v: f64| -> Result<f64, ModelError> {
                    work.tensors.get_mut(name).expect("bound").values[index] = v;
                    model_loss(&model_cfg, &work, &gi, &gj, replace, target)
                };
                let plus = at(original + cfg.step)?;
                let minus = at(original - cfg.step)?;
                at(original)?;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                report.record(cfg, Mismatch { instance, input: name.clone(), index, analytic, numeric }, scale);
            }
        }
        report.instances = instance + 1;
    }
    Ok(report)
}
