//! GED-consistent similarity network.
//!
//! Pipeline for a pair `(G_i, G_j)`, per layer `l = 1..L`:
//!
//! 1. residual gated graph convolution produces node embeddings `H_V^l`;
//! 2. a DeepSets readout gives graph embeddings `H_G^l`;
//! 3. graph-node cross matching weights each node of one graph by its cosine
//!    similarity to the other graph's embedding, giving `H̃_G^l`;
//! 4. the prior `α^l = cos(H_G_i^l, H_G_j^l)` splits `H̃_G^l` into aligned
//!    (`α·MLP_as`) and unaligned (`(1-α)·MLP_us`) embeddings;
//! 5. during training the aligned embedding of `G_i` is occasionally replaced
//!    by its counterpart's (intra-instance replicate);
//! 6. two neural tensor networks score aligned and unaligned interactions.
//!
//! The per-layer interactions are concatenated and fed to two edit-cost heads
//! and a similarity head.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::tensor::{NamedTensors, Tape, Tensor, TensorData, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("graph `{graph}` node {node} has label {label} outside the vocabulary of {vocab}")]
    UnknownLabel { graph: String, node: usize, label: u32, vocab: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("swap probe: {0}")]
    Swap(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the cosine prior is mapped into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMap {
    #[default]
    Clamp,
    /// `(cos + 1) / 2`
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub ntn_k: usize,
    pub beta: f64,
    pub lambda: f64,
    pub label_vocab_size: usize,
    pub seed: u64,
    pub head_hidden: usize,
    pub alpha_map: AlphaMap,
    /// Replace with probability `1 - beta` instead of `beta`.
    pub iir_flip: bool,
    /// Ablation switch: `false` aggregates node embeddings with unit weights.
    pub use_gncm: bool,
    /// Ablation switch: `false` drops the `α` / `1-α` scaling.
    pub use_psgd: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 64, 32, 16],
            ntn_k: 16,
            beta: 0.05,
            lambda: 0.05,
            label_vocab_size: 1,
            seed: 0,
            head_hidden: 32,
            alpha_map: AlphaMap::Clamp,
            iir_flip: false,
            use_gncm: true,
            use_psgd: true,
        }
    }
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::Config("channels must be non-empty and positive".into()));
        }
        if self.ntn_k == 0 || self.head_hidden == 0 || self.label_vocab_size == 0 {
            return Err(ModelError::Config("ntn_k, head_hidden and vocabulary must be positive".into()));
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Probability that the aligned embedding of `G_i` is replaced.
    pub fn replace_probability(&self) -> f64 {
        if self.iir_flip {
            1.0 - self.beta
        } else {
            self.beta
        }
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let out = self.channels[l];
        let inp = if l == 0 { self.channels[0] } else { self.channels[l - 1] };
        (inp, out)
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub tensors: NamedTensors,
}

impl Parameters {
    pub fn get(&self, name: &str) -> Result<&TensorData> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(TensorData::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (name, t) in self.tensors.iter_mut() {
            f(name, &mut t.values);
        }
    }
}

/// Expected parameter names and shapes, in initialization order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));
    let l_count = cfg.layers();
    let k = cfg.ntn_k;
    add("input.w".into(), vec![cfg.label_vocab_size, cfg.channels[0]]);
    for l in 0..l_count {
        let (i, o) = cfg.layer_dims(l);
        let p = format!("rggc.{l}");
        add(format!("{p}.ws"), vec![i, o]);
        add(format!("{p}.ws_b"), vec![1, o]);
        add(format!("{p}.wn"), vec![i, o]);
        add(format!("{p}.wa"), vec![i, o]);
        add(format!("{p}.wa_b"), vec![1, o]);
        add(format!("{p}.wb"), vec![i, o]);
        if i != o {
            add(format!("{p}.res"), vec![i, o]);
        }
    }
    for l in 0..l_count {
        let d = cfg.channels[l];
        for block in ["ds", "enc_as", "enc_us"] {
            let p = format!("{block}.{l}");
            add(format!("{p}.w1"), vec![d, d]);
            add(format!("{p}.b1"), vec![1, d]);
            add(format!("{p}.w2"), vec![d, d]);
            add(format!("{p}.b2"), vec![1, d]);
        }
        for block in ["ntn_as", "ntn_us"] {
            let p = format!("{block}.{l}");
            add(format!("{p}.w"), vec![d, k * d]);
            add(format!("{p}.v"), vec![2 * d, k]);
            add(format!("{p}.b"), vec![1, k]);
        }
    }
    let fused = l_count * k;
    let h = cfg.head_hidden;
    for (name, inp) in [("ec_as", fused), ("ec_us", fused), ("sim", 2 * fused)] {
        add(format!("{name}.w1"), vec![inp, h]);
        add(format!("{name}.b1"), vec![1, h]);
        add(format!("{name}.w2"), vec![h, 1]);
        add(format!("{name}.b2"), vec![1, 1]);
    }
    out
}

/// Parameter group used for gradient-flow checks.
pub fn parameter_group(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "input" | "rggc" => "rggc",
        "ds" => "deepsets",
        "enc_as" | "enc_us" => "encoders",
        "ntn_as" | "ntn_us" => "ntn",
        _ => "heads",
    }
}

/// Glorot-uniform weights, zero biases, drawn in layout order from `cfg.seed`.
pub fn init_parameters(cfg: &ModelConfig) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in parameter_layout(cfg) {
        let n: usize = shape.iter().product();
        let is_bias = name.ends_with("_b") || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
        let values = if is_bias {
            vec![0.0; n]
        } else {
            // NTN slices are d×d each.
            let (fan_in, fan_out) = if name.starts_with("ntn") && name.ends_with(".w") {
                (shape[0], shape[0])
            } else {
                (shape[0], shape[1])
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        };
        tensors.insert(name, TensorData::new(shape, values)?);
    }
    Ok(Parameters { tensors })
}

pub fn check_parameters(cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    for (name, shape) in parameter_layout(cfg) {
        let t = params.get(&name)?;
        if t.shape != shape {
            return Err(ModelError::ParamShape { name, found: t.shape.clone(), expected: shape });
        }
    }
    Ok(())
}

pub struct Linear<'t> {
    pub w: Tensor<'t>,
    pub b: Option<Tensor<'t>>,
}

impl<'t> Linear<'t> {
    pub fn apply(&self, x: &Tensor<'t>) -> Result<Tensor<'t>> {
        let y = x.matmul(&self.w)?;
        Ok(match &self.b {
            Some(b) => y.add(b)?,
            None => y,
        })
    }
}

/// Single hidden layer with ReLU and a linear output.
pub struct Mlp<'t> {
    pub hidden: Linear<'t>,
    pub out: Linear<'t>,
}

impl<'t> Mlp<'t> {
    pub fn apply(&self, x: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.out.apply(&self.hidden.apply(x)?.relu())
    }
}

pub struct RggcLayer<'t> {
    pub ws: Linear<'t>,
    pub wn: Tensor<'t>,
    pub wa: Linear<'t>,
    pub wb: Tensor<'t>,
    pub res: Option<Tensor<'t>>,
}

pub struct Ntn<'t> {
    /// `K` side-by-side `d×d` slices as a `[d, K·d]` matrix.
    pub w: Tensor<'t>,
    /// `[2d, K]`
    pub v: Tensor<'t>,
    /// `[1, K]`
    pub b: Tensor<'t>,
}

/// Parameters bound to a tape as differentiable leaves.
pub struct Bound<'t> {
    pub input: Tensor<'t>,
    pub rggc: Vec<RggcLayer<'t>>,
    pub deepsets: Vec<Mlp<'t>>,
    pub enc_as: Vec<Mlp<'t>>,
    pub enc_us: Vec<Mlp<'t>>,
    pub ntn_as: Vec<Ntn<'t>>,
    pub ntn_us: Vec<Ntn<'t>>,
    pub ec_as: Mlp<'t>,
    pub ec_us: Mlp<'t>,
    pub sim: Mlp<'t>,
    pub leaves: Vec<(String, Tensor<'t>)>,
}

impl<'t> Bound<'t> {
    /// Records every parameter on `tape`; gradients are tracked when
    /// `requires_grad` is set.
    pub fn new(tape: &'t Tape, cfg: &ModelConfig, params: &Parameters, requires_grad: bool) -> Result<Self> {
        check_parameters(cfg, params)?;
        let mut leaves = Vec::new();
        let mut get = |name: String| -> Result<Tensor<'t>> {
            let data = params.get(&name)?;
            let t = if requires_grad { tape.param(data) } else { tape.constant(data) };
            leaves.push((name, t));
            Ok(t)
        };
        let mlp = |p: String, get: &mut dyn FnMut(String) -> Result<Tensor<'t>>| -> Result<Mlp<'t>> {
            Ok(Mlp {
                hidden: Linear { w: get(format!("{p}.w1"))?, b: Some(get(format!("{p}.b1"))?) },
                out: Linear { w: get(format!("{p}.w2"))?, b: Some(get(format!("{p}.b2"))?) },
            })
        };
        let input = get("input.w".into())?;
        let mut rggc = Vec::new();
        for l in 0..cfg.layers() {
            let (i, o) = cfg.layer_dims(l);
            let p = format!("rggc.{l}");
            rggc.push(RggcLayer {
                ws: Linear { w: get(format!("{p}.ws"))?, b: Some(get(format!("{p}.ws_b"))?) },
                wn: get(format!("{p}.wn"))?,
                wa: Linear { w: get(format!("{p}.wa"))?, b: Some(get(format!("{p}.wa_b"))?) },
                wb: get(format!("{p}.wb"))?,
                res: if i != o { Some(get(format!("{p}.res"))?) } else { None },
            });
        }
        let (mut deepsets, mut enc_as, mut enc_us, mut ntn_as, mut ntn_us) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for l in 0..cfg.layers() {
            deepsets.push(mlp(format!("ds.{l}"), &mut get)?);
            enc_as.push(mlp(format!("enc_as.{l}"), &mut get)?);
            enc_us.push(mlp(format!("enc_us.{l}"), &mut get)?);
            for (block, dst) in [("ntn_as", &mut ntn_as), ("ntn_us", &mut ntn_us)] {
                let p = format!("{block}.{l}");
                dst.push(Ntn {
                    w: get(format!("{p}.w"))?,
                    v: get(format!("{p}.v"))?,
                    b: get(format!("{p}.b"))?,
                });
            }
        }
        let ec_as = mlp("ec_as".into(), &mut get)?;
        let ec_us = mlp("ec_us".into(), &mut get)?;
        let sim = mlp("sim".into(), &mut get)?;
        Ok(Self { input, rggc, deepsets, enc_as, enc_us, ntn_as, ntn_us, ec_as, ec_us, sim, leaves })
    }

    /// Accumulated gradients by parameter name (zeros where none arrived).
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        self.leaves
            .iter()
            .map(|(name, t)| (name.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }
}

/// Graph prepared for the encoder: label ids plus directed message lists.
#[derive(Debug, Clone)]
pub struct EncodedGraph {
    pub id: String,
    pub labels: Vec<usize>,
    /// Receiving node of each directed edge.
    pub receivers: Vec<usize>,
    /// Sending node of each directed edge.
    pub senders: Vec<usize>,
}

impl EncodedGraph {
    pub fn new(g: &Graph, vocab_size: usize) -> Result<Self> {
        let mut labels = Vec::with_capacity(g.node_count());
        for (node, &label) in g.labels().iter().enumerate() {
            if label as usize >= vocab_size {
                return Err(ModelError::UnknownLabel {
                    graph: g.id().to_string(),
                    node,
                    label,
                    vocab: vocab_size,
                });
            }
            labels.push(label as usize);
        }
        let mut receivers = Vec::with_capacity(2 * g.edge_count());
        let mut senders = Vec::with_capacity(2 * g.edge_count());
        for &(u, v) in g.edges() {
            receivers.extend([u, v]);
            senders.extend([v, u]);
        }
        Ok(Self { id: g.id().to_string(), labels, receivers, senders })
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }
}

/// One residual gated graph convolution step:
/// `H'[k] = R·H[k] + ReLU(W_S H[k] + Σ_u σ(W_A H[k] + W_B H[u]) ⊙ W_N H[u])`,
/// where `R` is the identity or a learned projection when widths differ.
pub fn rggc_layer<'t>(h: &Tensor<'t>, layer: &RggcLayer<'t>, g: &EncodedGraph) -> Result<Tensor<'t>> {
    let mut pre = layer.ws.apply(h)?;
    if !g.receivers.is_empty() {
        let gate_self = layer.wa.apply(h)?;
        let gate_nbr = h.matmul(&layer.wb)?;
        let msg = h.matmul(&layer.wn)?;
        let gate = gate_self
            .gather_rows(&g.receivers)?
            .add(&gate_nbr.gather_rows(&g.senders)?)?
            .sigmoid();
        let agg = gate
            .mul(&msg.gather_rows(&g.senders)?)?
            .scatter_add_rows(&g.receivers, g.node_count())?;
        pre = pre.add(&agg)?;
    }
    let residual = match &layer.res {
        Some(r) => h.matmul(r)?,
        None => *h,
    };
    Ok(residual.add(&pre.relu())?)
}

/// Node embeddings `H^0..H^L`; `H^0` is the learned embedding of each label.
pub fn encode_nodes<'t>(g: &EncodedGraph, p: &Bound<'t>) -> Result<Vec<Tensor<'t>>> {
    let mut hs = vec![p.input.gather_rows(&g.labels)?];
    for layer in &p.rggc {
        let next = rggc_layer(hs.last().unwrap(), layer, g)?;
        hs.push(next);
    }
    Ok(hs)
}

/// DeepSets readout: `MLP(Σ_k H[k])`.
pub fn readout<'t>(h: &Tensor<'t>, mlp: &Mlp<'t>) -> Result<Tensor<'t>> {
    mlp.apply(&h.sum_rows()?)
}

/// Cross matching: `ω[k] = cos(H_V[k], H_G_other)` and `H̃ = Σ_k ω[k]·H_V[k]`.
pub fn gncm<'t>(h_nodes: &Tensor<'t>, h_graph_other: &Tensor<'t>) -> Result<(Tensor<'t>, Tensor<'t>)> {
    let n = h_nodes.shape()[0];
    let weights = (0..n)
        .map(|k| h_nodes.slice_rows(k, k + 1)?.cosine_similarity(h_graph_other))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let omega = Tensor::concat(&weights)?;
    let pooled = omega.matmul(h_nodes)?;
    Ok((omega, pooled))
}

/// Prior weight `α = map(cos(H_G_i, H_G_j))` in `[0, 1]`.
pub fn psgd_alpha<'t>(hg_i: &Tensor<'t>, hg_j: &Tensor<'t>, map: AlphaMap) -> Result<Tensor<'t>> {
    let cos = hg_i.cosine_similarity(hg_j)?;
    Ok(match map {
        AlphaMap::Clamp => cos.clamp(0.0, 1.0),
        AlphaMap::Affine => cos.add_const(1.0).scale(0.5),
    })
}

/// `(α·MLP_as(H̃), (1-α)·MLP_us(H̃))`.
pub fn psgd_disentangle<'t>(
    pooled: &Tensor<'t>,
    alpha: &Tensor<'t>,
    enc_as: &Mlp<'t>,
    enc_us: &Mlp<'t>,
) -> Result<(Tensor<'t>, Tensor<'t>)> {
    let one_minus = alpha.scale(-1.0).add_const(1.0);
    let h_as = enc_as.apply(pooled)?.scalar_mul(alpha)?;
    let h_us = enc_us.apply(pooled)?.scalar_mul(&one_minus)?;
    Ok((h_as, h_us))
}

/// Draws whether this forward pass replaces `H_as_i` by `H_as_j`. Never
/// fires outside training and never consumes randomness there.
pub fn iir_draw(rng: &mut impl Rng, probability: f64, training: bool) -> bool {
    training && probability > 0.0 && rng.gen_bool(probability.min(1.0))
}

/// Applies a replicate decision.
pub fn iir_replicate<'t>(h_as_i: Tensor<'t>, h_as_j: Tensor<'t>, replace: bool) -> Tensor<'t> {
    if replace {
        h_as_j
    } else {
        h_as_i
    }
}

/// `ReLU(h1ᵀ W[m] h2 + V[m]·(h1‖h2) + b[m])` for `m = 1..K`.
pub fn ntn<'t>(h1: &Tensor<'t>, h2: &Tensor<'t>, p: &Ntn<'t>) -> Result<Tensor<'t>> {
    let d = h1.numel();
    let k = p.b.numel();
    if h2.numel() != d || p.w.shape() != vec![d, k * d] {
        return Err(TensorError::Shape { op: "ntn", lhs: h1.shape(), rhs: h2.shape() }.into());
    }
    let h1r = h1.reshape(&[1, d])?;
    let h2r = h2.reshape(&[1, d])?;
    let bilinear = h1r
        .matmul(&p.w)?
        .reshape(&[k, d])?
        .matmul(&h2.reshape(&[d, 1])?)?
        .reshape(&[1, k])?;
    let linear = Tensor::concat(&[h1r, h2r])?.matmul(&p.v)?;
    Ok(bilinear.add(&linear)?.add(&p.b)?.relu())
}

/// Concatenates per-layer interaction vectors in layer order.
pub fn fuse<'t>(parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
    Ok(Tensor::concat(parts)?)
}

/// Per-layer embeddings that feed the interaction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivations {
    pub omega_i: Vec<f64>,
    pub omega_j: Vec<f64>,
    pub alpha: f64,
    pub h_as_i: Vec<f64>,
    pub h_as_j: Vec<f64>,
    pub h_us_i: Vec<f64>,
    pub h_us_j: Vec<f64>,
    pub i_as: Vec<f64>,
    pub i_us: Vec<f64>,
}

/// Detached snapshot of one pair's forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairActivations {
    pub node_embeddings_i: Vec<TensorData>,
    pub node_embeddings_j: Vec<TensorData>,
    pub graph_embeddings_i: Vec<Vec<f64>>,
    pub graph_embeddings_j: Vec<Vec<f64>>,
    pub layers: Vec<LayerActivations>,
    pub replaced: bool,
    pub fused_as: Vec<f64>,
    pub fused_us: Vec<f64>,
    pub ec_as: f64,
    pub ec_us: f64,
    pub sim: f64,
}

/// Differentiable outputs of one pair.
pub struct PairOutput<'t> {
    pub ec_as: Tensor<'t>,
    pub ec_us: Tensor<'t>,
    pub sim: Tensor<'t>,
}

/// Runs the interaction stage and heads from per-layer embeddings.
pub fn heads<'t>(
    p: &Bound<'t>,
    embeddings: &[(Tensor<'t>, Tensor<'t>, Tensor<'t>, Tensor<'t>)],
) -> Result<(PairOutput<'t>, Vec<Tensor<'t>>, Vec<Tensor<'t>>)> {
    let mut i_as = Vec::with_capacity(embeddings.len());
    let mut i_us = Vec::with_capacity(embeddings.len());
    for (l, (as_i, as_j, us_i, us_j)) in embeddings.iter().enumerate() {
        i_as.push(ntn(as_i, as_j, &p.ntn_as[l])?);
        i_us.push(ntn(us_i, us_j, &p.ntn_us[l])?);
    }
    let fused_as = fuse(&i_as)?;
    let fused_us = fuse(&i_us)?;
    let ec_as = p.ec_as.apply(&fused_as)?;
    let ec_us = p.ec_us.apply(&fused_us)?;
    let sim = p.sim.apply(&Tensor::concat(&[fused_as, fused_us])?)?.sigmoid();
    Ok((PairOutput { ec_as, ec_us, sim }, i_as, i_us))
}

/// Full forward pass. `replace` is the intra-instance replicate decision,
/// drawn by the caller with [`iir_draw`].
pub fn forward<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    gi: &EncodedGraph,
    gj: &EncodedGraph,
    replace: bool,
    record: bool,
) -> Result<(PairOutput<'t>, Option<PairActivations>)> {
    let hv_i = encode_nodes(gi, p)?;
    let hv_j = encode_nodes(gj, p)?;
    let mut embeddings = Vec::with_capacity(cfg.layers());
    let mut snapshots = Vec::new();
    let mut hg_snap = (Vec::new(), Vec::new());
    for l in 0..cfg.layers() {
        let (hi, hj) = (&hv_i[l + 1], &hv_j[l + 1]);
        let hg_i = readout(hi, &p.deepsets[l])?;
        let hg_j = readout(hj, &p.deepsets[l])?;
        let (omega_i, omega_j, pooled_i, pooled_j) = if cfg.use_gncm {
            let (oi, pi) = gncm(hi, &hg_j)?;
            let (oj, pj) = gncm(hj, &hg_i)?;
            (Some(oi), Some(oj), pi, pj)
        } else {
            (None, None, hi.sum_rows()?, hj.sum_rows()?)
        };
        let tape_alpha = psgd_alpha(&hg_i, &hg_j, cfg.alpha_map)?;
        let (as_i, us_i, as_j, us_j) = if cfg.use_psgd {
            let (a_i, u_i) = psgd_disentangle(&pooled_i, &tape_alpha, &p.enc_as[l], &p.enc_us[l])?;
            let (a_j, u_j) = psgd_disentangle(&pooled_j, &tape_alpha, &p.enc_as[l], &p.enc_us[l])?;
            (a_i, u_i, a_j, u_j)
        } else {
            (
                p.enc_as[l].apply(&pooled_i)?,
                p.enc_us[l].apply(&pooled_i)?,
                p.enc_as[l].apply(&pooled_j)?,
                p.enc_us[l].apply(&pooled_j)?,
            )
        };
        let as_i_hat = iir_replicate(as_i, as_j, replace);
        if record {
            let ones = |n: usize| vec![1.0; n];
            snapshots.push(LayerActivations {
                omega_i: omega_i.map(|t| t.value()).unwrap_or_else(|| ones(gi.node_count())),
                omega_j: omega_j.map(|t| t.value()).unwrap_or_else(|| ones(gj.node_count())),
                alpha: tape_alpha.item(),
                h_as_i: as_i.value(),
                h_as_j: as_j.value(),
                h_us_i: us_i.value(),
                h_us_j: us_j.value(),
                i_as: Vec::new(),
                i_us: Vec::new(),
            });
            hg_snap.0.push(hg_i.value());
            hg_snap.1.push(hg_j.value());
        }
        embeddings.push((as_i_hat, as_j, us_i, us_j));
    }
    let (out, i_as, i_us) = heads(p, &embeddings)?;
    let acts = if record {
        for (s, (a, u)) in snapshots.iter_mut().zip(i_as.iter().zip(&i_us)) {
            s.i_as = a.value();
            s.i_us = u.value();
        }
        Some(PairActivations {
            node_embeddings_i: hv_i.iter().map(Tensor::data).collect(),
            node_embeddings_j: hv_j.iter().map(Tensor::data).collect(),
            graph_embeddings_i: hg_snap.0,
            graph_embeddings_j: hg_snap.1,
            layers: snapshots,
            replaced: replace,
            fused_as: i_as.iter().flat_map(Tensor::value).collect(),
            fused_us: i_us.iter().flat_map(Tensor::value).collect(),
            ec_as: out.ec_as.item(),
            ec_us: out.ec_us.item(),
            sim: out.sim.item(),
        })
    } else {
        None
    };
    Ok((out, acts))
}

/// `(s - ŝ)² + λ·(êc_as² + (ged - êc_us)²)` for one pair.
pub fn pair_loss<'t>(out: &PairOutput<'t>, ged: f64, sim: f64, lambda: f64) -> Result<Tensor<'t>> {
    let sim_err = out.sim.add_const(-sim);
    let mut loss = sim_err.mul(&sim_err)?;
    if lambda != 0.0 {
        let us_err = out.ec_us.add_const(-ged);
        let cost = out.ec_as.mul(&out.ec_as)?.add(&us_err.mul(&us_err)?)?;
        loss = loss.add(&cost.scale(lambda))?;
    }
    Ok(loss)
}

/// Plain-number version of [`pair_loss`].
pub fn loss_value(sim_pred: f64, ec_as: f64, ec_us: f64, ged: f64, sim: f64, lambda: f64) -> f64 {
    (sim - sim_pred).powi(2) + lambda * (ec_as.powi(2) + (ged - ec_us).powi(2))
}

/// Which embeddings a swap probe exchanges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    /// Feed `(H_as_j, H_as_i)` for the same pair.
    Iis,
    /// Exchange aligned embeddings between two pairs.
    Eisa,
    /// Exchange unaligned embeddings between two pairs.
    Eisu,
}

/// Recomputes the predicted similarity after swapping embeddings.
///
/// For [`SwapMode::Iis`] only `a` is used and the second value repeats the
/// first. Inputs must have been recorded with the same layer count.
pub fn swap_inference(
    cfg: &ModelConfig,
    params: &Parameters,
    a: &PairActivations,
    b: Option<&PairActivations>,
    mode: SwapMode,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let p = Bound::new(&tape, cfg, params, false)?;
    let row = |v: &[f64]| tape.row(v, false);
    let layer_embeddings = |acts: &PairActivations, aligned_from: &PairActivations, unaligned_from: &PairActivations, flip: bool| {
        acts.layers
            .iter()
            .enumerate()
            .map(|(l, _)| {
                let al = &aligned_from.layers[l];
                let ul = &unaligned_from.layers[l];
                let (ai, aj) = if flip { (&al.h_as_j, &al.h_as_i) } else { (&al.h_as_i, &al.h_as_j) };
                (row(ai), row(aj), row(&ul.h_us_i), row(&ul.h_us_j))
            })
            .collect::<Vec<_>>()
    };
    let sim_of = |emb: Vec<_>| -> Result<f64> { Ok(heads(&p, &emb)?.0.sim.item()) };
    if a.layers.len() != cfg.layers() {
        return Err(ModelError::Swap(format!("activations have {} layers, model has {}", a.layers.len(), cfg.layers())));
    }
    match (mode, b) {
        (SwapMode::Iis, _) => {
            let s = sim_of(layer_embeddings(a, a, a, true))?;
            Ok((s, s))
        }
        (_, None) => Err(ModelError::Swap("extra-instance swaps need two pairs".into())),
        (_, Some(b)) if b.layers.len() != a.layers.len() => {
            Err(ModelError::Swap("pairs were recorded with different layer counts".into()))
        }
        (SwapMode::Eisa, Some(b)) => Ok((
            sim_of(layer_embeddings(a, b, a, false))?,
            sim_of(layer_embeddings(b, a, b, false))?,
        )),
        (SwapMode::Eisu, Some(b)) => Ok((
            sim_of(layer_embeddings(a, a, b, false))?,
            sim_of(layer_embeddings(b, b, a, false))?,
        )),
    }
}

/// Trained parameters together with their configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcgSim {
    pub config: ModelConfig,
    pub parameters: Parameters,
}

impl GcgSim {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let parameters = init_parameters(&config)?;
        Ok(Self { config, parameters })
    }

    pub fn encode(&self, g: &Graph) -> Result<EncodedGraph> {
        EncodedGraph::new(g, self.config.label_vocab_size)
    }

    /// Inference-mode forward pass with a full activation snapshot.
    pub fn infer(&self, gi: &EncodedGraph, gj: &EncodedGraph) -> Result<PairActivations> {
        let tape = Tape::new();
        let p = Bound::new(&tape, &self.config, &self.parameters, false)?;
        let (_, acts) = forward(&self.config, &p, gi, gj, false, true)?;
        Ok(acts.expect("recorded"))
    }

    /// Inference-mode similarity for one pair.
    pub fn predict(&self, gi: &EncodedGraph, gj: &EncodedGraph) -> Result<f64> {
        let tape = Tape::new();
        let p = Bound::new(&tape, &self.config, &self.parameters, false)?;
        Ok(forward(&self.config, &p, gi, gj, false, false)?.0.sim.item())
    }

    /// Model file contents: `{config, parameters}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, String> {
        let m: GcgSim = serde_json::from_str(s).map_err(|e| e.to_string())?;
        m.config.validate().map_err(|e| e.to_string())?;
        check_parameters(&m.config, &m.parameters).map_err(|e| e.to_string())?;
        Ok(m)
    }
}
