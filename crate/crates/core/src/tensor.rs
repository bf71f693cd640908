//! Dense `f64` tensors with eager, tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tensor::backward`]
//! walks the tape in reverse and accumulates gradients into leaves created
//! with `requires_grad`. A tape is single-threaded; build one per forward
//! pass (or per mini-batch) and drop it afterwards.
//!
//! Most operations expect rank-2 tensors. Vectors are `[1, d]` rows and
//! scalars are `[1, 1]`. Broadcasting is limited to adding a `[1, n]` row to
//! every row of an `[m, n]` matrix and to [`Tensor::scalar_mul`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a cosine similarity is defined as zero.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
}

/// A named snapshot of tensor data, detached from any tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Parameter serialization: name → `{shape, values}`.
pub type NamedTensors = BTreeMap<String, TensorData>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    SumRows(usize),
    SumAll(usize),
    Concat(Vec<usize>),
    Transpose(usize),
    SliceRows(usize, usize),
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    L2Norm(usize),
    Dot(usize, usize),
    Cosine(usize, usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, data: &TensorData) -> Tensor<'_> {
        self.push(data.shape.clone(), data.values.clone(), Op::Leaf, true)
    }

    /// A leaf without gradient tracking.
    pub fn constant(&self, data: &TensorData) -> Tensor<'_> {
        self.push(data.shape.clone(), data.values.clone(), Op::Leaf, false)
    }

    pub fn leaf(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor<'_>> {
        let data = TensorData::new(shape.to_vec(), values)?;
        Ok(self.push(data.shape, data.values, Op::Leaf, requires_grad))
    }

    pub fn row(&self, values: &[f64], requires_grad: bool) -> Tensor<'_> {
        self.push(vec![1, values.len()], values.to_vec(), Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, value: f64, requires_grad: bool) -> Tensor<'_> {
        self.push(vec![1, 1], vec![value], Op::Leaf, requires_grad)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_> {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; n], Op::Leaf, false)
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Tensor { tape: self, id: nodes.len() - 1 }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_abt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot_slices(grow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_atb_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dot product with four independent accumulators.
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<'t> Tensor<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn data(&self) -> TensorData {
        let nodes = self.tape.nodes.borrow();
        TensorData { shape: nodes[self.id].shape.clone(), values: nodes[self.id].value.clone() }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "item() on a non-scalar tensor");
        nodes[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn with<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id])
    }

    fn same_tape(&self, other: &Tensor<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "tensors belong to different tapes");
    }

    fn record(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize]) -> Tensor<'t> {
        let rg = self.tape.needs_grad(inputs);
        self.tape.push(shape, value, op, rg)
    }

    pub fn matmul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        let ((m, k), (k2, n)) = match (dims2(&sa), dims2(&sb)) {
            (Some(a), Some(b)) if a.1 == b.0 => (a, b),
            _ => return shape_err("matmul", &sa, &sb),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm_acc(&nodes[self.id].value, &nodes[other.id].value, &mut out, m, k, n);
        }
        Ok(self.record(vec![m, n], out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise sum of equal shapes, or `[m, n] + [1, n]` row broadcast.
    pub fn add(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            let out = self.zip_values(other, |x, y| x + y);
            return Ok(self.record(sa, out, Op::Add(self.id, other.id), &[self.id, other.id]));
        }
        match (dims2(&sa), dims2(&sb)) {
            (Some((m, n)), Some((1, n2))) if n == n2 => {
                let out = {
                    let nodes = self.tape.nodes.borrow();
                    let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
                    (0..m * n).map(|i| a[i] + b[i % n]).collect()
                };
                Ok(self.record(sa, out, Op::AddRow(self.id, other.id), &[self.id, other.id]))
            }
            _ => shape_err("add", &sa, &sb),
        }
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return shape_err("sub", &sa, &sb);
        }
        let out = self.zip_values(other, |x, y| x - y);
        Ok(self.record(sa, out, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return shape_err("mul", &sa, &sb);
        }
        let out = self.zip_values(other, |x, y| x * y);
        Ok(self.record(sa, out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scalar_mul(&self, scalar: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(scalar);
        if scalar.numel() != 1 {
            return shape_err("scalar_mul", &self.shape(), &scalar.shape());
        }
        let s = scalar.item();
        let out = self.with(|n| n.value.iter().map(|x| x * s).collect());
        Ok(self.record(self.shape(), out, Op::ScalarMul(self.id, scalar.id), &[self.id, scalar.id]))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Tensor<'t> {
        let out = self.with(|n| n.value.iter().map(|x| x * c).collect());
        self.record(self.shape(), out, Op::Scale(self.id, c), &[self.id])
    }

    /// Adds a constant to every element.
    pub fn add_const(&self, c: f64) -> Tensor<'t> {
        let out = self.with(|n| n.value.iter().map(|x| x + c).collect());
        self.record(self.shape(), out, Op::AddConst(self.id), &[self.id])
    }

    pub fn relu(&self) -> Tensor<'t> {
        let out = self.with(|n| n.value.iter().map(|&x| x.max(0.0)).collect());
        self.record(self.shape(), out, Op::Relu(self.id), &[self.id])
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        let out = self.with(|n| n.value.iter().map(|&x| sigmoid(x)).collect());
        self.record(self.shape(), out, Op::Sigmoid(self.id), &[self.id])
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the interval
    /// (endpoints included).
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<'t> {
        let out = self.with(|n| n.value.iter().map(|&x| x.clamp(lo, hi)).collect());
        self.record(self.shape(), out, Op::Clamp(self.id, lo, hi), &[self.id])
    }

    /// Column sums: `[m, n] -> [1, n]`.
    pub fn sum_rows(&self) -> Result<Tensor<'t>> {
        let s = self.shape();
        let (m, n) = dims2(&s).ok_or_else(|| TensorError::Invalid(format!("sum_rows needs rank 2, got {s:?}")))?;
        let out = self.with(|node| {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, v) in out.iter_mut().zip(&node.value[i * n..(i + 1) * n]) {
                    *o += v;
                }
            }
            out
        });
        Ok(self.record(vec![1, n], out, Op::SumRows(self.id), &[self.id]))
    }

    pub fn sum_all(&self) -> Tensor<'t> {
        let s = self.with(|n| n.value.iter().sum());
        self.record(vec![1, 1], vec![s], Op::SumAll(self.id), &[self.id])
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let tape = first.tape;
        let nodes = tape.nodes.borrow();
        let s0 = &nodes[first.id].shape;
        let (m, _) = dims2(s0).ok_or_else(|| TensorError::Invalid(format!("concat needs rank 2, got {s0:?}")))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p);
            let s = &nodes[p.id].shape;
            match dims2(s) {
                Some((r, c)) if r == m => widths.push(c),
                _ => return shape_err("concat", s0, s),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&nodes[p.id].value[i * w..(i + 1) * w]);
            }
        }
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.record(vec![m, total], out, Op::Concat(ids.clone()), &ids))
    }

    pub fn transpose(&self) -> Result<Tensor<'t>> {
        let s = self.shape();
        let (m, n) = dims2(&s).ok_or_else(|| TensorError::Invalid(format!("transpose needs rank 2, got {s:?}")))?;
        let out = self.with(|node| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = node.value[i * n + j];
                }
            }
            out
        });
        Ok(self.record(vec![n, m], out, Op::Transpose(self.id), &[self.id]))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<'t>> {
        let s = self.shape();
        let (m, n) = dims2(&s).ok_or_else(|| TensorError::Invalid(format!("slice_rows needs rank 2, got {s:?}")))?;
        if start >= end || end > m {
            return Err(TensorError::Invalid(format!("row range {start}..{end} invalid for {s:?}")));
        }
        let out = self.with(|node| node.value[start * n..end * n].to_vec());
        Ok(self.record(vec![end - start, n], out, Op::SliceRows(self.id, start), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", &self.shape(), shape);
        }
        let out = self.value();
        Ok(self.record(shape.to_vec(), out, Op::Reshape(self.id), &[self.id]))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<'t>> {
        let s = self.shape();
        let (m, n) = dims2(&s).ok_or_else(|| TensorError::Invalid(format!("gather_rows needs rank 2, got {s:?}")))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(TensorError::Invalid(format!("row {bad} out of range for {s:?}")));
        }
        if index.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no indices".into()));
        }
        let out = self.with(|node| {
            let mut out = Vec::with_capacity(index.len() * n);
            for &i in index {
                out.extend_from_slice(&node.value[i * n..(i + 1) * n]);
            }
            out
        });
        Ok(self.record(vec![index.len(), n], out, Op::GatherRows(self.id, index.to_vec()), &[self.id]))
    }

    /// Sums row `r` of `self` into output row `index[r]`; output has `rows` rows.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Result<Tensor<'t>> {
        let s = self.shape();
        let (m, n) = dims2(&s).ok_or_else(|| TensorError::Invalid(format!("scatter_add_rows needs rank 2, got {s:?}")))?;
        if index.len() != m || index.iter().any(|&i| i >= rows) || rows == 0 {
            return Err(TensorError::Invalid(format!(
                "scatter index of length {} into {rows} rows invalid for {s:?}",
                index.len()
            )));
        }
        let out = self.with(|node| {
            let mut out = vec![0.0; rows * n];
            for (r, &i) in index.iter().enumerate() {
                for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&node.value[r * n..(r + 1) * n]) {
                    *o += v;
                }
            }
            out
        });
        Ok(self.record(vec![rows, n], out, Op::ScatterAddRows(self.id, index.to_vec()), &[self.id]))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&self) -> Tensor<'t> {
        let v = self.with(|n| dot_slices(&n.value, &n.value).sqrt());
        self.record(vec![1, 1], vec![v], Op::L2Norm(self.id), &[self.id])
    }

    /// Inner product of two tensors with the same number of elements.
    pub fn dot(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other);
        if self.numel() != other.numel() {
            return shape_err("dot", &self.shape(), &other.shape());
        }
        let v = {
            let nodes = self.tape.nodes.borrow();
            dot_slices(&nodes[self.id].value, &nodes[other.id].value)
        };
        Ok(self.record(vec![1, 1], vec![v], Op::Dot(self.id, other.id), &[self.id, other.id]))
    }

    /// Cosine similarity, defined as 0 when either norm is below
    /// [`COSINE_EPS`]. Equal inputs give exactly 1.
    pub fn cosine_similarity(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(other);
        if self.numel() != other.numel() {
            return shape_err("cosine_similarity", &self.shape(), &other.shape());
        }
        let v = {
            let nodes = self.tape.nodes.borrow();
            cosine_parts(&nodes[self.id].value, &nodes[other.id].value).0
        };
        Ok(self.record(vec![1, 1], vec![v], Op::Cosine(self.id, other.id), &[self.id, other.id]))
    }

    fn zip_values(&self, other: &Tensor<'t>, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.iter().zip(&nodes[other.id].value).map(|(&a, &b)| f(a, b)).collect()
    }

    /// Back-propagates from this one-element tensor, accumulating into the
    /// `grad` of every reachable leaf that requires it.
    pub fn backward(&self) -> Result<()> {
        let mut nodes = self.tape.nodes.borrow_mut();
        if nodes[self.id].value.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[self.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                match &mut nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

/// `(cos, dot, |a|, |b|)`; cos computed as `dot / sqrt(|a|²·|b|²)` so that
/// identical inputs yield exactly one.
fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let d = dot_slices(a, b);
    let na2 = dot_slices(a, a);
    let nb2 = dot_slices(b, b);
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    if na < COSINE_EPS || nb < COSINE_EPS {
        return (0.0, d, na, nb);
    }
    ((d / (na2 * nb2).sqrt()).clamp(-1.0, 1.0), d, na, nb)
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(&nodes[*a].shape).unwrap();
            let n = node.shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm_abt_acc(g, &nodes[*b].value, ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm_atb_acc(&nodes[*a].value, g, gb, m, k, n);
            }
        }
        Op::Add(a, b) => {
            for x in [a, b] {
                if let Some(gx) = acc(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let n = gb.len();
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
        }
        Op::ScalarMul(a, s) => {
            let sv = nodes[*s].value[0];
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * sv);
            }
            let contribution = dot_slices(g, &nodes[*a].value);
            if let Some(gs) = acc(grads, nodes, *s) {
                gs[0] += contribution;
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * c);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if va[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let va = &nodes[*a].value;
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if va[i] >= *lo && va[i] <= *hi {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::SumRows(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let n = g.len();
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[i % n];
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Concat(ids) => {
            let m = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &p in ids {
                let w = nodes[p].shape[1];
                if let Some(gp) = acc(grads, nodes, p) {
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(&nodes[*a].shape).unwrap();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::SliceRows(a, start) => {
            let n = node.shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                let off = start * n;
                for (i, v) in g.iter().enumerate() {
                    ga[off + i] += v;
                }
            }
        }
        Op::GatherRows(a, index) => {
            let n = node.shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..n {
                        ga[i * n + j] += g[r * n + j];
                    }
                }
            }
        }
        Op::ScatterAddRows(a, index) => {
            let n = node.shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..n {
                        ga[r * n + j] += g[i * n + j];
                    }
                }
            }
        }
        Op::L2Norm(a) => {
            let norm = node.value[0];
            if norm > 0.0 {
                let va = &nodes[*a].value;
                if let Some(ga) = acc(grads, nodes, *a) {
                    for i in 0..va.len() {
                        ga[i] += g[0] * va[i] / norm;
                    }
                }
            }
        }
        Op::Dot(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..va.len() {
                    ga[i] += g[0] * vb[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..vb.len() {
                    gb[i] += g[0] * va[i];
                }
            }
        }
        Op::Cosine(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (c, _, na, nb) = cosine_parts(va, vb);
            if na < COSINE_EPS || nb < COSINE_EPS {
                return;
            }
            // d cos / da = b / (|a||b|) - cos * a / |a|²
            let inv = 1.0 / (na * nb);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..va.len() {
                    ga[i] += g[0] * (vb[i] * inv - c * va[i] / (na * na));
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..vb.len() {
                    gb[i] += g[0] * (va[i] * inv - c * vb[i] / (nb * nb));
                }
            }
        }
    }
}
