//! Tensor-level reverse-mode differentiation.
//!
//! Every node holds a real array. Complex quantities travel as a pair of real
//! nodes ([`CVar`]), so complex parameters get independent adjoints for their
//! real and imaginary parts. Fused kernels from other modules plug in through
//! [`Primitive`].

use std::collections::HashMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{gemm, NumericsError, RealTensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {node} refers to input {input} that does not precede it")]
    NotTopological { node: usize, input: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: index {index} out of range for {len} rows")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Real and imaginary halves of a complex activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: RealTensor,
    pub grad: RealTensor,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

/// Flat registry of named parameters. Complex parameters are stored as two
/// entries suffixed `.re` and `.im`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name: every parameter is
    /// registered exactly once.
    pub fn add(&mut self, name: impl Into<String>, value: RealTensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "parameter {name} registered twice");
        let id = ParamId(self.params.len());
        let grad = RealTensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, trainable: true, decay });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// A fused differentiable kernel. `backward` returns one optional adjoint
/// buffer per input, each the length of that input.
pub trait Primitive: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&RealTensor], output: &RealTensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MulColBcast(Var, Var),
    MatMul { a: Var, b: Var, b_transposed: bool },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Var, Var),
    Half { x: Var, second: bool },
    Relu(Var),
    Sigmoid(Var),
    Modulus(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Sum(Var),
    Custom { prim: Box<dyn Primitive>, inputs: Vec<Var> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowBias(a, b) | MulColBcast(a, b) | ConcatCols(a, b) | Modulus(a, b) => {
                vec![*a, *b]
            }
            MatMul { a, b, .. } => vec![*a, *b],
            Scale(a, _) | Relu(a) | Sigmoid(a) | Sum(a) => vec![*a],
            Gather { table, .. } => vec![*table],
            Half { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: RealTensor,
    op: Op,
}

/// Append-only record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Adjoints for every node after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &RealTensor, b: &RealTensor) -> AutodiffError {
    AutodiffError::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: RealTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same
    /// parameter return the same node, so tied weights share one adjoint.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn cparam(&mut self, store: &ParamStore, re: ParamId, im: ParamId) -> CVar {
        CVar { re: self.param(store, re), im: self.param(store, im) }
    }

    pub fn custom(&mut self, prim: Box<dyn Primitive>, inputs: &[Var], value: RealTensor) -> Var {
        self.push(value, Op::Custom { prim, inputs: inputs.to_vec() })
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<RealTensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Ok(RealTensor::new(x.shape(), data)?)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> RealTensor {
        let x = self.value(a);
        RealTensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `x[r, c] + bias[c]`
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (rows, cols) = xv.dims2();
        if bv.len() != cols {
            return Err(shape_err("add_row_bias", xv, bv));
        }
        let mut out = xv.clone();
        for r in 0..rows {
            add_into(&mut out.data_mut()[r * cols..(r + 1) * cols], bv.data());
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// `x[r, c] * s[r]`
    pub fn mul_col_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (rows, cols) = xv.dims2();
        if sv.len() != rows {
            return Err(shape_err("mul_col_bcast", xv, sv));
        }
        let mut out = xv.clone();
        for r in 0..rows {
            let f = sv.data()[r];
            out.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(out, Op::MulColBcast(x, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`, with `b` stored untransposed.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (br, bc) = bv.dims2();
        let (k2, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = RealTensor::zeros(&[m, n]);
        gemm(m, k, n, av.data(), false, bv.data(), b_transposed, 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMul { a, b, b_transposed }))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::Index { op: "gather", index: id, len: rows });
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = RealTensor::new(&[ids.len(), cols], out)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.dims2();
        let (rb, cb) = bv.dims2();
        if ra != rb {
            return Err(shape_err("concat_cols", av, bv));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let out = RealTensor::new(&[ra, ca + cb], out)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// First or second half of the rows of `x`; used to split fused complex
    /// outputs stacked as `[re; im]`.
    pub fn half(&mut self, x: Var, second: bool) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let h = rows / 2;
        let start = if second { h * cols } else { 0 };
        let out = RealTensor::new(&[h, cols], xv.data()[start..start + h * cols].to_vec()).expect("half");
        self.push(out, Op::Half { x, second })
    }

    pub fn split_complex(&mut self, stacked: Var) -> CVar {
        CVar { re: self.half(stacked, false), im: self.half(stacked, true) }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `sqrt(re^2 + im^2)` with a zero adjoint at the origin.
    pub fn modulus(&mut self, re: Var, im: Var) -> Result<Var> {
        let v = self.zip_same("modulus", re, im, f64::hypot)?;
        Ok(self.push(v, Op::Modulus(re, im)))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = xv.dims2();
        if gv.len() != cols || bv.len() != cols {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = RealTensor::new(xv.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Weighted mean token cross-entropy (nats). Rows with weight 0 are
    /// ignored; the result is divided by the total weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.dims2();
        if targets.len() != rows || weights.len() != rows {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let total: f64 = weights.iter().sum();
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let t = targets[r];
            if t >= classes {
                return Err(AutodiffError::Index { op: "cross_entropy", index: t, len: classes });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..classes {
                let e = (row[c] - max).exp();
                probs[r * classes + c] = e;
                z += e;
            }
            probs[r * classes..(r + 1) * classes].iter_mut().for_each(|p| *p /= z);
            if weights[r] != 0.0 {
                loss += weights[r] * (z.ln() + max - row[t]);
            }
        }
        let value = if total > 0.0 { loss / total } else { 0.0 };
        let out = RealTensor::scalar(value);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(RealTensor::scalar(s), Op::Sum(a))
    }

    /// Reverse sweep from a scalar loss. Each node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(AutodiffError::NotTopological { node: i, input: input.0 });
                }
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter adjoints into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = grads.get(v) {
                add_into(store.get_mut(id).grad.data_mut(), g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len_of(v)]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let cols = self.value(*b).len();
                acc(*b, &mut |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulColBcast(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let cols = xv.dims2().1;
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let f = sv.data()[r];
                        drow.iter_mut().zip(grow).for_each(|(a, b)| *a += f * b);
                    }
                });
                acc(*s, &mut |d| {
                    for (r, (xrow, grow)) in xv.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                        d[r] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = node.value.dims2().1;
                // dA = dC * op(B)^T
                acc(*a, &mut |d| gemm(m, n, k, g, false, bv.data(), !*b_transposed, 1.0, d));
                if *b_transposed {
                    // B is n x k: dB = dC^T * A
                    acc(*b, &mut |d| gemm(n, m, k, g, true, av.data(), false, 1.0, d));
                } else {
                    // dB = A^T * dC
                    acc(*b, &mut |d| gemm(k, m, n, av.data(), true, g, false, 1.0, d));
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.value(*table).dims2().1;
                acc(*table, &mut |d| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * cols..(id + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).dims2().1;
                let cb = self.value(*b).dims2().1;
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        add_into(drow, &grow[..ca]);
                    }
                });
                acc(*b, &mut |d| {
                    for (drow, grow) in d.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        add_into(drow, &grow[ca..]);
                    }
                });
            }
            Op::Half { x, second } => {
                let h = g.len();
                let start = if *second { h } else { 0 };
                acc(*x, &mut |d| add_into(&mut d[start..start + h], g));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Modulus(re, im) => {
                let (rv, iv, m) = (self.value(*re).data(), self.value(*im).data(), node.value.data());
                acc(*re, &mut |d| {
                    for i in 0..d.len() {
                        if m[i] > 0.0 {
                            d[i] += g[i] * rv[i] / m[i];
                        }
                    }
                });
                acc(*im, &mut |d| {
                    for i in 0..d.len() {
                        if m[i] > 0.0 {
                            d[i] += g[i] * iv[i] / m[i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let cols = gv.len();
                acc(*x, &mut |d| {
                    for (r, s) in rstd.iter().enumerate() {
                        let off = r * cols;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g[off + c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[off + c];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        for c in 0..cols {
                            let dh = g[off + c] * gv[c];
                            d[off + c] += s * (dh - mean_dh - xhat[off + c] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            d[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(cols) {
                        add_into(d, grow);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    return;
                }
                let classes = self.value(*logits).dims2().1;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let f = g[0] * w / total;
                        let off = r * classes;
                        for c in 0..classes {
                            d[off + c] += f * probs[off + c];
                        }
                        d[off + t] -= f;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Custom { prim, inputs } => {
                let values: Vec<&RealTensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let in_grads = prim.backward(&values, &node.value, g);
                for (v, ig) in inputs.iter().zip(in_grads) {
                    if let Some(ig) = ig {
                        acc(*v, &mut |d| add_into(d, &ig));
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares tape adjoints against central differences on up to
/// `max_coords` coordinates per trainable parameter, sampled under `seed`.
/// Error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, max_coords: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::BadStep(eps));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite("loss".into()));
        }
        Ok(v)
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0, coords_checked: 0 };
    for pi in 0..store.params.len() {
        if !store.params[pi].trainable {
            continue;
        }
        let n = store.params[pi].value.len();
        let coords: Vec<usize> =
            if n <= max_coords { (0..n).collect() } else { sample(&mut rng, n, max_coords).into_vec() };
        for idx in coords {
            let orig = store.params[pi].value.data()[idx];
            store.params[pi].value.data_mut()[idx] = orig + eps;
            let plus = eval(store);
            store.params[pi].value.data_mut()[idx] = orig - eps;
            let minus = eval(store);
            store.params[pi].value.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi][idx];
            if !a.is_finite() {
                return Err(AutodiffError::NonFinite(format!("{}[{idx}] adjoint", store.params[pi].name)));
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if report.worst_param.is_empty() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.params[pi].name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> RealTensor {
        RealTensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[3], &[1.0, 2.0, 3.0]), false);
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[2], &[0.5, -1.5]), false);
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward_into(loss, &mut store).unwrap();
        let once = store.get(p).grad.data().to_vec();
        tape.backward_into(loss, &mut store).unwrap();
        let twice = store.get(p).grad.data();
        assert_eq!(twice, &[2.0 * once[0], 2.0 * once[1]]);
    }

    #[test]
    fn complex_self_product_gradient() {
        // loss = Re(z * conj(z)) = a^2 + b^2
        let (a, b) = (1.25, -0.75);
        let mut store = ParamStore::new();
        let re = store.add("z.re", t(&[1], &[a]), false);
        let im = store.add("z.im", t(&[1], &[b]), false);
        let mut tape = Tape::new();
        let z = tape.cparam(&store, re, im);
        let rr = tape.mul(z.re, z.re).unwrap();
        let ii = tape.mul(z.im, z.im).unwrap();
        let s = tape.add(rr, ii).unwrap();
        let loss = tape.sum(s);
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(re).grad.data()[0], 2.0 * a);
        assert_eq!(store.get(im).grad.data()[0], 2.0 * b);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn step_bounds_enforced() {
        let mut store = ParamStore::new();
        store.add("p", t(&[1], &[1.0]), false);
        let err = grad_check(&mut store, 1e-2, 8, 0, |tape, s| {
            let v = tape.param(s, s.id("p").unwrap());
            Ok(tape.sum(v))
        });
        assert!(matches!(err, Err(AutodiffError::BadStep(_))));
    }

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParamStore::new();
        store.add("w", t(&[3, 2], &[0.3, -0.2, 0.1, 0.7, -0.5, 0.4]), true);
        store.add("x", t(&[2, 3], &[1.0, 2.0, -1.0, 0.5, 0.25, 3.0]), false);
        let rep = grad_check(&mut store, 1e-5, 64, 1, |tape, s| {
            let w = tape.param(s, s.id("w").unwrap());
            let x = tape.param(s, s.id("x").unwrap());
            let y = tape.matmul(x, w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-10, "{rep:?}");
    }

    #[test]
    fn primitive_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let vals: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0 + 0.013).collect();
        store.add("a", t(&[3, 4], &vals), true);
        store.add("b", t(&[3, 4], &vals.iter().rev().map(|v| v * 0.7 + 0.1).collect::<Vec<_>>()), true);
        store.add("w", t(&[4, 5], &(0..20).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect::<Vec<_>>()), true);
        store.add("bias", t(&[4], &[0.1, -0.2, 0.3, 0.05]), false);
        store.add("gain", t(&[4], &[1.1, 0.9, 1.2, 0.8]), false);
        store.add("table", t(&[5, 4], &(0..20).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()), true);
        store.add("w2", t(&[8, 4], &(0..32).map(|i| (i as f64 * 0.61).cos() * 0.4).collect::<Vec<_>>()), true);
        store.add("stack", t(&[6, 4], &(0..24).map(|i| (i as f64 * 0.29).sin()).collect::<Vec<_>>()), true);
        let rep = grad_check(&mut store, 1e-5, 64, 2, |tape, s| {
            let a = tape.param(s, s.id("a").unwrap());
            let b = tape.param(s, s.id("b").unwrap());
            let w = tape.param(s, s.id("w").unwrap());
            let bias = tape.param(s, s.id("bias").unwrap());
            let gain = tape.param(s, s.id("gain").unwrap());
            let table = tape.param(s, s.id("table").unwrap());
            let x = tape.mul(a, b)?;
            let x = tape.sub(x, a)?;
            let x = tape.add_row_bias(x, bias)?;
            let x = tape.layer_norm(x, gain, bias, 1e-5)?;
            let m = tape.modulus(x, b)?;
            let sg = tape.sigmoid(m);
            let cat = tape.concat_cols(sg, a)?;
            let w2 = tape.param(s, s.id("w2").unwrap());
            let c2 = tape.matmul(cat, w2)?;
            let stack = tape.param(s, s.id("stack").unwrap());
            let h = tape.half(stack, true);
            let h = tape.add(h, c2)?;
            let y = tape.matmul(x, w)?;
            let rows = tape.gather(table, &[4, 0, 4])?;
            let z = tape.matmul_bt(y, w)?;
            let z = tape.add(z, rows)?;
            let scale_col = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
            let z = tape.mul_col_bcast(z, scale_col)?;
            let z = tape.add(z, h)?;
            let r = tape.relu(z);
            let r = tape.scale(r, 1.5);
            let mix = tape.add(r, x)?;
            let loss = tape.cross_entropy(mix, &[0, 3, 2], &[1.0, 0.0, 2.0])?;
            let extra = tape.sum(sg);
            tape.add(loss, extra)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.constant(RealTensor::zeros(&[3, 2]));
        assert!(matches!(tape.gather(table, &[3]), Err(AutodiffError::Index { .. })));
    }
}
