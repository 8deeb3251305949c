//! Reverse-mode differentiation over a linear operation record.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Operations append a node and return a [`Var`] handle; [`Tape::backward`]
//! walks the record in reverse and returns [`Gradients`] for every node that
//! depends on a `requires_grad` leaf. Nothing is recomputed and nothing is
//! shared between tapes, so replay is deterministic by construction.
//!
//! Every operation validates shapes and rejects non-finite results, so a NaN
//! surfaces at the operation that produced it.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,

    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm { h: Var, gamma: Var, beta: Var },
    Conv1d { h: Var, kernel: Var, geo: ConvGeometry },
    MeanRows(Var),
    L2NormalizeRows(Var),
    Sum(Var),
    Reshape(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SelectRows { a: Var, rows: Vec<usize> },
    Gather { a: Var, idx: Vec<usize> },
    WeightedSum { weights: Var, inputs: Vec<Var> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    // Saved forward state for ops whose backward needs it (layer norm
    // xhat/rstd, l2 norms).
    aux: Vec<f64>,
    aux2: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradient buffers produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated")
    }

    fn push(&mut self, op_name: &str, shape: Vec<usize>, value: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
            aux: Vec::new(),
            aux2: Vec::new(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
            .expect("tensor values are finite")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
            .expect("tensor values are finite")
    }

    /// Leaf for a stored parameter; repeated calls on one tape share a node
    /// so gradients from every use accumulate there.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self
            .push("param", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
            .expect("parameter values are finite");
        self.params.insert(id, v);
        v
    }

    pub fn param_by_path(&mut self, store: &ParamStore, path: &str) -> Result<Var> {
        let id = store
            .id(path)
            .ok_or_else(|| Error::Config(format!("unknown parameter {path}")))?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(&[a]);
        self.push("transpose", vec![c, r], out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(name, self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(a));
        if self.value(b).len() != cols {
            return Err(Error::shape(
                name,
                format!("row vector {:?} against {:?}", self.shape(b), self.shape(a)),
            ));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| f(*x, *y)))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(name, self.shape(a).to_vec(), out, op, rg)
    }

    /// `a[.., n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, Op::AddRow(a, b), |x, y| x + y)
    }

    /// `a[.., n] ⊙ b[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, b, Op::MulRow(a, b), |x, y| x * y)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(name, self.shape(a).to_vec(), out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    /// `s · a` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", format!("scale has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let rg = self.rg(&[a, s]);
        self.push("mul_scalar", self.shape(a).to_vec(), out, Op::MulScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::Degenerate {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), kernels::gelu)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(a));
        let out = kernels::softmax_rows(self.value(a), cols);
        let rg = self.rg(&[a]);
        self.push("softmax", self.shape(a).to_vec(), out, Op::SoftmaxRows(a), rg)
    }

    /// Log-sum-exp over the last axis; `[.., n] -> [rows]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rows_of(self.shape(a));
        let out = kernels::log_sum_exp_rows(self.value(a), cols);
        let rg = self.rg(&[a]);
        self.push("log_sum_exp", vec![rows], out, Op::LogSumExpRows(a), rg)
    }

    /// Normalizes every position over the last axis:
    /// `(h - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&mut self, h: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let (_, dim) = rows_of(self.shape(h));
        if self.value(gamma).len() != dim || self.value(beta).len() != dim {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "feature dim {dim} vs gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (out, xhat, rstd) =
            kernels::layer_norm(self.value(h), self.value(gamma), self.value(beta), dim, eps)
                .ok_or(Error::Degenerate {
                    op: "layer_norm",
                    detail: "zero variance with eps = 0".into(),
                })?;
        let rg = self.rg(&[h, gamma, beta]);
        let v = self.push("layer_norm", self.shape(h).to_vec(), out, Op::LayerNorm { h, gamma, beta }, rg)?;
        self.nodes[v.0].aux = xhat;
        self.nodes[v.0].aux2 = rstd;
        Ok(v)
    }

    /// Grouped 1-D convolution with zero "same" padding:
    /// `h[T × C_in]`, `kernel[C_out × C_in/G × k]` -> `[T × C_out]`.
    pub fn conv1d_grouped(&mut self, h: Var, kernel: Var, groups: usize) -> Result<Var> {
        let geo = conv_geometry(self.shape(h), self.shape(kernel), groups)?;
        let out = kernels::conv1d_grouped(self.value(h), self.value(kernel), geo);
        let rg = self.rg(&[h, kernel]);
        self.push("conv1d_grouped", vec![geo.time, geo.c_out], out, Op::Conv1d { h, kernel, geo }, rg)
    }

    /// Mean over rows: `[T × D] -> [D]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rows_of(self.shape(a));
        let mut out = vec![0.0; cols];
        for row in self.value(a).chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        let rg = self.rg(&[a]);
        self.push("mean_rows", vec![cols], out, Op::MeanRows(a), rg)
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(a));
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: "zero-norm row".into(),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let rg = self.rg(&[a]);
        let v = self.push("l2_normalize", self.shape(a).to_vec(), out, Op::L2NormalizeRows(a), rg)?;
        self.nodes[v.0].aux = norms;
        Ok(v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a), rg)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::shape("slice_cols", format!("{s:?} [{start}..{}]", start + len)));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        debug_assert_eq!(rows * len, self.value(a).len() / cols * len);
        self.push("slice_cols", vec![rows, len], out, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[0],
            _ => return Err(Error::shape("concat_cols", "needs at least one 2-D input")),
        };
        if parts.iter().any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Stacks equal-sized inputs as the rows of a `[m × n]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.value(p).len(),
            None => return Err(Error::shape("stack_rows", "no inputs")),
        };
        if parts.iter().any(|&p| self.value(p).len() != n) {
            return Err(Error::shape("stack_rows", "inputs differ in size"));
        }
        let mut out = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push("stack_rows", vec![parts.len(), n], out, Op::StackRows(parts.to_vec()), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rows_of(self.shape(a));
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("select_rows", format!("rows {rows:?} of {m}")));
        }
        let v = self.value(a);
        let out = rows.iter().flat_map(|&r| v[r * n..(r + 1) * n].iter().copied()).collect();
        let rg = self.rg(&[a]);
        self.push("select_rows", vec![rows.len(), n], out, Op::SelectRows { a, rows: rows.to_vec() }, rg)
    }

    /// Picks flat (row-major) elements into a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let len = self.value(a).len();
        if idx.is_empty() || idx.iter().any(|&i| i >= len) {
            return Err(Error::shape("gather", format!("indices out of range for {len} values")));
        }
        let v = self.value(a);
        let out = idx.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[a]);
        self.push("gather", vec![idx.len()], out, Op::Gather { a, idx: idx.to_vec() }, rg)
    }

    /// `Σ_l weights[l] · inputs[l]` over same-shaped inputs.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() || self.value(weights).len() != inputs.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} inputs", self.value(weights).len(), inputs.len()),
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        if inputs.iter().any(|&i| self.shape(i) != shape.as_slice()) {
            return Err(Error::shape("weighted_sum", "inputs differ in shape"));
        }
        let mut out = vec![0.0; self.value(inputs[0]).len()];
        for (l, &inp) in inputs.iter().enumerate() {
            let w = self.value(weights)[l];
            for (o, v) in out.iter_mut().zip(self.value(inp)) {
                *o += w * v;
            }
        }
        let mut all = inputs.to_vec();
        all.push(weights);
        let rg = self.rg(&all);
        self.push(
            "weighted_sum",
            shape,
            out,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Reverse accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the gradient of every trainable
    /// parameter leaf into its `grad` buffer in `store`. Calling this twice
    /// without [`ParamStore::zero_grad`] accumulates.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        let mut ids: Vec<(ParamId, Var)> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        ids.sort_unstable_by_key(|(id, _)| id.index());
        for (id, v) in ids {
            if let Some(g) = grads.wrt(v) {
                if store.get(id).requires_grad() {
                    store.get_mut(id).accumulate_grad(g)?;
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        // Borrow helper: grad buffer for an input, allocated on demand, or
        // None when that input does not need a gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut ga = self.nodes[a.0].requires_grad.then(|| vec![0.0; av.len()]);
                let mut gb = self.nodes[b.0].requires_grad.then(|| vec![0.0; bv.len()]);
                kernels::matmul_backward(av, bv, g, m, k, n, ga.as_deref_mut(), gb.as_deref_mut());
                add_into(buf!(*a), ga.as_deref());
                add_into(buf!(*b), gb.as_deref());
            }
            Op::Transpose(a) => {
                let s = &self.nodes[a.0].shape;
                let gt = kernels::transpose(g, s[1], s[0]);
                add_into(buf!(*a), Some(&gt));
            }
            Op::Add(a, b) => {
                add_into(buf!(*a), Some(g));
                add_into(buf!(*b), Some(g));
            }
            Op::Sub(a, b) => {
                add_into(buf!(*a), Some(g));
                if let Some(db) = buf!(*b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(da) = buf!(*a) {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = buf!(*b) {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddRow(a, b) => {
                add_into(buf!(*a), Some(g));
                if let Some(db) = buf!(*b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MulRow(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let n = bv.len();
                if let Some(da) = buf!(*a) {
                    for (drow, grow) in da.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(bv) {
                            *d += gv * y;
                        }
                    }
                }
                if let Some(db) = buf!(*b) {
                    for (arow, grow) in av.chunks(n).zip(g.chunks(n)) {
                        for ((d, gv), x) in db.iter_mut().zip(grow).zip(arow) {
                            *d += gv * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = buf!(*a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[s.0].value[0];
                let av = &self.nodes[a.0].value;
                if let Some(da) = buf!(*a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * sv;
                    }
                }
                if let Some(ds) = buf!(*s) {
                    ds[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                if let Some(da) = buf!(*a) {
                    for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                if let Some(da) = buf!(*a) {
                    for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                if let Some(da) = buf!(*a) {
                    for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                if let Some(da) = buf!(*a) {
                    for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gv * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = *node.shape.last().unwrap();
                if let Some(da) = buf!(*a) {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let n = *self.nodes[a.0].shape.last().unwrap();
                let p = kernels::softmax_rows(&self.nodes[a.0].value, n);
                if let Some(da) = buf!(*a) {
                    for (r, (drow, prow)) in da.chunks_mut(n).zip(p.chunks(n)).enumerate() {
                        for (d, pv) in drow.iter_mut().zip(prow) {
                            *d += g[r] * pv;
                        }
                    }
                }
            }
            Op::LayerNorm { h, gamma, beta } => {
                let dim = *node.shape.last().unwrap();
                let gam = &self.nodes[gamma.0].value;
                let mut dh = self.nodes[h.0].requires_grad.then(|| vec![0.0; node.value.len()]);
                let mut dg = self.nodes[gamma.0].requires_grad.then(|| vec![0.0; dim]);
                let mut dbt = self.nodes[beta.0].requires_grad.then(|| vec![0.0; dim]);
                kernels::layer_norm_backward(
                    g,
                    &node.aux,
                    &node.aux2,
                    gam,
                    dim,
                    dh.as_deref_mut(),
                    dg.as_deref_mut(),
                    dbt.as_deref_mut(),
                );
                add_into(buf!(*h), dh.as_deref());
                add_into(buf!(*gamma), dg.as_deref());
                add_into(buf!(*beta), dbt.as_deref());
            }
            Op::Conv1d { h, kernel, geo } => {
                let hv = &self.nodes[h.0].value;
                let wv = &self.nodes[kernel.0].value;
                let mut dh = self.nodes[h.0].requires_grad.then(|| vec![0.0; hv.len()]);
                let mut dw = self.nodes[kernel.0].requires_grad.then(|| vec![0.0; wv.len()]);
                kernels::conv1d_grouped_backward(hv, wv, g, *geo, dh.as_deref_mut(), dw.as_deref_mut());
                add_into(buf!(*h), dh.as_deref());
                add_into(buf!(*kernel), dw.as_deref());
            }
            Op::MeanRows(a) => {
                let n = g.len();
                let rows = self.nodes[a.0].value.len() / n;
                if let Some(da) = buf!(*a) {
                    for drow in da.chunks_mut(n) {
                        for (d, gv) in drow.iter_mut().zip(g) {
                            *d += gv / rows as f64;
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                let norms = &node.aux;
                if let Some(da) = buf!(*a) {
                    for (r, ((drow, grow), yrow)) in
                        da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gv - yv * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = buf!(*a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Reshape(a) => add_into(buf!(*a), Some(g)),
            Op::SliceCols { a, start } => {
                let cols = self.nodes[a.0].shape[1];
                let len = node.shape[1];
                if let Some(da) = buf!(*a) {
                    for (drow, grow) in da.chunks_mut(cols).zip(g.chunks(len)) {
                        for (d, gv) in drow[*start..*start + len].iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    if let Some(dp) = buf!(p) {
                        for (drow, grow) in dp.chunks_mut(c).zip(g.chunks(total)) {
                            for (d, gv) in drow.iter_mut().zip(&grow[offset..offset + c]) {
                                *d += gv;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::StackRows(parts) => {
                let n = node.shape[1];
                for (r, &p) in parts.iter().enumerate() {
                    add_into(buf!(p), Some(&g[r * n..(r + 1) * n]));
                }
            }
            Op::SelectRows { a, rows } => {
                let n = node.shape[1];
                if let Some(da) = buf!(*a) {
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, gv) in da[r * n..(r + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(da) = buf!(*a) {
                    for (k, &i) in idx.iter().enumerate() {
                        da[i] += g[k];
                    }
                }
            }
            Op::WeightedSum { weights, inputs } => {
                let w = &self.nodes[weights.0].value;
                let mut dw = vec![0.0; w.len()];
                for (l, &inp) in inputs.iter().enumerate() {
                    dw[l] = g.iter().zip(&self.nodes[inp.0].value).map(|(x, y)| x * y).sum();
                    if let Some(di) = buf!(inp) {
                        for (d, gv) in di.iter_mut().zip(g) {
                            *d += w[l] * gv;
                        }
                    }
                }
                add_into(buf!(*weights), Some(&dw));
            }
        }
    }
}

fn add_into(dst: Option<&mut Vec<f64>>, src: Option<&[f64]>) {
    if let (Some(d), Some(s)) = (dst, src) {
        for (x, y) in d.iter_mut().zip(s) {
            *x += y;
        }
    }
}

pub(crate) fn conv_geometry(h: &[usize], kernel: &[usize], groups: usize) -> Result<ConvGeometry> {
    if h.len() != 2 || kernel.len() != 3 {
        return Err(Error::shape(
            "conv1d_grouped",
            format!("expected h [T x C_in] and kernel [C_out x C_in/G x k], got {h:?}, {kernel:?}"),
        ));
    }
    let (time, c_in) = (h[0], h[1]);
    let (c_out, in_per_group, k) = (kernel[0], kernel[1], kernel[2]);
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Config(format!(
            "conv1d_grouped: C_in={c_in} and C_out={c_out} must be divisible by groups={groups}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv1d_grouped: kernel size {k} must be odd")));
    }
    if in_per_group != c_in / groups {
        return Err(Error::shape(
            "conv1d_grouped",
            format!("kernel expects {in_per_group} input channels per group, input has {}", c_in / groups),
        ));
    }
    Ok(ConvGeometry {
        time,
        c_in,
        c_out,
        groups,
        kernel: k,
    })
}
