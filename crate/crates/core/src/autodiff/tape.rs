//! Dynamic reverse-mode tape over dense tensors.
//!
//! A [`Tape`] is rebuilt for every training step. Every op appends one node,
//! so node order is a topological order; [`Tape::backward`] walks it once in
//! reverse. Shapes are rank 0, 1 or 2. Binary elementwise ops broadcast only
//! the right operand, and only over the leading (row) extent.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{check_finite, numel, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Value {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Shared(v) => v,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Mean(Var),
    Sum(Var),
    Scale(Var, f64),
    MaskedFill(Var, Vec<bool>),
    FaultySquare(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Rows and columns of a rank ≤ 2 shape, treating vectors as one row.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, usize), Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(&value, op_name(&op))?;
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let data = self.value(v);
        debug_assert_eq!(data.len(), 1);
        data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        Tensor::new(&node.shape, node.value.as_slice().to_vec()).expect("tape values are valid")
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Value::Shared(tensor.shared_data()),
            op: Op::Leaf,
            needs_grad: tensor.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Places a parameter on the tape (once per tape; later calls reuse the node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.id(), id.index());
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Shared(t.shared_data()),
            op: Op::Leaf,
            needs_grad: !store.is_frozen(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert(key, v);
        v
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(vec![m, n], out, Op::MatMul(a, b), ng)
    }

    /// Checks the right operand against `lhs`: same shape, or one row broadcast
    /// over the leading extent.
    fn broadcast_ok(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(());
        }
        if !sa.is_empty() {
            let tail = &sa[1..];
            let row_ok = sb == tail || (sb.len() == sa.len() && sb[0] == 1 && &sb[1..] == tail);
            if row_ok {
                return Ok(());
            }
        }
        Err(Error::shape(op, sa, sb))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.broadcast_ok(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let w = vb.len();
            va.chunks(w)
                .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad;
        self.push(shape, out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::Numeric("scale factor".into()));
        }
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad;
        self.push(shape, out, Op::Scale(a, s), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad;
        self.push(shape, out, Op::Softmax(a), ng)
    }

    /// `x - log Σ exp x` over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        out.chunks_mut(c).for_each(log_softmax_in_place);
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad;
        self.push(shape, out, Op::LogSoftmax(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || rows.is_empty() {
            return Err(Error::shape("gather_rows", &sa, &[rows.len()]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= sa[0]) {
            return Err(Error::shape("gather_rows", &sa, &[bad]));
        }
        let c = sa[1];
        let va = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&va[r * c..(r + 1) * c]);
        }
        let ng = self.node(a).needs_grad;
        self.push(vec![rows.len(), c], out, Op::GatherRows(a, rows.to_vec()), ng)
    }

    /// Row lookup into an embedding table `[vocab, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Concatenation along the last axis of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = self.shape(*first).first().copied().unwrap_or(0);
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            cols.push(s[1]);
        }
        let total: usize = cols.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&cols) {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.node(p).needs_grad);
        self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stacks rank-2 tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of zero tensors"))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.node(p).needs_grad);
        self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || len == 0 || start + len > sa[1] {
            return Err(Error::shape("slice_cols", &sa, &[start, len]));
        }
        let c = sa[1];
        let va = self.value(a);
        let mut out = Vec::with_capacity(sa[0] * len);
        for r in 0..sa[0] {
            out.extend_from_slice(&va[r * c + start..r * c + start + len]);
        }
        let ng = self.node(a).needs_grad;
        self.push(vec![sa[0], len], out, Op::SliceCols(a, start), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("transpose", &sa, &[2]));
        }
        let out = transpose_kernel(self.value(a), sa[0], sa[1]);
        let ng = self.node(a).needs_grad;
        self.push(vec![sa[1], sa[0]], out, Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let ng = self.node(a).needs_grad;
        self.push(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.node(a).needs_grad;
        self.push(Vec::new(), vec![s], Op::Mean(a), ng)
    }

    /// Replaces entries where `mask` is true by `fill`; those entries get no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let n = self.value(a).len();
        if mask.len() != n {
            return Err(Error::shape("masked_fill", self.shape(a), &[mask.len()]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad;
        self.push(shape, out, Op::MaskedFill(a, mask.to_vec()), ng)
    }

    /// `x²` with a deliberately wrong backward rule (`x` instead of `2x`).
    /// Exists only as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn fault_injected_square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::FaultySquare(a))
    }

    // ---- backward ------------------------------------------------------------

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until taken with [`Tape::leaf_grad`] consumers or
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            check_finite(&g, "gradient")?;
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&idx) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(idx, g);
                    }
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.as_slice();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    // dA = G · Bᵀ
                    let vb = self.value(*b);
                    let acc = grad_slot(grads, *a, m * k);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let bk = &vb[kk * n..(kk + 1) * n];
                            acc[i * k + kk] += dot(gi, bk);
                        }
                    }
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let va = self.value(*a);
                    let acc = grad_slot(grads, *b, k * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = va[i * k + kk];
                            if aik != 0.0 {
                                axpy(aik, gi, &mut acc[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    add_into(grad_slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let nb = self.value(*b).len();
                    let acc = grad_slot(grads, *b, nb);
                    for row in g.chunks(nb) {
                        axpy(sign, row, acc);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.len();
                if wants(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    for (i, (acc_i, g_i)) in acc.iter_mut().zip(g).enumerate() {
                        *acc_i += g_i * vb[i % nb];
                    }
                }
                if wants(*b) {
                    let acc = grad_slot(grads, *b, nb);
                    for (i, (g_i, a_i)) in g.iter().zip(va).enumerate() {
                        acc[i % nb] += g_i * a_i;
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    for ((acc_i, g_i), y_i) in acc.iter_mut().zip(g).zip(y) {
                        *acc_i += g_i * (1.0 - y_i * y_i);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    for ((acc_i, g_i), y_i) in acc.iter_mut().zip(g).zip(y) {
                        *acc_i += g_i * y_i * (1.0 - y_i);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let acc = grad_slot(grads, *a, g.len());
                    for ((acc_i, g_i), x_i) in acc.iter_mut().zip(g).zip(x) {
                        if *x_i > 0.0 {
                            *acc_i += g_i;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let (_, c) = rows_cols(&node.shape);
                    let acc = grad_slot(grads, *a, g.len());
                    for ((acc_r, g_r), y_r) in acc.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(g_r, y_r);
                        for ((acc_i, g_i), y_i) in acc_r.iter_mut().zip(g_r).zip(y_r) {
                            *acc_i += y_i * (g_i - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let (_, c) = rows_cols(&node.shape);
                    let acc = grad_slot(grads, *a, g.len());
                    for ((acc_r, g_r), y_r) in acc.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = g_r.iter().sum();
                        for ((acc_i, g_i), y_i) in acc_r.iter_mut().zip(g_r).zip(y_r) {
                            *acc_i += g_i - y_i.exp() * s;
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                if wants(*a) {
                    let c = node.shape[1];
                    let n = self.value(*a).len();
                    let acc = grad_slot(grads, *a, n);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut acc[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if wants(p) {
                        let acc = grad_slot(grads, p, rows * c);
                        for r in 0..rows {
                            add_into(
                                &mut acc[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if wants(p) {
                        add_into(grad_slot(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let (rows, len) = (node.shape[0], node.shape[1]);
                    let c = self.shape(*a)[1];
                    let acc = grad_slot(grads, *a, rows * c);
                    for r in 0..rows {
                        add_into(
                            &mut acc[r * c + start..r * c + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let gt = transpose_kernel(g, r, c);
                    add_into(grad_slot(grads, *a, gt.len()), &gt);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let n = self.value(*a).len();
                    grad_slot(grads, *a, n).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = self.value(*a).len();
                    let share = g[0] / n as f64;
                    grad_slot(grads, *a, n).iter_mut().for_each(|v| *v += share);
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    axpy(*s, g, grad_slot(grads, *a, g.len()));
                }
            }
            Op::FaultySquare(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let acc = grad_slot(grads, *a, g.len());
                    for ((acc_i, g_i), x_i) in acc.iter_mut().zip(g).zip(x) {
                        *acc_i += g_i * x_i;
                    }
                }
            }
            Op::MaskedFill(a, mask) => {
                if wants(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    for ((acc_i, g_i), &m) in acc.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *acc_i += g_i;
                        }
                    }
                }
            }
        }
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn leaf_grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Moves the gradients of `store`'s parameters from this tape into the
    /// store, adding to whatever the store already holds.
    pub fn accumulate_param_grads(&mut self, store: &mut ParamStore) {
        let sid = store.id();
        let mut touched = Vec::new();
        for (&(s, pidx), &var) in &self.param_cache {
            if s == sid {
                touched.push((pidx, var));
            }
        }
        touched.sort_unstable();
        for (pidx, var) in touched {
            if let Some(g) = self.leaf_grads.remove(&var.0) {
                store.get_mut(ParamId(pidx)).accumulate_grad(&g);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::GatherRows(..) => "gather_rows",
        Op::ConcatCols(_) => "concat",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Transpose(_) => "transpose",
        Op::Mean(_) => "mean",
        Op::Sum(_) => "sum",
        Op::Scale(..) => "scale",
        Op::MaskedFill(..) => "masked_fill",
        Op::FaultySquare(_) => "fault_injected_square",
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[inline]
fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                axpy(aik, &b[kk * n..(kk + 1) * n], row);
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}
