//! Define-by-run reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value. Nodes are stored in
//! creation order, which is already a topological order, so the backward
//! pass is a single reverse sweep that visits each node once.

use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use super::kernels::{self, dot, matmul, matmul_at, matmul_bt};
use super::{shape_err, split_axis, ParamId, ParamStore, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Offset(Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    SoftmaxGroups(Var, usize),
    NormalizeRows(Var),
    Standardize(Var, T),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    RowDot(Var, Var),
    ModeProduct { tensor: Var, vec: Var, axis: usize },
    BceWithLogits { logits: Var, targets: Vec<T> },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Variables created by [`Tape::bind`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    by_leaf: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&var)
    }

    /// Gradients in parameter-store order for variables created by `bind`.
    pub fn for_params(mut self, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .map(|v| self.by_leaf.remove(v).expect("bound parameters require grad"))
            .collect()
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places every tensor of `store` on the tape as a leaf.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Bound {
        let vars = store
            .ids()
            .map(|id| self.leaf_shared(store.shared(id), trainable))
            .collect();
        Bound { vars }
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match *self.shape(var) {
            [m, n] => Ok((m, n)),
            ref s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn with_shape(&self, like: Var, data: Vec<T>) -> Tensor<T> {
        Tensor {
            shape: self.shape(like).to_vec(),
            data,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("[{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let out = matmul_bt(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.same_shape(a, b, name)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = self.with_shape(a, data);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds `bias[n]` to every row of `a[m,n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, n) = self.dims2(a, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for {n} columns", self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = self.with_shape(a, data);
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, Op::Scale(a, c), &[a]))
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x + c);
        Ok(self.push(value, Op::Offset(a), &[a]))
    }

    /// Multiplies row `i` of `a[m,n]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "scale_rows")?;
        if self.value(s).len() != m {
            return Err(shape_err(
                "scale_rows",
                format!("{} row scales for {m} rows", self.value(s).len()),
            ));
        }
        let sv = self.data(s);
        let data = self
            .data(a)
            .chunks(n)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |&x| x * c))
            .collect();
        let value = self.with_shape(a, data);
        Ok(self.push(value, Op::ScaleRows(a, s), &[a, s]))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!("scale must hold one value, got {:?}", self.shape(s)),
            ));
        }
        let c = self.data(s)[0];
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(T::tanh);
        Ok(self.push(value, Op::Tanh(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(kernels::sigmoid);
        Ok(self.push(value, Op::Sigmoid(a), &[a]))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(kernels::softplus);
        Ok(self.push(value, Op::Softplus(a), &[a]))
    }

    fn last_dim(&self, a: Var) -> usize {
        self.shape(a).last().copied().unwrap_or(1)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.last_dim(a);
        let mut data = self.data(a).to_vec();
        data.chunks_mut(n).for_each(kernels::softmax_in_place);
        let value = self.with_shape(a, data);
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Treats each row of `a[m, groups*d]` as `groups` blocks of width `d`
    /// and applies softmax across the blocks independently per position.
    pub fn softmax_groups(&mut self, a: Var, groups: usize) -> Result<Var, TensorError> {
        let (_, w) = self.dims2(a, "softmax_groups")?;
        if groups == 0 || w % groups != 0 {
            return Err(shape_err(
                "softmax_groups",
                format!("{w} columns do not split into {groups} groups"),
            ));
        }
        let d = w / groups;
        let mut data = self.data(a).to_vec();
        let mut buf = vec![T::zero(); groups];
        for row in data.chunks_mut(w) {
            for j in 0..d {
                for (g, b) in buf.iter_mut().enumerate() {
                    *b = row[g * d + j];
                }
                kernels::softmax_in_place(&mut buf);
                for (g, &b) in buf.iter().enumerate() {
                    row[g * d + j] = b;
                }
            }
        }
        let value = self.with_shape(a, data);
        Ok(self.push(value, Op::SoftmaxGroups(a, groups), &[a]))
    }

    /// Divides each row (last axis) by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.last_dim(a);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(n) {
            let s: T = row.iter().copied().sum();
            row.iter_mut().for_each(|x| *x = *x / s);
        }
        let value = self.with_shape(a, data);
        Ok(self.push(value, Op::NormalizeRows(a), &[a]))
    }

    /// Per-row standardization `(x - mean) / (std + eps)` over the last
    /// axis, using the population standard deviation.
    pub fn standardize(&mut self, a: Var, eps: T) -> Result<Var, TensorError> {
        let n = self.last_dim(a);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(n) {
            let (mean, std) = mean_std(row);
            let denom = std + eps;
            row.iter_mut().for_each(|x| *x = (*x - mean) / denom);
        }
        let value = self.with_shape(a, data);
        Ok(self.push(value, Op::Standardize(a, eps), &[a]))
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let rows = shape[0];
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let w = self.value(a).len() / rows;
        let src = self.data(a);
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(shape_err(
                "slice_cols",
                format!("range {start}..{end} of {n} columns"),
            ));
        }
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let value = Tensor::matrix(m, end - start, data)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut m = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if *m.get_or_insert(pm) != pm {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            widths.push(pn);
        }
        let m = m.ok_or_else(|| shape_err("concat_cols", "nothing to concatenate"))?;
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = (*self.nodes[a.0].value).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.data(a).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Row-wise dot product of two `[m,n]` matrices → `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "row_dot")?;
        let (_, n) = self.dims2(a, "row_dot")?;
        let data: Vec<T> = self
            .data(a)
            .chunks(n)
            .zip(self.data(b).chunks(n))
            .map(|(x, y)| dot(x, y))
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDot(a, b), &[a, b]))
    }

    /// Differentiable [`Tensor::mode_n_product`]; `mode` is 1-based.
    pub fn mode_n_product(&mut self, tensor: Var, vec: Var, mode: usize) -> Result<Var, TensorError> {
        if self.value(vec).rank() != 1 {
            return Err(shape_err(
                "mode_n_product",
                format!("expected a vector, got {:?}", self.shape(vec)),
            ));
        }
        let value = self.value(tensor).mode_n_product(self.data(vec), mode)?;
        let op = Op::ModeProduct {
            tensor,
            vec,
            axis: mode - 1,
        };
        Ok(self.push(value, op, &[tensor, vec]))
    }

    /// Summed binary cross-entropy on raw scores, computed as
    /// `max(s,0) - s·y + ln(1 + e^{-|s|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Result<Var, TensorError> {
        if self.value(logits).len() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!(
                    "{} scores vs {} labels",
                    self.value(logits).len(),
                    targets.len()
                ),
            ));
        }
        let loss = self
            .data(logits)
            .iter()
            .zip(&targets)
            .map(|(&s, &y)| s.max(T::zero()) - s * y + (-s.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets },
            &[logits],
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Non-leaf buffers are dropped once propagated.
            if let Some(g) = grads[id].take() {
                self.propagate(id, &g, &mut grads);
            }
        }

        let mut by_leaf = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                by_leaf.insert(
                    Var(id),
                    Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    },
                );
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, contrib: Vec<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(contrib)
                .for_each(|(e, c)| *e = *e + c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[id].value.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_bt(g, self.data(*b), m, n, k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_at(self.data(*a), g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul(g, self.data(*b), m, n, k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_at(g, self.data(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x / y).collect());
                let db = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&x, (&p, &q))| -x * p / (q * q))
                    .collect();
                self.accumulate(grads, *b, db);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::ScaleRows(a, s) => {
                let n = self.shape(*a)[1];
                let sv = self.data(*s);
                if self.needs(*a) {
                    let da = g
                        .chunks(n)
                        .zip(sv)
                        .flat_map(|(row, &c)| row.iter().map(move |&x| x * c))
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*s) {
                    let ds = g.chunks(n).zip(self.data(*a).chunks(n)).map(|(x, y)| dot(x, y)).collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::MulScalar(a, s) => {
                let c = self.data(*s)[0];
                self.accumulate(grads, *a, g.iter().map(|&x| x * c).collect());
                if self.needs(*s) {
                    self.accumulate(grads, *s, vec![dot(g, self.data(*a))]);
                }
            }
            Op::Tanh(a) => {
                let da = g.iter().zip(out).map(|(&x, &y)| x * (T::one() - y * y)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g.iter().zip(out).map(|(&x, &y)| x * y * (T::one() - y)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Softplus(a) => {
                let da = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&x, &z)| x * kernels::sigmoid(z))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let n = self.last_dim(*a);
                let mut da = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(out.chunks(n)) {
                    let inner = dot(gr, yr);
                    da.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - inner)));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxGroups(a, groups) => {
                let w = self.shape(*a)[1];
                let d = w / groups;
                let mut da = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(out.chunks(w)).zip(da.chunks_mut(w)) {
                    for j in 0..d {
                        let inner = (0..*groups)
                            .map(|k| gr[k * d + j] * yr[k * d + j])
                            .fold(T::zero(), |s, v| s + v);
                        for k in 0..*groups {
                            let p = k * d + j;
                            dr[p] = yr[p] * (gr[p] - inner);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let n = self.last_dim(*a);
                let mut da = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks(n).zip(out.chunks(n)).zip(self.data(*a).chunks(n)) {
                    let s: T = xr.iter().copied().sum();
                    let inner = dot(gr, yr);
                    da.extend(gr.iter().map(|&x| (x - inner) / s));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Standardize(a, eps) => {
                let n = self.last_dim(*a);
                let nn = T::of(n as f64);
                let mut da = Vec::with_capacity(g.len());
                for (gr, xr) in g.chunks(n).zip(self.data(*a).chunks(n)) {
                    let (mean, std) = mean_std(xr);
                    let denom = std + *eps;
                    let gmean = gr.iter().copied().sum::<T>() / nn;
                    let gc: T = gr.iter().zip(xr).map(|(&x, &v)| x * (v - mean)).sum();
                    let coef = if std > T::zero() {
                        gc / (nn * std * denom * denom)
                    } else {
                        T::zero()
                    };
                    da.extend(
                        gr.iter()
                            .zip(xr)
                            .map(|(&x, &v)| (x - gmean) / denom - (v - mean) * coef),
                    );
                }
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let rows = self.shape(*a)[0];
                let w = self.value(*a).len() / rows;
                let mut da = vec![T::zero(); rows * w];
                for (gr, &i) in g.chunks(w).zip(idx) {
                    da[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, &x)| *d = *d + x);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols(a, start) => {
                let n = self.shape(*a)[1];
                let w = self.shape_of(id)[1];
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (dr, gr) in da.chunks_mut(n).zip(g.chunks(w)) {
                    dr[*start..*start + w].copy_from_slice(gr);
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let total = self.shape_of(id)[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let dp = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![g[0]; self.value(*a).len()]);
            }
            Op::RowDot(a, b) => {
                let n = self.shape(*a)[1];
                let expand = |other: &[T]| -> Vec<T> {
                    other
                        .chunks(n)
                        .zip(g)
                        .flat_map(|(row, &c)| row.iter().map(move |&x| x * c))
                        .collect()
                };
                if self.needs(*a) {
                    self.accumulate(grads, *a, expand(self.data(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, expand(self.data(*a)));
                }
            }
            Op::ModeProduct { tensor, vec, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*tensor), *axis);
                let x = self.data(*tensor);
                let v = self.data(*vec);
                if self.needs(*tensor) {
                    let mut dx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for (a, &va) in v.iter().enumerate() {
                            let base = (o * n + a) * inner;
                            dx[base..base + inner]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(d, &gv)| *d = gv * va);
                        }
                    }
                    self.accumulate(grads, *tensor, dx);
                }
                if self.needs(*vec) {
                    let mut dv = vec![T::zero(); n];
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for (a, d) in dv.iter_mut().enumerate() {
                            let base = (o * n + a) * inner;
                            *d = *d + dot(go, &x[base..base + inner]);
                        }
                    }
                    self.accumulate(grads, *vec, dv);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let dl = self
                    .data(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&s, &y)| g[0] * (kernels::sigmoid(s) - y))
                    .collect();
                self.accumulate(grads, *logits, dl);
            }
        }
    }

    fn shape_of(&self, id: usize) -> &[usize] {
        self.nodes[id].value.shape()
    }
}

fn mean_std<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}
