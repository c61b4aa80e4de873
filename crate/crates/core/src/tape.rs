//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. A tape is built per example
//! and dropped after its gradients have been collected.

use std::collections::HashMap;

use crate::params::{ParamId, ParamSet};
use crate::scalar::{self, Scalar};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Matrix};
use crate::{Error, Result};

/// Norm floor used by squash and norm to stay finite at the origin.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Softmax(Var),
    SoftmaxRows(Var),
    SquashRows(Var),
    RowNorms(Var),
    Sum(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Row(Var, usize),
    Col(Var, usize),
    Transpose(Var),
    Reshape(Var),
    RepeatRows(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SoftmaxXent(Var, Vec<T>, Vec<T>),
}

struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: Option<&'p ParamSet<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A tape whose parameter leaves read directly from `params`.
    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(512),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.expect("param node without store").get(id),
            _ => &node.value,
        }
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Matrix::zeros(0, 0),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    /// `a^T b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::shape_mismatch("matmul_tn", va.shape(), vb.shape()));
        }
        let mut out = Matrix::zeros(va.cols(), vb.cols());
        gemm_tn(va, vb, &mut out);
        Ok(self.push(Op::MatMulTn(a, b), out, &[a, b]))
    }

    /// `a b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape_mismatch("matmul_nt", va.shape(), vb.shape()));
        }
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm_nt(va, vb, &mut out);
        Ok(self.push(Op::MatMulNt(a, b), out, &[a, b]))
    }

    fn broadcast_binary(&self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Matrix::from_vec(va.rows(), va.cols(), data)
        } else if vb.shape() == (1, 1) {
            let y = vb.data()[0];
            Ok(va.map(|x| f(x, y)))
        } else if va.shape() == (1, 1) {
            let x = va.data()[0];
            Ok(vb.map(|y| f(x, y)))
        } else {
            Err(Error::shape_mismatch(name, va.shape(), vb.shape()))
        }
    }

    /// Elementwise sum; either side may be a `1x1` scalar that broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    /// Hadamard product; either side may be a `1x1` scalar that broadcasts.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), value, &[a])
    }

    pub fn add_const(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push(Op::AddConst(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(scalar::sigmoid);
        self.push(Op::Sigmoid(a), value, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push(Op::Tanh(a), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        self.push(Op::Relu(a), value, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), value, &[a])
    }

    /// Softmax over every entry of `a`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Shape("softmax of an empty vector".into()));
        }
        let mut value = va.clone();
        scalar::softmax_in_place(value.data_mut());
        Ok(self.push(Op::Softmax(a), value, &[a]))
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(Error::Shape("softmax of an empty vector".into()));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            scalar::softmax_in_place(value.row_mut(r));
        }
        Ok(self.push(Op::SoftmaxRows(a), value, &[a]))
    }

    /// Capsule squash applied to each row.
    pub fn squash_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            squash_in_place(value.row_mut(r));
        }
        self.push(Op::SquashRows(a), value, &[a])
    }

    /// Euclidean norm of each row, as a column vector.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let norms = (0..va.rows()).map(|r| l2(va.row(r))).collect();
        self.push(Op::RowNorms(a), Matrix::column_vector(norms), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let n = T::from_usize(va.rows()).unwrap();
        let mut out = vec![T::zero(); va.cols()];
        for r in 0..va.rows() {
            for (o, &x) in out.iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(Op::MeanRows(a), Matrix::row_vector(out), &[a]))
    }

    /// Columnwise maximum. Ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::Shape("max over zero rows".into()));
        }
        let mut arg = vec![0usize; va.cols()];
        let mut out = va.row(0).to_vec();
        for r in 1..va.rows() {
            for (c, &x) in va.row(r).iter().enumerate() {
                if x > out[c] {
                    out[c] = x;
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(Op::MaxRows(a, arg), Matrix::row_vector(out), &[a]))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let va = self.value(a);
        if r >= va.rows() {
            return Err(Error::Shape(format!("row {r} of a {}x{} matrix", va.rows(), va.cols())));
        }
        let value = Matrix::row_vector(va.row(r).to_vec());
        Ok(self.push(Op::Row(a, r), value, &[a]))
    }

    pub fn col(&mut self, a: Var, c: usize) -> Result<Var> {
        let va = self.value(a);
        if c >= va.cols() {
            return Err(Error::Shape(format!("column {c} of a {}x{} matrix", va.rows(), va.cols())));
        }
        let value = Matrix::column_vector((0..va.rows()).map(|r| va.get(r, c)).collect());
        Ok(self.push(Op::Col(a, c), value, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value, &[a])
    }

    /// Reinterpret the row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(Error::shape_mismatch("reshape", va.shape(), (rows, cols)));
        }
        let value = Matrix::from_vec(rows, cols, va.data().to_vec())?;
        Ok(self.push(Op::Reshape(a), value, &[a]))
    }

    /// Each row repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.len() * k);
        for r in 0..va.rows() {
            for _ in 0..k {
                data.extend_from_slice(va.row(r));
            }
        }
        let value = Matrix::from_vec(va.rows() * k, va.cols(), data).unwrap();
        self.push(Op::RepeatRows(a, k), value, &[a])
    }

    /// Vertically stack row vectors (or any matrices with equal column count).
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Shape("stack of zero parts".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(Error::shape_mismatch("stack_rows", (rows, cols), vp.shape()));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::StackRows(parts.to_vec()), value, parts))
    }

    /// Horizontally concatenate matrices with equal row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let mut cols = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rows() != rows {
                return Err(Error::shape_mismatch("concat_cols", (rows, cols), vp.shape()));
            }
            cols += vp.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let vp = self.value(p);
                value.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
                offset += vp.cols();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, parts))
    }

    /// Select rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::Shape(format!("row index {bad} out of range for {} rows", vt.rows())));
        }
        let mut data = Vec::with_capacity(indices.len() * vt.cols());
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let value = Matrix::from_vec(indices.len(), vt.cols(), data)?;
        Ok(self.push(Op::GatherRows(table, indices.to_vec()), value, &[table]))
    }

    /// Cross-entropy `-sum_k target_k * log softmax(logits)_k` for a single
    /// row of logits. The target may be any nonnegative weighting.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.len() != target.len() || vl.is_empty() {
            return Err(Error::Shape(format!(
                "cross entropy over {} logits with {} targets",
                vl.len(),
                target.len()
            )));
        }
        let x = vl.data();
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let loss = x
            .iter()
            .zip(target)
            .map(|(&v, &y)| if y == T::zero() { T::zero() } else { -y * (v - lse) })
            .sum::<T>();
        let probs = x.iter().map(|&v| (v - lse).exp()).collect();
        Ok(self.push(
            Op::SoftmaxXent(logits, target.to_vec(), probs),
            Matrix::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut sparse: HashMap<ParamId, Vec<(usize, Vec<T>)>> = HashMap::new();
        grads[root.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads, &mut sparse);
        }

        let params = self.param_nodes.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients {
            grads,
            sparse,
            params,
        })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
        sparse: &mut HashMap<ParamId, Vec<(usize, Vec<T>)>>,
    ) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = acc(grads, *a, va.shape());
                    gemm_nt(g, vb, ga);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, vb.shape());
                    gemm_tn(va, g, gb);
                }
            }
            Op::MatMulTn(a, b) => {
                // out = a^T b
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = acc(grads, *a, va.shape());
                    gemm_nt(vb, g, ga);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, vb.shape());
                    gemm_nn(va, g, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a b^T
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = acc(grads, *a, va.shape());
                    gemm_nn(g, vb, ga);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, vb.shape());
                    gemm_tn(g, va, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.accumulate_broadcast(grads, *a, g, |_| T::one());
                self.accumulate_broadcast(grads, *b, g, |_| sign);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a), self.value(b));
                self.accumulate_broadcast(grads, a, g, |i| broadcast_at(vb, i));
                self.accumulate_broadcast(grads, b, g, |i| broadcast_at(va, i));
            }
            Op::Scale(a, k) => {
                let k = *k;
                elementwise(grads, *a, g, self.value(*a).shape(), |_, gi| gi * k, self.needs(*a));
            }
            Op::AddConst(a) => {
                elementwise(grads, *a, g, out.shape(), |_, gi| gi, self.needs(*a));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                elementwise(grads, *a, g, out.shape(), |i, gi| gi * y[i] * (T::one() - y[i]), self.needs(*a));
            }
            Op::Tanh(a) => {
                let y = out.data();
                elementwise(grads, *a, g, out.shape(), |i, gi| gi * (T::one() - y[i] * y[i]), self.needs(*a));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                elementwise(
                    grads,
                    *a,
                    g,
                    out.shape(),
                    |i, gi| if x[i] > T::zero() { gi } else { T::zero() },
                    self.needs(*a),
                );
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::lit(2.0);
                elementwise(grads, *a, g, out.shape(), |i, gi| gi * two * x[i], self.needs(*a));
            }
            Op::Softmax(a) => {
                let p = out.data();
                let dot: T = p.iter().zip(g.data()).map(|(&pi, &gi)| pi * gi).sum();
                elementwise(grads, *a, g, out.shape(), |i, gi| p[i] * (gi - dot), self.needs(*a));
            }
            Op::SoftmaxRows(a) => {
                let ga = acc(grads, *a, out.shape());
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let dot: T = p.iter().zip(gr).map(|(&pi, &gi)| pi * gi).sum();
                    for ((o, &pi), &gi) in ga.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o += pi * (gi - dot);
                    }
                }
            }
            Op::SquashRows(a) => {
                let va = self.value(*a);
                let ga = acc(grads, *a, va.shape());
                for r in 0..va.rows() {
                    squash_backward(va.row(r), g.row(r), ga.row_mut(r));
                }
            }
            Op::RowNorms(a) => {
                let va = self.value(*a);
                let ga = acc(grads, *a, va.shape());
                let eps = T::lit(NORM_EPS);
                for r in 0..va.rows() {
                    let n = out.data()[r].max(eps);
                    let k = g.data()[r] / n;
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(va.row(r)) {
                        *o += k * x;
                    }
                }
            }
            Op::Sum(a) => {
                let gi = g.data()[0];
                let shape = self.value(*a).shape();
                let ga = acc(grads, *a, shape);
                ga.data_mut().iter_mut().for_each(|o| *o += gi);
            }
            Op::MeanRows(a) => {
                let shape = self.value(*a).shape();
                let n = T::from_usize(shape.0).unwrap();
                let ga = acc(grads, *a, shape);
                for r in 0..shape.0 {
                    for (o, &gi) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o += gi / n;
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let shape = self.value(*a).shape();
                let ga = acc(grads, *a, shape);
                for (c, &r) in arg.iter().enumerate() {
                    let cur = ga.get(r, c);
                    ga.set(r, c, cur + g.data()[c]);
                }
            }
            Op::Row(a, r) => {
                let shape = self.value(*a).shape();
                let ga = acc(grads, *a, shape);
                for (o, &gi) in ga.row_mut(*r).iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }
            Op::Col(a, c) => {
                let shape = self.value(*a).shape();
                let ga = acc(grads, *a, shape);
                for r in 0..shape.0 {
                    let cur = ga.get(r, *c);
                    ga.set(r, *c, cur + g.data()[r]);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                let ga = acc(grads, *a, gt.shape());
                ga.add_assign(&gt).unwrap();
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                let ga = acc(grads, *a, shape);
                for (o, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }
            Op::RepeatRows(a, k) => {
                let shape = self.value(*a).shape();
                let ga = acc(grads, *a, shape);
                for r in 0..g.rows() {
                    for (o, &gi) in ga.row_mut(r / k).iter_mut().zip(g.row(r)) {
                        *o += gi;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.needs(p) {
                        let gp = acc(grads, p, shape);
                        let n = shape.0 * shape.1;
                        for (o, &gi) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += gi;
                        }
                    }
                    offset += shape.0 * shape.1;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.needs(p) {
                        let gp = acc(grads, p, shape);
                        for r in 0..shape.0 {
                            let src = &g.row(r)[offset..offset + shape.1];
                            for (o, &gi) in gp.row_mut(r).iter_mut().zip(src) {
                                *o += gi;
                            }
                        }
                    }
                    offset += shape.1;
                }
            }
            Op::GatherRows(table, indices) => {
                if let Op::Param(id) = self.nodes[table.0].op {
                    let rows = sparse.entry(id).or_default();
                    for (r, &i) in indices.iter().enumerate() {
                        rows.push((i, g.row(r).to_vec()));
                    }
                } else {
                    let shape = self.value(*table).shape();
                    let gt = acc(grads, *table, shape);
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, &gi) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SoftmaxXent(logits, target, probs) => {
                let gi = g.data()[0];
                let mass: T = target.iter().copied().sum();
                if self.needs(*logits) {
                    let shape = self.value(*logits).shape();
                    let gl = acc(grads, *logits, shape);
                    for (i, o) in gl.data_mut().iter_mut().enumerate() {
                        *o += gi * (mass * probs[i] - target[i]);
                    }
                }
            }
        }
    }

    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Matrix<T>>],
        target: Var,
        g: &Matrix<T>,
        factor: impl Fn(usize) -> T,
    ) {
        if !self.needs(target) {
            return;
        }
        let shape = self.value(target).shape();
        let gt = acc(grads, target, shape);
        if shape == g.shape() {
            for (i, (o, &gi)) in gt.data_mut().iter_mut().zip(g.data()).enumerate() {
                *o += gi * factor(i);
            }
        } else {
            // 1x1 operand broadcast across g
            let total: T = g.data().iter().enumerate().map(|(i, &gi)| gi * factor(i)).sum();
            gt.data_mut()[0] += total;
        }
    }
}

fn broadcast_at<T: Scalar>(m: &Matrix<T>, i: usize) -> T {
    if m.len() == 1 {
        m.data()[0]
    } else {
        m.data()[i]
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, shape: (usize, usize)) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn elementwise<T: Scalar>(
    grads: &mut [Option<Matrix<T>>],
    target: Var,
    g: &Matrix<T>,
    shape: (usize, usize),
    f: impl Fn(usize, T) -> T,
    needed: bool,
) {
    if !needed {
        return;
    }
    let gt = acc(grads, target, shape);
    for (i, (o, &gi)) in gt.data_mut().iter_mut().zip(g.data()).enumerate() {
        *o += f(i, gi);
    }
}

fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `g(v) = |v|^2 / (1 + |v|^2) * v / max(|v|, eps)`
pub(crate) fn squash_in_place<T: Scalar>(v: &mut [T]) {
    let sq: T = v.iter().map(|&x| x * x).sum();
    let n = sq.sqrt().max(T::lit(NORM_EPS));
    let k = sq / (T::one() + sq) / n;
    v.iter_mut().for_each(|x| *x *= k);
}

fn squash_backward<T: Scalar>(v: &[T], g: &[T], out: &mut [T]) {
    let one = T::one();
    let sq: T = v.iter().map(|&x| x * x).sum();
    let n = sq.sqrt();
    let eps = T::lit(NORM_EPS);
    // g(v) = s(n) v, ds/dn divided by n gives the rank-one coefficient.
    let (s, ds_over_n) = if n > eps {
        let d = one + sq;
        (n / d, (one - sq) / (d * d) / n)
    } else {
        let d = one + sq;
        (sq / (eps * d), T::lit(2.0) / (eps * d * d))
    };
    let vg: T = v.iter().zip(g).map(|(&x, &y)| x * y).sum();
    for ((o, &x), &y) in out.iter_mut().zip(v).zip(g) {
        *o += s * y + ds_over_n * vg * x;
    }
}

/// Gradient of a stored parameter.
#[derive(Debug, Clone)]
pub enum ParamGrad<T> {
    /// The parameter did not influence the root.
    Zero,
    Dense(Matrix<T>),
    /// Row contributions from embedding lookups, possibly repeated.
    Rows(Vec<(usize, Vec<T>)>),
}

impl<T: Scalar> ParamGrad<T> {
    /// Materialize against the parameter's shape.
    pub fn to_dense(&self, shape: (usize, usize)) -> Matrix<T> {
        let mut m = Matrix::zeros(shape.0, shape.1);
        self.add_into(&mut m);
        m
    }

    pub fn add_into(&self, target: &mut Matrix<T>) {
        match self {
            ParamGrad::Zero => {}
            ParamGrad::Dense(g) => target.add_assign(g).expect("gradient shape matches parameter"),
            ParamGrad::Rows(rows) => {
                for (i, row) in rows {
                    for (o, &x) in target.row_mut(*i).iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    sparse: HashMap<ParamId, Vec<(usize, Vec<T>)>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Tape::var`]. `None` means
    /// the leaf does not influence the root (its gradient is exactly zero).
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> ParamGrad<T> {
        let dense = self.params.get(&id).and_then(|v| self.grads[v.0].clone());
        let rows = self.sparse.get(&id);
        match (dense, rows) {
            (None, None) => ParamGrad::Zero,
            (Some(d), None) => ParamGrad::Dense(d),
            (None, Some(r)) => ParamGrad::Rows(r.clone()),
            (Some(mut d), Some(r)) => {
                ParamGrad::Rows(r.clone()).add_into(&mut d);
                ParamGrad::Dense(d)
            }
        }
    }

    /// Gradients for every parameter of `set`, in id order.
    pub fn for_params(&self, set: &ParamSet<T>) -> Vec<ParamGrad<T>> {
        set.ids().map(|id| self.param(id)).collect()
    }
}
