//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node; nodes only ever
//! reference earlier nodes, so reverse insertion order is a valid
//! topological order for the backward sweep.

use std::collections::HashMap;

use super::linalg::{gemm, MatRef};
use super::params::{ParamId, ParamStore};
use super::{split_axis, Scalar, Tensor};
use crate::error::{HadError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation with a hand-written adjoint. The forward value is computed
/// by the caller and handed to [`Graph::custom`].
pub trait CustomOp<F: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input (`None` for "no contribution").
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &[F]) -> Result<Vec<Option<Vec<F>>>>;
}

enum Op<F: Scalar> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LayerNorm(Var, usize, F),
    L2Normalize(Var, usize, F),
    Mean(Var, usize),
    Sum(Var, usize),
    SumAll(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Custom(Box<dyn CustomOp<F>>, Vec<Var>),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    frozen: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: false,
        }
    }

    /// A graph whose parameters enter as constants (no gradients recorded).
    pub fn frozen() -> Self {
        Graph {
            frozen: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.get(id).clone();
        let v = if self.frozen {
            self.push(value, Op::Leaf, false)
        } else {
            self.push(value, Op::Param, true)
        };
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(HadError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(HadError::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn row_op(&mut self, a: Var, r: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tr) = (self.value(a), self.value(r));
        let d = *ta.shape().last().unwrap_or(&0);
        if tr.rank() != 1 || tr.len() != d {
            return Err(HadError::shape(name, ta.shape(), tr.shape()));
        }
        let data = ta
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(tr.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Adds a vector to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_op(a, r, "add_row", |x, y| x + y)?;
        let rg = self.rg(&[a, r]);
        Ok(self.push(t, Op::AddRow(a, r), rg))
    }

    /// Multiplies every row (last axis) of `a` elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_op(a, r, "mul_row", |x, y| x * y)?;
        let rg = self.rg(&[a, r]);
        Ok(self.push(t, Op::MulRow(a, r), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::Log(a), rg)
    }

    fn check_axis(&self, a: Var, axis: usize, name: &'static str) -> Result<()> {
        if axis >= self.value(a).rank() {
            return Err(HadError::shape(name, self.shape(a), &[axis]));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        if inner == 1 {
            for row in out.chunks_exact_mut(len.max(1)) {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            }
        }
        for o in 0..if inner == 1 { 0 } else { outer } {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a, axis), rg))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: F) -> Result<Var> {
        self.check_axis(a, axis, "layer_norm")?;
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        let n = F::from_usize(len).expect("len");
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| src[idx(j)]).sum::<F>() / n;
                let var = (0..len).map(|j| (src[idx(j)] - mean).powi(2)).sum::<F>() / n;
                let inv = F::one() / (var + eps).sqrt();
                for j in 0..len {
                    out[idx(j)] = (src[idx(j)] - mean) * inv;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LayerNorm(a, axis, eps), rg))
    }

    /// `x / (‖x‖₂ + eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: F) -> Result<Var> {
        self.check_axis(a, axis, "l2_normalize")?;
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| src[idx(j)].powi(2)).sum::<F>().sqrt();
                let denom = norm + eps;
                for j in 0..len {
                    out[idx(j)] = src[idx(j)] / denom;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::L2Normalize(a, axis, eps), rg))
    }

    fn reduce(&mut self, a: Var, axis: usize, name: &'static str, mean: bool) -> Result<Tensor<F>> {
        self.check_axis(a, axis, name)?;
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        if mean {
            if len == 0 {
                return Err(HadError::EmptyInput);
            }
            let n = F::from_usize(len).expect("len");
            out.iter_mut().for_each(|x| *x /= n);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.reduce(a, axis, "mean", true)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Mean(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.reduce(a, axis, "sum", false)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Sum(a, axis), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Selects rows (entries along axis 0); indices may repeat.
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(HadError::shape("gather", t.shape(), &[rows.len()]));
        }
        let n = t.shape()[0];
        let width: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(HadError::shape("gather", t.shape(), &[r]));
            }
            out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gather(a, rows.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(HadError::EmptyInput)?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(HadError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip_same(a, b, "mse", |x, y| (x - y) * (x - y))?;
        if d.is_empty() {
            return Err(HadError::EmptyInput);
        }
        let n = F::from_usize(d.len()).expect("len");
        let v = d.data().iter().copied().sum::<F>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (n × classes).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = t.dims2()?;
        if n != targets.len() {
            return Err(HadError::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        if n == 0 {
            return Err(HadError::EmptyInput);
        }
        let mut total = F::zero();
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(HadError::shape("cross_entropy", t.shape(), &[y]));
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            total += lse - row[y];
        }
        let v = total / F::from_usize(n).expect("len");
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy(logits, targets.to_vec()), rg))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<F>>, inputs: &[Var], output: Tensor<F>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(HadError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else {
                continue;
            };
            self.node_backward(node, g, lo)?;
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn node_backward(&self, node: &Node<F>, g: &[F], lo: &mut [Option<Vec<F>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // accumulation buffer for a parent, allocated on first use
        fn slot<'a, F: Scalar>(lo: &'a mut [Option<Vec<F>>], v: Var, len: usize) -> &'a mut Vec<F> {
            lo[v.0].get_or_insert_with(|| vec![F::zero(); len])
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2()?;
                let n = val(b).shape()[1];
                if wants(a) {
                    let da = slot(lo, a, m * k);
                    gemm(MatRef::new(g, m, n), MatRef::new(val(b).data(), k, n).t(), da, true);
                }
                if wants(b) {
                    let db = slot(lo, b, k * n);
                    gemm(MatRef::new(val(a).data(), m, k).t(), MatRef::new(g, m, n), db, true);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = val(a).dims2()?;
                let da = slot(lo, a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                if wants(a) {
                    slot(lo, a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if wants(b) {
                    slot(lo, b, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b).data();
                    slot(lo, a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (&x, &y))| *d += x * y);
                }
                if wants(b) {
                    let av = val(a).data();
                    slot(lo, b, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (&x, &y))| *d += x * y);
                }
            }
            &Op::Scale(a, c) => {
                slot(lo, a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += c * x);
            }
            &Op::AddRow(a, r) | &Op::MulRow(a, r) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let d = val(r).len();
                let rv = val(r).data();
                if wants(a) {
                    let da = slot(lo, a, g.len());
                    for (drow, grow) in da.chunks_mut(d.max(1)).zip(g.chunks(d.max(1))) {
                        for j in 0..grow.len() {
                            drow[j] += if is_mul { grow[j] * rv[j] } else { grow[j] };
                        }
                    }
                }
                if wants(r) {
                    let av = val(a).data();
                    let dr = slot(lo, r, d);
                    for (arow, grow) in av.chunks(d.max(1)).zip(g.chunks(d.max(1))) {
                        for j in 0..grow.len() {
                            dr[j] += if is_mul { grow[j] * arow[j] } else { grow[j] };
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = slot(lo, a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (F::one() - y[i]);
                }
            }
            &Op::Silu(a) => {
                let x = val(a).data();
                let da = slot(lo, a, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(x[i]);
                    da[i] += g[i] * s * (F::one() + x[i] * (F::one() - s));
                }
            }
            &Op::Exp(a) => {
                let y = node.value.data();
                let da = slot(lo, a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i];
                }
            }
            &Op::Log(a) => {
                let x = val(a).data();
                let da = slot(lo, a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] / x[i];
                }
            }
            &Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                let da = slot(lo, a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum::<F>();
                        for j in 0..len {
                            da[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            &Op::LayerNorm(a, axis, eps) => {
                let x = val(a).data();
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                let n = F::from_usize(len).expect("len");
                let da = slot(lo, a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mean = (0..len).map(|j| x[idx(j)]).sum::<F>() / n;
                        let var = (0..len).map(|j| (x[idx(j)] - mean).powi(2)).sum::<F>() / n;
                        let inv = F::one() / (var + eps).sqrt();
                        let g_mean = (0..len).map(|j| g[idx(j)]).sum::<F>() / n;
                        let gy_mean = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum::<F>() / n;
                        for j in 0..len {
                            da[idx(j)] += inv * (g[idx(j)] - g_mean - y[idx(j)] * gy_mean);
                        }
                    }
                }
            }
            &Op::L2Normalize(a, axis, eps) => {
                let x = val(a).data();
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                let da = slot(lo, a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let norm = (0..len).map(|j| x[idx(j)].powi(2)).sum::<F>().sqrt();
                        let denom = norm + eps;
                        let xg = (0..len).map(|j| x[idx(j)] * g[idx(j)]).sum::<F>();
                        // d/dx of x/(|x|+eps); the second term vanishes at x = 0
                        let coef = if norm > F::zero() {
                            xg / (denom * denom * norm)
                        } else {
                            F::zero()
                        };
                        for j in 0..len {
                            da[idx(j)] += g[idx(j)] / denom - x[idx(j)] * coef;
                        }
                    }
                }
            }
            &Op::Mean(a, axis) | &Op::Sum(a, axis) => {
                let (outer, len, inner) = split_axis(val(a).shape(), axis);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    F::one() / F::from_usize(len).expect("len")
                } else {
                    F::one()
                };
                let da = slot(lo, a, outer * len * inner);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            da[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                let n = val(a).len();
                slot(lo, a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Gather(a, rows) => {
                let t = val(*a);
                let width: usize = t.shape()[1..].iter().product();
                let da = slot(lo, *a, t.len());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        da[r * width + j] += g[i * width + j];
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        let dp = slot(lo, p, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            for (d, &x) in dp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    start += len;
                }
            }
            &Op::Reshape(a) => {
                slot(lo, a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let c = F::of(2.0) * g[0] / F::from_usize(av.len()).expect("len");
                if wants(a) {
                    let da = slot(lo, a, av.len());
                    for i in 0..av.len() {
                        da[i] += c * (av[i] - bv[i]);
                    }
                }
                if wants(b) {
                    let db = slot(lo, b, av.len());
                    for i in 0..av.len() {
                        db[i] -= c * (av[i] - bv[i]);
                    }
                }
            }
            Op::CrossEntropy(a, targets) => {
                let t = val(*a);
                let (n, c) = t.dims2()?;
                let scale = g[0] / F::from_usize(n).expect("len");
                let da = slot(lo, *a, n * c);
                for (i, &y) in targets.iter().enumerate() {
                    let row = t.row(i);
                    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let z = row.iter().map(|&x| (x - max).exp()).sum::<F>();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / z;
                        let onehot = if j == y { F::one() } else { F::zero() };
                        da[i * c + j] += scale * (p - onehot);
                    }
                }
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g)?;
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let (Some(gi), true) = (gi, wants(v)) {
                        let dv = slot(lo, v, gi.len());
                        dv.iter_mut().zip(&gi).for_each(|(d, &x)| *d += x);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to any node; `None` if unreached.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// Reached parameters and their gradients, in parameter-id order.
    pub fn params(&self) -> Vec<(ParamId, &[F])> {
        let mut out: Vec<(ParamId, &[F])> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
