use std::cell::{Ref, RefCell};
use std::sync::Arc;

use rand::Rng;

use super::params::ParamSet;
use super::tensor::{Result, Tensor, TensorError};
use crate::rng;
use crate::scalar::Real;
use crate::sparse::Csr;

/// Recorded operation. Indices refer to earlier tape nodes, so recording
/// order is a topological order.
enum Op<T: Real> {
    Constant,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    ScalarMul(usize, T),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColMean(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Column(usize, usize),
    Transpose(usize),
    BroadcastRows(usize),
    GatherRows(usize, Vec<usize>),
    Aggregate(usize, Arc<Csr>, Vec<T>),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Artanh(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    L2NormRows(usize),
    ClampMin(usize, T),
    ClipRowNorm(usize, T),
    SoftmaxRows(usize),
    Dropout(usize, Vec<T>),
    /// Normalized per-entry weights and targets.
    BceWithLogits(usize, Vec<T>, Vec<T>),
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Constant | Param(_) => Vec::new(),
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Hadamard(a, b) | AddRow(a, b) | MulCol(a, b) => vec![*a, *b],
            ConcatRows(ids) | ConcatCols(ids) => ids.clone(),
            ScalarMul(a, _) | AddScalar(a) | Sum(a) | Mean(a) | RowSum(a) | ColMean(a) | Column(a, _)
            | Transpose(a) | BroadcastRows(a) | GatherRows(a, _) | Aggregate(a, _, _) | Relu(a) | Sigmoid(a)
            | Tanh(a) | Artanh(a) | Exp(a) | Log(a) | Recip(a) | L2NormRows(a) | ClampMin(a, _)
            | ClipRowNorm(a, _) | SoftmaxRows(a) | Dropout(a, _) | BceWithLogits(a, _, _) => vec![*a],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    /// Some parameter lies upstream of this node.
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Values are rank-2 tensors; scalars are `[1, 1]`. [`Tape::backward`]
/// walks the record once in reverse and clears it, after which any `Var`
/// handed out earlier is stale.
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = matches!(op, Op::Param(_)) || op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Records a constant (no gradient flows into it). The tensor is
    /// reshaped to rank 2: rank-1 inputs become row vectors.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let (r, c) = (t.rows(), t.cols());
        self.push(Tensor::raw(r, c, t.into_data()), Op::Constant)
    }

    /// Records parameter `idx` of `params` as a differentiable leaf.
    pub fn param(&self, params: &ParamSet<T>, idx: usize) -> Var<'_, T> {
        let t = params.by_index(idx);
        let value = Tensor::raw(t.rows(), t.cols(), t.data().to_vec());
        self.push(value, Op::Param(idx))
    }

    /// Stacks the inputs vertically; all inputs must share a column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows: no inputs".into()))?;
        let cols = first.shape().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(p.id);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", first.shape(), p.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::raw(rows, cols, data), Op::ConcatRows(ids)))
    }

    /// Places the inputs side by side; all inputs must share a row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols: no inputs".into()))?;
        let rows = first.shape().0;
        for p in parts {
            if p.shape().0 != rows {
                return Err(mismatch("concat_cols", first.shape(), p.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape().1).sum();
        let mut data = Vec::with_capacity(rows * total);
        {
            let vals: Vec<_> = parts.iter().map(|p| self.value(p.id)).collect();
            for i in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(i));
                }
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::raw(rows, total, data), Op::ConcatCols(ids)))
    }

    /// Back-propagates from the scalar `loss`, adding (`+=`) gradients into
    /// the grad buffers of every parameter recorded with [`Tape::param`].
    /// The tape is cleared afterwards.
    pub fn backward(&self, loss: Var<'_, T>, params: &mut ParamSet<T>) -> Result<()> {
        let param_grads = {
            let nodes = self.nodes.borrow();
            if nodes.is_empty() {
                return Err(TensorError::Invalid("backward on an empty tape".into()));
            }
            let lv = &nodes[loss.id].value;
            if lv.numel() != 1 {
                return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
            }
            backward_pass(&nodes, loss.id)
        };
        self.nodes.borrow_mut().clear();
        for (idx, g) in param_grads {
            params.by_index_mut(idx).accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Drops every recorded node without computing gradients.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }
}

fn backward_pass<T: Real>(nodes: &[Node<T>], loss: usize) -> Vec<(usize, Vec<T>)> {
    let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss + 1);
    grads.resize_with(loss + 1, || None);
    grads[loss] = Some(vec![T::one()]);
    let mut out = Vec::new();

    // Returns the (zero-initialized on first touch) gradient buffer of `id`.
    fn buf<'g, T: Real>(
        grads: &'g mut [Option<Vec<T>>],
        nodes: &[Node<T>],
        id: usize,
    ) -> &'g mut Vec<T> {
        grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()])
    }

    for id in (0..=loss).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        if !node.needs_grad {
            continue;
        }
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(p) => out.push((*p, g)),
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                if nodes[*a].needs_grad {
                    // dA = G B^T, accumulated row by row against B^T.
                    let mut bt = vec![T::zero(); k * c];
                    for p in 0..k {
                        for j in 0..c {
                            bt[j * k + p] = bv.data()[p * c + j];
                        }
                    }
                    let ga = buf(&mut grads, nodes, *a);
                    for i in 0..r {
                        let gar = &mut ga[i * k..(i + 1) * k];
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let btr = &bt[j * k..(j + 1) * k];
                            gar.iter_mut().zip(btr).for_each(|(x, &v)| *x = *x + gij * v);
                        }
                    }
                }
                if nodes[*b].needs_grad {
                    let gb = buf(&mut grads, nodes, *b);
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            if aip == T::zero() {
                                continue;
                            }
                            let gbr = &mut gb[p * c..(p + 1) * c];
                            gbr.iter_mut().zip(gr).for_each(|(x, &v)| *x = *x + aip * v);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(buf(&mut grads, nodes, *a), &g);
                add_into(buf(&mut grads, nodes, *b), &g);
            }
            Op::Sub(a, b) => {
                add_into(buf(&mut grads, nodes, *a), &g);
                let gb = buf(&mut grads, nodes, *b);
                gb.iter_mut().zip(&g).for_each(|(x, &v)| *x = *x - v);
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[k] * bv.data()[k];
                }
                let gb = buf(&mut grads, nodes, *b);
                for (k, x) in gb.iter_mut().enumerate() {
                    *x = *x + g[k] * av.data()[k];
                }
            }
            Op::AddRow(a, b) => {
                add_into(buf(&mut grads, nodes, *a), &g);
                let c = y.cols();
                let gb = buf(&mut grads, nodes, *b);
                for (k, &v) in g.iter().enumerate() {
                    gb[k % c] = gb[k % c] + v;
                }
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (&nodes[*a].value, &nodes[*s].value);
                let c = y.cols();
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[k] * sv.data()[k / c];
                }
                let gs = buf(&mut grads, nodes, *s);
                for (k, &v) in g.iter().enumerate() {
                    gs[k / c] = gs[k / c] + v * av.data()[k];
                }
            }
            Op::ScalarMul(a, s) => {
                let ga = buf(&mut grads, nodes, *a);
                ga.iter_mut().zip(&g).for_each(|(x, &v)| *x = *x + *s * v);
            }
            Op::AddScalar(a) => add_into(buf(&mut grads, nodes, *a), &g),
            Op::Sum(a) => {
                let ga = buf(&mut grads, nodes, *a);
                ga.iter_mut().for_each(|x| *x = *x + g[0]);
            }
            Op::Mean(a) => {
                let ga = buf(&mut grads, nodes, *a);
                let w = g[0] / T::of(ga.len() as f64);
                ga.iter_mut().for_each(|x| *x = *x + w);
            }
            Op::RowSum(a) => {
                let c = nodes[*a].value.cols();
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[k / c];
                }
            }
            Op::ColMean(a) => {
                let (r, c) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let inv = T::one() / T::of(r as f64);
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[k % c] * inv;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &p in ids {
                    let n = nodes[p].value.numel();
                    add_into(buf(&mut grads, nodes, p), &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(ids) => {
                let (r, total) = (y.rows(), y.cols());
                let mut off = 0;
                for &p in ids {
                    let c = nodes[p].value.cols();
                    let gp = buf(&mut grads, nodes, p);
                    for i in 0..r {
                        for j in 0..c {
                            gp[i * c + j] = gp[i * c + j] + g[i * total + off + j];
                        }
                    }
                    off += c;
                }
            }
            Op::Column(a, j) => {
                let c = nodes[*a].value.cols();
                let ga = buf(&mut grads, nodes, *a);
                for (i, &v) in g.iter().enumerate() {
                    ga[i * c + j] = ga[i * c + j] + v;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let ga = buf(&mut grads, nodes, *a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let c = y.cols();
                let ga = buf(&mut grads, nodes, *a);
                for (k, &v) in g.iter().enumerate() {
                    ga[k % c] = ga[k % c] + v;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = y.cols();
                let ga = buf(&mut grads, nodes, *a);
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] = ga[src * c + j] + g[k * c + j];
                    }
                }
            }
            Op::Aggregate(a, csr, w) => {
                let c = y.cols();
                let ga = buf(&mut grads, nodes, *a);
                for i in 0..csr.num_rows() {
                    let gi = &g[i * c..(i + 1) * c];
                    for &j in std::iter::once(&i).chain(csr.row(i)) {
                        let dst = &mut ga[j * c..(j + 1) * c];
                        dst.iter_mut().zip(gi).for_each(|(x, &v)| *x = *x + w[i] * v);
                    }
                }
            }
            Op::Relu(a) => {
                let av = &nodes[*a].value;
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    if av.data()[k] > T::zero() {
                        *x = *x + g[k];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    let s = y.data()[k];
                    *x = *x + g[k] * s * (T::one() - s);
                }
            }
            Op::Tanh(a) => {
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    let t = y.data()[k];
                    *x = *x + g[k] * (T::one() - t * t);
                }
            }
            Op::Artanh(a) => {
                let av = &nodes[*a].value;
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    let u = av.data()[k];
                    *x = *x + g[k] / (T::one() - u * u);
                }
            }
            Op::Exp(a) => {
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[k] * y.data()[k];
                }
            }
            Op::Log(a) => {
                let av = &nodes[*a].value;
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[k] / av.data()[k];
                }
            }
            Op::Recip(a) => {
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    let r = y.data()[k];
                    *x = *x - g[k] * r * r;
                }
            }
            Op::L2NormRows(a) => {
                let av = &nodes[*a].value;
                let c = av.cols();
                let ga = buf(&mut grads, nodes, *a);
                for i in 0..av.rows() {
                    let n = y.data()[i];
                    if n > T::zero() {
                        for j in 0..c {
                            let k = i * c + j;
                            ga[k] = ga[k] + g[i] * av.data()[k] / n;
                        }
                    }
                }
            }
            Op::ClampMin(a, lo) => {
                let av = &nodes[*a].value;
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    if av.data()[k] >= *lo {
                        *x = *x + g[k];
                    }
                }
            }
            Op::ClipRowNorm(a, max) => {
                let av = &nodes[*a].value;
                let c = av.cols();
                let ga = buf(&mut grads, nodes, *a);
                for i in 0..av.rows() {
                    let xr = av.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n > *max {
                        let s = *max / n;
                        let proj = xr.iter().zip(gr).map(|(&x, &v)| x * v).sum::<T>() / (n * n);
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + s * (gr[j] - xr[j] * proj);
                        }
                    } else {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + gr[j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let ga = buf(&mut grads, nodes, *a);
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let dot = yr.iter().zip(gr).map(|(&s, &v)| s * v).sum::<T>();
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[k] * mask[k];
                }
            }
            Op::BceWithLogits(a, targets, weights) => {
                let av = &nodes[*a].value;
                let ga = buf(&mut grads, nodes, *a);
                for (k, x) in ga.iter_mut().enumerate() {
                    let s = sigmoid(av.data()[k]);
                    *x = *x + g[0] * weights[k] * (s - targets[k]);
                }
            }
        }
    }
    out
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(x, &v)| *x = *x + v);
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// `(rows, cols)` of the recorded value.
    pub fn shape(&self) -> (usize, usize) {
        let v = self.tape.value(self.id);
        (v.rows(), v.cols())
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    /// Scalar value of a one-element result.
    pub fn item(&self) -> T {
        self.tape.value(self.id).data()[0]
    }

    fn same_tape(&self, other: &Self) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn map(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let v = self.tape.value(self.id).map(f);
        self.tape.push(v, op)
    }

    fn zip(self, other: Self, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_tape(&other);
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        if a.shape() != b.shape() {
            return Err(mismatch(name, (a.rows(), a.cols()), (b.rows(), b.cols())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::raw(a.rows(), a.cols(), data))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (r, k, c) = (a.rows(), a.cols(), b.cols());
            if b.rows() != k {
                return Err(mismatch("matmul", (r, k), (b.rows(), c)));
            }
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                let orow = &mut out[i * c..(i + 1) * c];
                for p in 0..k {
                    let aip = a.data()[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b.data()[p * c..(p + 1) * c];
                    orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o = *o + aip * bv);
                }
            }
            Tensor::raw(r, c, out)
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn hadamard(self, other: Self) -> Result<Self> {
        let v = self.zip(other, "hadamard", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Hadamard(self.id, other.id)))
    }

    /// Adds the row vector `bias` (`[1, c]`) to every row.
    pub fn add_row(self, bias: Self) -> Result<Self> {
        self.same_tape(&bias);
        let v = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(bias.id);
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(mismatch("add_row", (a.rows(), a.cols()), (b.rows(), b.cols())));
            }
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| x + b.data()[k % c])
                .collect();
            Tensor::raw(a.rows(), c, data)
        };
        Ok(self.tape.push(v, Op::AddRow(self.id, bias.id)))
    }

    /// Scales row `i` by `s[i]` where `s` is a column vector `[r, 1]`.
    pub fn mul_col(self, s: Self) -> Result<Self> {
        self.same_tape(&s);
        let v = {
            let a = self.tape.value(self.id);
            let sv = self.tape.value(s.id);
            if sv.cols() != 1 || sv.rows() != a.rows() {
                return Err(mismatch("mul_col", (a.rows(), a.cols()), (sv.rows(), sv.cols())));
            }
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| x * sv.data()[k / c])
                .collect();
            Tensor::raw(a.rows(), c, data)
        };
        Ok(self.tape.push(v, Op::MulCol(self.id, s.id)))
    }

    /// Divides row `i` by `s[i]`.
    pub fn div_col(self, s: Self) -> Result<Self> {
        self.mul_col(s.recip()?)
    }

    pub fn scalar_mul(self, k: T) -> Self {
        self.map(Op::ScalarMul(self.id, k), |x| x * k)
    }

    pub fn add_scalar(self, k: T) -> Self {
        self.map(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn neg(self) -> Self {
        self.scalar_mul(-T::one())
    }

    pub fn sum(self) -> Self {
        let s = self.tape.value(self.id).data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = {
            let a = self.tape.value(self.id);
            let n = T::of(a.numel() as f64);
            a.data().iter().copied().sum::<T>() / n
        };
        self.tape.push(Tensor::scalar(v), Op::Mean(self.id))
    }

    /// Per-row sum, `[r, c] -> [r, 1]`.
    pub fn rowsum(self) -> Self {
        let v = {
            let a = self.tape.value(self.id);
            let data = (0..a.rows()).map(|i| a.row(i).iter().copied().sum()).collect();
            Tensor::raw(a.rows(), 1, data)
        };
        self.tape.push(v, Op::RowSum(self.id))
    }

    /// Per-row dot product of two equally shaped matrices, `[r, 1]`.
    pub fn row_dot(self, other: Self) -> Result<Self> {
        Ok(self.hadamard(other)?.rowsum())
    }

    /// Column means, `[r, c] -> [1, c]`.
    pub fn col_mean(self) -> Result<Self> {
        let v = {
            let a = self.tape.value(self.id);
            if a.rows() == 0 {
                return Err(TensorError::Invalid("col_mean of zero rows".into()));
            }
            let (r, c) = (a.rows(), a.cols());
            let mut out = vec![T::zero(); c];
            for i in 0..r {
                out.iter_mut().zip(a.row(i)).for_each(|(o, &x)| *o = *o + x);
            }
            let inv = T::one() / T::of(r as f64);
            out.iter_mut().for_each(|o| *o = *o * inv);
            Tensor::raw(1, c, out)
        };
        Ok(self.tape.push(v, Op::ColMean(self.id)))
    }

    /// Column `j` as `[r, 1]`.
    pub fn column(self, j: usize) -> Result<Self> {
        let v = {
            let a = self.tape.value(self.id);
            if j >= a.cols() {
                return Err(TensorError::Invalid(format!(
                    "column {j} out of range for {} columns",
                    a.cols()
                )));
            }
            let data = (0..a.rows()).map(|i| a.get(i, j)).collect();
            Tensor::raw(a.rows(), 1, data)
        };
        Ok(self.tape.push(v, Op::Column(self.id, j)))
    }

    pub fn transpose(self) -> Self {
        let v = {
            let a = self.tape.value(self.id);
            let (r, c) = (a.rows(), a.cols());
            let mut data = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::raw(c, r, data)
        };
        self.tape.push(v, Op::Transpose(self.id))
    }

    /// Repeats a row vector `n` times, `[1, c] -> [n, c]`.
    pub fn broadcast_rows(self, n: usize) -> Result<Self> {
        let v = {
            let a = self.tape.value(self.id);
            if a.rows() != 1 {
                return Err(mismatch("broadcast_rows", (a.rows(), a.cols()), (1, a.cols())));
            }
            let data = a.data().repeat(n);
            Tensor::raw(n, a.cols(), data)
        };
        Ok(self.tape.push(v, Op::BroadcastRows(self.id)))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Self> {
        let v = {
            let a = self.tape.value(self.id);
            let c = a.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= a.rows() {
                    return Err(TensorError::Invalid(format!(
                        "gather_rows: index {i} out of range for {} rows",
                        a.rows()
                    )));
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::raw(idx.len(), c, data)
        };
        Ok(self.tape.push(v, Op::GatherRows(self.id, idx.to_vec())))
    }

    /// Neighborhood aggregation over a sparse pattern:
    /// `out_i = w_i * (x_i + sum_{j in N(i)} x_j)`.
    pub fn aggregate(self, adj: Arc<Csr>, row_weights: Vec<T>) -> Result<Self> {
        let v = {
            let a = self.tape.value(self.id);
            let (r, c) = (a.rows(), a.cols());
            if adj.num_rows() != r || row_weights.len() != r {
                return Err(mismatch("aggregate", (r, c), (adj.num_rows(), row_weights.len())));
            }
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                let orow = &mut out[i * c..(i + 1) * c];
                for &j in std::iter::once(&i).chain(adj.row(i)) {
                    orow.iter_mut().zip(a.row(j)).for_each(|(o, &x)| *o = *o + x);
                }
                orow.iter_mut().for_each(|o| *o = *o * row_weights[i]);
            }
            Tensor::raw(r, c, out)
        };
        Ok(self.tape.push(v, Op::Aggregate(self.id, adj, row_weights)))
    }

    pub fn relu(self) -> Self {
        self.map(Op::Relu(self.id), |x| x.max(T::zero()))
    }

    pub fn sigmoid(self) -> Self {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Self {
        self.map(Op::Tanh(self.id), |x| x.tanh())
    }

    /// Inverse hyperbolic tangent; every input must lie strictly in (-1, 1).
    pub fn artanh(self) -> Result<Self> {
        let worst = self.with_value(|a| {
            a.data()
                .iter()
                .copied()
                .fold(T::zero(), |m, x| if x.abs() > m.abs() { x } else { m })
        });
        if !(worst.abs() < T::one()) {
            return Err(TensorError::Domain {
                op: "artanh",
                value: worst.as_f64(),
                domain: "(-1, 1)",
            });
        }
        let half = T::of(0.5);
        Ok(self.map(Op::Artanh(self.id), |x| half * ((T::one() + x) / (T::one() - x)).ln()))
    }

    pub fn exp(self) -> Self {
        self.map(Op::Exp(self.id), |x| x.exp())
    }

    /// Natural logarithm; every input must be positive.
    pub fn log(self) -> Result<Self> {
        let min = self.with_value(|a| a.data().iter().copied().fold(T::infinity(), T::min));
        if !(min > T::zero()) && self.shape().0 * self.shape().1 > 0 {
            return Err(TensorError::Domain {
                op: "log",
                value: min.as_f64(),
                domain: "(0, inf)",
            });
        }
        Ok(self.map(Op::Log(self.id), |x| x.ln()))
    }

    /// Elementwise reciprocal; zero inputs are rejected.
    pub fn recip(self) -> Result<Self> {
        if self.with_value(|a| a.data().iter().any(|x| *x == T::zero())) {
            return Err(TensorError::Domain {
                op: "recip",
                value: 0.0,
                domain: "nonzero reals",
            });
        }
        Ok(self.map(Op::Recip(self.id), |x| T::one() / x))
    }

    /// Euclidean norm of each row, `[r, c] -> [r, 1]`. The gradient at a
    /// zero row is taken as zero.
    pub fn l2_norm_rows(self) -> Self {
        let v = {
            let a = self.tape.value(self.id);
            let data = (0..a.rows())
                .map(|i| a.row(i).iter().map(|&x| x * x).sum::<T>().sqrt())
                .collect();
            Tensor::raw(a.rows(), 1, data)
        };
        self.tape.push(v, Op::L2NormRows(self.id))
    }

    /// `max(x, lo)` elementwise.
    pub fn clamp_min(self, lo: T) -> Self {
        self.map(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    /// Rescales rows whose norm exceeds `max` onto the sphere of radius
    /// `max`; other rows pass through unchanged.
    pub fn clip_row_norm(self, max: T) -> Self {
        let v = {
            let a = self.tape.value(self.id);
            let c = a.cols();
            let mut data = a.data().to_vec();
            for i in 0..a.rows() {
                let row = &mut data[i * c..(i + 1) * c];
                let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                if n > max {
                    let s = max / n;
                    row.iter_mut().for_each(|x| *x = *x * s);
                }
            }
            Tensor::raw(a.rows(), c, data)
        };
        self.tape.push(v, Op::ClipRowNorm(self.id, max))
    }

    pub fn softmax_rows(self) -> Self {
        let v = {
            let a = self.tape.value(self.id);
            let c = a.cols();
            let mut data = Vec::with_capacity(a.numel());
            for i in 0..a.rows() {
                let row = a.row(i);
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
                let z: T = e.iter().copied().sum();
                data.extend(e.into_iter().map(|x| x / z));
            }
            Tensor::raw(a.rows(), c, data)
        };
        self.tape.push(v, Op::SoftmaxRows(self.id))
    }

    /// Inverted dropout: each entry is zeroed with probability `p` and
    /// survivors are scaled by `1 / (1 - p)`. The mask is a pure function
    /// of `seed`.
    pub fn dropout(self, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            let n = self.with_value(Tensor::numel);
            let mask = vec![T::one(); n];
            return Ok(self.map(Op::Dropout(self.id, mask), |x| x));
        }
        let (v, mask) = {
            let a = self.tape.value(self.id);
            let mut r = rng::rng_for(seed, &[rng::purpose::DROPOUT]);
            let keep = T::of(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..a.numel())
                .map(|_| if r.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            let data = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::raw(a.rows(), a.cols(), data), mask)
        };
        Ok(self.tape.push(v, Op::Dropout(self.id, mask)))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `targets`.
    pub fn bce_with_logits(self, targets: &[T]) -> Result<Self> {
        let w = vec![T::one(); targets.len()];
        self.bce_with_logits_weighted(targets, &w)
    }

    /// Weighted binary cross-entropy,
    /// `-sum_k w_k [t_k log s_k + (1 - t_k) log(1 - s_k)] / sum_k w_k`
    /// with `s = sigmoid(self)`, evaluated stably from the logits.
    pub fn bce_with_logits_weighted(self, targets: &[T], weights: &[T]) -> Result<Self> {
        let n = self.with_value(Tensor::numel);
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: vec![n],
                right: vec![targets.len(), weights.len()],
            });
        }
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(TensorError::Invalid("bce_with_logits: weights sum to zero".into()));
        }
        let w: Vec<T> = weights.iter().map(|&x| x / total).collect();
        let loss = self.with_value(|a| {
            a.data()
                .iter()
                .zip(targets)
                .zip(&w)
                .map(|((&x, &t), &wk)| wk * (softplus(x) - t * x))
                .sum::<T>()
        });
        Ok(self
            .tape
            .push(Tensor::scalar(loss), Op::BceWithLogits(self.id, targets.to_vec(), w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let out = a.matmul(i).unwrap().value();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_and_sigmoid_symmetry_points() {
        let tape = Tape::new();
        let s = tape.constant(t(&[vec![0.0, 0.0]])).softmax_rows().value();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let z = tape.constant(Tensor::scalar(0.0)).sigmoid().item();
        assert_eq!(z, 0.5);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(2, 3));
        let b = tape.constant(Tensor::<f64>::zeros(2, 3));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        let c = tape.constant(Tensor::<f64>::zeros(3, 2));
        assert!(a.add(c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn domain_errors_report_extremum() {
        let tape = Tape::new();
        let a = tape.constant(t(&[vec![0.2, -1.5, 0.9]]));
        match a.artanh() {
            Err(TensorError::Domain { op, value, .. }) => {
                assert_eq!(op, "artanh");
                assert_eq!(value, -1.5);
            }
            other => panic!("unexpected {other:?}"),
        }
        let b = tape.constant(t(&[vec![1.0, 0.0, 2.0]]));
        match b.log() {
            Err(TensorError::Domain { op, value, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(value, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_linear_and_square() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::row_vector(vec![1.0, 1.0, 1.0]));
        let tape = Tape::new();
        let x = tape.param(&params, 0);
        tape.backward(x.sum(), &mut params).unwrap();
        assert_eq!(params.get("x").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());

        let mut params = ParamSet::new();
        params.insert("x", Tensor::row_vector(vec![1.0, 2.0]));
        let x = tape.param(&params, 0);
        let loss = x.hadamard(x).unwrap().sum();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get("x").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::row_vector(vec![1.0, 2.0]));
        let tape = Tape::new();
        for _ in 0..2 {
            let x = tape.param(&params, 0);
            tape.backward(x.sum(), &mut params).unwrap();
        }
        assert_eq!(params.get("x").unwrap().grad().unwrap(), &[2.0, 2.0]);
        params.zero_grad();
        assert!(params.get("x").unwrap().grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::row_vector(vec![1.0, 2.0]));
        let tape = Tape::new();
        let x = tape.param(&params, 0);
        assert!(matches!(
            tape.backward(x, &mut params),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn dropout_zero_is_identity_and_seeded() {
        let tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, -2.0, 3.0, 4.0]]));
        assert_eq!(x.dropout(0.0, 7).unwrap().value(), x.value());
        let a = x.dropout(0.5, 7).unwrap().value();
        let b = x.dropout(0.5, 7).unwrap().value();
        assert_eq!(a, b);
        for (&o, &i) in a.data().iter().zip(x.value().data()) {
            assert!(o == 0.0 || o == 2.0 * i);
        }
        assert!(x.dropout(1.0, 0).is_err());
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(4, 1));
        let l = x.bce_with_logits(&[1.0, 0.0, 1.0, 0.0]).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn aggregate_includes_self() {
        let tape = Tape::new();
        let (csr, _) = Csr::symmetric_from_pairs(3, &[(0, 1)]);
        let x = tape.constant(t(&[vec![1.0], vec![2.0], vec![5.0]]));
        let out = x.aggregate(Arc::new(csr), vec![0.5, 0.5, 1.0]).unwrap().value();
        assert_eq!(out.data(), &[1.5, 1.5, 5.0]);
    }
}
