use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);
static TANH_FAULT: AtomicBool = AtomicBool::new(false);

/// Replaces the tanh derivative with a wrong one, process-wide. Exists so the
/// gradient checker can be shown to catch a broken backward rule.
#[doc(hidden)]
pub fn inject_tanh_backward_fault(enabled: bool) {
    TANH_FAULT.store(enabled, Ordering::SeqCst);
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Outer { a: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    /// `c - x`
    RSubScalar(usize),
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    Row { table: usize, index: usize, width: usize },
    Softmax(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Clamp { x: usize, lo: T, hi: T },
    Sum(usize),
    Mean(usize),
    Bce { p: usize, targets: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations supporting one reverse pass.
///
/// Nodes are appended in evaluation order, so append order is a topological order.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the variables of that tape.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` when `var` does not
    /// require gradients or is not reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        let i = self.slot(var)?;
        Ok(&self.nodes[i].value)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        let i = self.slot(var)?;
        Ok(self.nodes[i].requires_grad)
    }

    fn slot(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::UnknownNode { index: var.index });
        }
        Ok(var.index)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    /// Matrix product with vector promotion: a rank-1 left operand is a row,
    /// a rank-1 right operand is a column, and the promoted axis is dropped
    /// from the result (so vector·vector is a dot product).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.slot(a)?, self.slot(b)?);
        let (sa, sb) = (self.shape(ia).to_vec(), self.shape(ib).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(mismatch()),
        };
        let (k2, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut shape = Vec::with_capacity(2);
        if sa.len() == 2 {
            shape.push(m);
        }
        if sb.len() == 2 {
            shape.push(n);
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            Op::MatMul { a: ia, b: ib, m, k, n },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// `w·x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let y = self.matmul(w, x)?;
        self.add(y, b)
    }

    /// Outer product of two vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.slot(a)?, self.slot(b)?);
        if self.shape(ia).len() != 1 || self.shape(ib).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer",
                lhs: self.shape(ia).to_vec(),
                rhs: self.shape(ib).to_vec(),
            });
        }
        let (av, bv) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = Vec::with_capacity(av.len() * bv.len());
        for &x in av {
            out.extend(bv.iter().map(|&y| x * y));
        }
        let value = Tensor::new(vec![av.len(), bv.len()], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::Outer { a: ia, b: ib }, value, rg))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.slot(a)?, self.slot(b)?);
        if self.shape(ia) != self.shape(ib) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(ia).to_vec(),
                rhs: self.shape(ib).to_vec(),
            });
        }
        let data = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(ia).to_vec(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(op(ia, ib), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let i = self.slot(x)?;
        let value = self.nodes[i].value.map(f);
        let rg = self.rg(i);
        Ok(self.push(op(i), value, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::MulScalar(i, c))
    }

    /// `c - x`, elementwise.
    pub fn rsub_scalar(&mut self, c: T, x: Var) -> Result<Var> {
        self.unary(x, |v| c - v, Op::RSubScalar)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu)
    }

    /// Clamps into `[lo, hi]`; the gradient is blocked outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, |v| v.max(lo).min(hi), |i| Op::Clamp { x: i, lo, hi })
    }

    /// Softmax along the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let i = self.slot(x)?;
        let src = &self.nodes[i].value;
        let cols = src.cols();
        let mut out = src.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(i);
        Ok(self.push(Op::Softmax(i), value, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.slot(x)?;
        let total = self.nodes[i].value.data().iter().copied().sum();
        let rg = self.rg(i);
        Ok(self.push(Op::Sum(i), Tensor::scalar(total), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.slot(x)?;
        let src = self.nodes[i].value.data();
        let total: T = src.iter().copied().sum();
        let n = T::from_usize(src.len()).unwrap_or_else(T::one);
        let rg = self.rg(i);
        Ok(self.push(Op::Mean(i), Tensor::scalar(total / n), rg))
    }

    /// Concatenates along the last axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let idx = parts
            .iter()
            .map(|&p| self.slot(p))
            .collect::<Result<Vec<_>>>()?;
        let first = self.shape(idx[0]).to_vec();
        let lead: Vec<usize> = if first.len() <= 1 {
            Vec::new()
        } else {
            first[..first.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.shape(i);
            let (l, w) = if s.len() <= 1 {
                (&[][..], s.first().copied().unwrap_or(1))
            } else {
                (&s[..s.len() - 1], s[s.len() - 1])
            };
            if l != lead.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = idx.iter().any(|&i| self.rg(i));
        let parts = idx.into_iter().zip(widths).collect();
        Ok(self.push(Op::Concat { parts, rows }, Tensor::new(shape, out)?, rg))
    }

    /// Row `index` of a matrix (a vector), or element `index` of a vector (a scalar).
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let i = self.slot(table)?;
        let src = &self.nodes[i].value;
        let (n_rows, width, shape) = match src.rank() {
            1 => (src.len(), 1, Vec::new()),
            2 => (src.shape()[0], src.shape()[1], vec![src.shape()[1]]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "row",
                    lhs: src.shape().to_vec(),
                    rhs: vec![index],
                })
            }
        };
        if index >= n_rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index,
                bound: n_rows,
            });
        }
        let data = src.data()[index * width..(index + 1) * width].to_vec();
        let rg = self.rg(i);
        Ok(self.push(
            Op::Row {
                table: i,
                index,
                width,
            },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    /// Elementwise binary cross-entropy of probabilities `p` against constant targets.
    pub fn bce(&mut self, p: Var, targets: &[T]) -> Result<Var> {
        let i = self.slot(p)?;
        let src = &self.nodes[i].value;
        if src.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: src.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut out = Vec::with_capacity(targets.len());
        for (&pv, &y) in src.data().iter().zip(targets) {
            if pv <= T::zero() || pv >= T::one() {
                let bad = if pv <= T::zero() { pv } else { T::one() - pv };
                return Err(Error::LogDomain {
                    op: "bce",
                    value: bad.as_f64(),
                });
            }
            out.push(-(y * pv.ln() + (T::one() - y) * (T::one() - pv).ln()));
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(i);
        Ok(self.push(
            Op::Bce {
                p: i,
                targets: targets.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. A tape supports exactly one reverse pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let root = self.slot(loss)?;
        if self.consumed {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[root].value.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));
        }

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |i: usize| self.nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += gd[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += x * gd[i * n + j];
                            }
                        }
                    }
                });
            }
            &Op::Outer { a, b } => {
                let (av, bv) = (val(a), val(b));
                let n = bv.len();
                acc(a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        let row = &gd[i * n..(i + 1) * n];
                        *d += row.iter().zip(bv).map(|(&g, &y)| g * y).sum::<T>();
                    }
                });
                acc(b, &mut |db| {
                    for (i, &x) in av.iter().enumerate() {
                        for (d, &g) in db.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *d += x * g;
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, gd));
                acc(b, &mut |d| add_into(d, gd));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, gd));
                acc(b, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &g)| *x -= g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| {
                    for ((x, &g), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *x += g * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, &g), &y) in d.iter_mut().zip(gd).zip(av) {
                        *x += g * y;
                    }
                });
            }
            &Op::AddScalar(a) => acc(a, &mut |d| add_into(d, gd)),
            &Op::MulScalar(a, c) => acc(a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &g)| *x += g * c)),
            &Op::RSubScalar(a) => acc(a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &g)| *x -= g)),
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(i, w) in parts {
                    acc(i, &mut |d| {
                        for r in 0..*rows {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            add_into(&mut d[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Row { table, index, width } => {
                acc(table, &mut |d| add_into(&mut d[index * width..(index + 1) * width], gd));
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum();
                        for ((x, &g), &v) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += v * (g - dot);
                        }
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                let faulty = TANH_FAULT.load(Ordering::Relaxed);
                acc(a, &mut |d| {
                    for ((x, &g), &v) in d.iter_mut().zip(gd).zip(y) {
                        *x += if faulty { g * (T::one() - v) } else { g * (T::one() - v * v) };
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |d| {
                    for ((x, &g), &v) in d.iter_mut().zip(gd).zip(y) {
                        *x += g * v * (T::one() - v);
                    }
                });
            }
            &Op::Relu(a) => {
                let input = val(a);
                acc(a, &mut |d| {
                    for ((x, &g), &v) in d.iter_mut().zip(gd).zip(input) {
                        if v > T::zero() {
                            *x += g;
                        }
                    }
                });
            }
            &Op::Clamp { x: a, lo, hi } => {
                let input = val(a);
                acc(a, &mut |d| {
                    for ((x, &g), &v) in d.iter_mut().zip(gd).zip(input) {
                        if v >= lo && v <= hi {
                            *x += g;
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let g0 = gd[0];
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g0));
            }
            &Op::Mean(a) => {
                let n = T::from_usize(self.nodes[a].value.len()).unwrap_or_else(T::one);
                let g0 = gd[0] / n;
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Bce { p, targets } => {
                let pv = val(*p);
                acc(*p, &mut |d| {
                    for (((x, &g), &pr), &y) in d.iter_mut().zip(gd).zip(pv).zip(targets) {
                        *x += g * (-y / pr + (T::one() - y) / (T::one() - pr));
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
