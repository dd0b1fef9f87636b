//! Eager reverse-mode differentiation over a linear tape.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Nodes only reference earlier nodes, so walking the tape from the end
//! visits each node after all of its consumers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, gemm, Real};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, b_transposed: bool },
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MaxOverAxis { x: Var, argmax: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<Real>, rstd: Vec<Real> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<Real> },
    Pick { x: Var, idx: Vec<usize> },
    Euclidean { x: Var, y: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> Real {
        self.nodes[v.0].value.item()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Registers a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// A copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(Real) -> Real) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let t = self.unary(a, |x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// `x[.., n] + bias[n]`, the bias repeated over all leading positions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap();
        if tb.rank() != 1 || tb.numel() != n {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        if n > 0 {
            for chunk in data.chunks_mut(n) {
                for (d, b) in chunk.iter_mut().zip(tb.data()) {
                    *d += b;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let op = if b_transposed { "matmul_nt" } else { "matmul" };
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(shape_err(op, ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if b_transposed {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(shape_err(op, ta, tb));
        }
        let (rsb, csb) = if b_transposed {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            rsb,
            csb,
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b, b_transposed }, ng))
    }

    /// Matrix product `a[m,k] x b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] x b[n,k]^T` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, math::tanh);
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, math::sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, math::exp);
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, math::ln);
        let ng = self.ng(a);
        self.push(t, Op::Log(a), ng)
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<usize> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        if n == 0 {
            return Err(Error::EmptyAxis {
                op,
                axis: t.rank() - 1,
                shape: t.shape().to_vec(),
            });
        }
        Ok(n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.last_axis("softmax", a)?;
        let ta = self.value(a);
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.last_axis("log_softmax", a)?;
        let ta = self.value(a);
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = math::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::LogSoftmax(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Empty("mean input"));
        }
        let s = t.data().iter().sum::<Real>() / t.numel() as Real;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), ng))
    }

    /// Maximum over one axis; the axis is removed (rank-1 inputs give shape `[1]`).
    /// Gradient flows to the first maximal element on ties.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(Error::EmptyAxis {
                op: "max_over_axis",
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for j in 1..len {
                    let idx = base + j * inner;
                    if t.data()[idx] > t.data()[best] {
                        best = idx;
                    }
                }
                out.push(t.data()[best]);
                argmax.push(best);
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MaxOverAxis { x: a, argmax }, ng))
    }

    /// Row-wise maximum within consecutive row segments of a matrix:
    /// `x[N, c]`, segment lengths summing to `N` -> `[segments, c]`.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || lengths.iter().sum::<usize>() != t.rows() {
            return Err(Error::Shape {
                op: "segment_max",
                lhs: t.shape().to_vec(),
                rhs: vec![lengths.iter().sum()],
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(lengths.len() * c);
        let mut argmax = Vec::with_capacity(lengths.len() * c);
        let mut start = 0;
        for &len in lengths {
            if len == 0 {
                return Err(Error::EmptyAxis {
                    op: "segment_max",
                    axis: 0,
                    shape: t.shape().to_vec(),
                });
            }
            for j in 0..c {
                let mut best = start * c + j;
                for r in start + 1..start + len {
                    let idx = r * c + j;
                    if t.data()[idx] > t.data()[best] {
                        best = idx;
                    }
                }
                out.push(t.data()[best]);
                argmax.push(best);
            }
            start += len;
        }
        let t = Tensor::new(vec![lengths.len(), c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SegmentMax { x, argmax }, ng))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or(Error::Empty("concat input"))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::EmptyAxis {
                op: "concat",
                axis,
                shape: first.shape().to_vec(),
            });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in xs {
            let t = self.value(v);
            let ok = t.rank() == rank
                && t.shape()
                    .iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == first.shape()[i]);
            if !ok {
                return Err(shape_err("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Row lookup: `table[V, ..]` indexed by `ids` -> `[ids.len(), ..]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.rows();
        let c = t.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = ids.len();
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Embedding lookup; an alias of [`Tape::gather_rows`].
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if start + len > rows {
            return Err(Error::OutOfRange {
                what: "row slice end",
                index: start + len,
                size: rows,
            });
        }
        let ids: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &ids)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.shape()[1] {
            return Err(Error::OutOfRange {
                what: "column slice end",
                index: start + len,
                size: t.cols(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let n = self.last_axis("layer_norm", x)?;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = tx.data().to_vec();
        let mut rstd = Vec::with_capacity(tx.numel() / n);
        let mut out = Vec::with_capacity(tx.numel());
        for row in xhat.chunks_mut(n) {
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let r = 1.0 / math::sqrt(var + eps);
            rstd.push(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r;
                out.push(*v * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Per-row softmax cross-entropy `logits[n, V]` against class targets.
    /// Rows whose target is `None` contribute zero. Returns shape `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.last_axis("cross_entropy", logits)?;
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = t.data().to_vec();
        let mut out = Vec::with_capacity(targets.len());
        for (row, tgt) in probs.chunks_mut(v).zip(targets) {
            let lse = math::log_sum_exp(row);
            let loss = match *tgt {
                Some(k) if k >= v => {
                    return Err(Error::OutOfRange {
                        what: "target class",
                        index: k,
                        size: v,
                    })
                }
                Some(k) => lse - row[k],
                None => 0.0,
            };
            out.push(loss);
            row.iter_mut().for_each(|x| *x = math::exp(*x - lse));
        }
        let n = out.len();
        let t = Tensor::new(vec![n], out)?;
        let ng = self.ng(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-row element pick: `x[n, V]`, `idx[n]` -> `[n]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.rows() != idx.len() {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len());
        for (i, &k) in idx.iter().enumerate() {
            if k >= c {
                return Err(Error::OutOfRange {
                    what: "pick column",
                    index: k,
                    size: c,
                });
            }
            out.push(t.data()[i * c + k]);
        }
        let t = Tensor::new(vec![idx.len()], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise Euclidean distance `||x_i - y_i||_2`. Matrices give `[rows]`,
    /// vectors give `[1]`. The gradient at zero distance is taken as zero.
    pub fn euclidean_distance(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.shape() != ty.shape() || tx.rank() > 2 {
            return Err(shape_err("euclidean_distance", tx, ty));
        }
        let (rows, c) = if tx.rank() == 1 {
            (1, tx.numel())
        } else {
            (tx.rows(), tx.cols())
        };
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let s: Real = (0..c)
                .map(|j| {
                    let d = tx.data()[i * c + j] - ty.data()[i * c + j];
                    d * d
                })
                .sum();
            out.push(math::sqrt(s));
        }
        let t = Tensor::new(vec![rows], out)?;
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(t, Op::Euclidean { x, y }, ng))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else {
                continue;
            };
            self.backprop_node(i, g, lo);
        }
        Ok(Gradients {
            grads,
            params: self.params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[Real], lo: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(lo, *a, |ga| axpy(ga, g, 1.0));
                self.acc(lo, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(lo, *a, |ga| axpy(ga, g, 1.0));
                self.acc(lo, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(lo, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                self.acc(lo, *b, |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, s) => self.acc(lo, *a, |ga| axpy(ga, g, *s)),
            Op::AddBias(x, b) => {
                self.acc(lo, *x, |gx| axpy(gx, g, 1.0));
                self.acc(lo, *b, |gb| {
                    let n = gb.len();
                    for chunk in g.chunks(n) {
                        axpy(gb, chunk, 1.0);
                    }
                });
            }
            Op::MatMul { a, b, b_transposed } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                // op(B) element (p, j) lives at p * rsb + j * csb.
                let (rsb, csb) = if *b_transposed {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                self.acc(lo, *a, |ga| {
                    // dA = dC . op(B)^T
                    gemm(m, n, k, g, n as isize, 1, tb.data(), csb, rsb, 1.0, ga, k as isize, 1);
                });
                self.acc(lo, *b, |gb| {
                    // d op(B) = A^T . dC, written through op(B)'s strides.
                    gemm(k, m, n, ta.data(), 1, k as isize, g, n as isize, 1, 1.0, gb, rsb, csb);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                self.acc(lo, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(a) => self.acc(lo, *a, |ga| {
                for k in 0..ga.len() {
                    if y[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            }),
            Op::Tanh(a) => self.acc(lo, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Sigmoid(a) => self.acc(lo, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Exp(a) => self.acc(lo, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * y[k];
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(lo, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / x[k];
                    }
                })
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                self.acc(lo, *a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: Real = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let n = *node.value.shape().last().unwrap();
                self.acc(lo, *a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s: Real = dr.iter().sum();
                        for j in 0..n {
                            gr[j] += dr[j] - math::exp(yr[j]) * s;
                        }
                    }
                })
            }
            Op::Sum(a) => self.acc(lo, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => self.acc(lo, *a, |ga| {
                let s = g[0] / ga.len() as Real;
                ga.iter_mut().for_each(|x| *x += s);
            }),
            Op::MaxOverAxis { x, argmax } | Op::SegmentMax { x, argmax } => {
                self.acc(lo, *x, |gx| {
                    for (k, &src) in argmax.iter().enumerate() {
                        gx[src] += g[k];
                    }
                })
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let chunk = self.value(v).shape()[*axis] * inner;
                    self.acc(lo, v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            axpy(&mut gv[o * chunk..(o + 1) * chunk], src, 1.0);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Gather { table, ids } => {
                let c = self.value(*table).cols();
                self.acc(lo, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                self.acc(lo, *x, |gx| {
                    for (r, src) in g.chunks(len.max(1)).enumerate() {
                        if len > 0 {
                            axpy(&mut gx[r * c + start..r * c + start + len], src, 1.0);
                        }
                    }
                })
            }
            Op::Reshape(x) => self.acc(lo, *x, |gx| axpy(gx, g, 1.0)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                self.acc(lo, *x, |gx| {
                    for (r, (gr, dr)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = dr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d /= n as Real;
                        mean_dx /= n as Real;
                        for j in 0..n {
                            let d = dr[j] * gv[j];
                            gr[j] += rstd[r] * (d - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
                self.acc(lo, *gain, |gg| {
                    for (dr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += dr[j] * xr[j];
                        }
                    }
                });
                self.acc(lo, *bias, |gb| {
                    for dr in g.chunks(n) {
                        axpy(gb, dr, 1.0);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                self.acc(lo, *logits, |gl| {
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(k) = *tgt {
                            let row = &mut gl[r * v..(r + 1) * v];
                            let pr = &probs[r * v..(r + 1) * v];
                            for j in 0..v {
                                row[j] += g[r] * pr[j];
                            }
                            row[k] -= g[r];
                        }
                    }
                })
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).cols();
                self.acc(lo, *x, |gx| {
                    for (r, &k) in idx.iter().enumerate() {
                        gx[r * c + k] += g[r];
                    }
                })
            }
            Op::Euclidean { x, y: yv } => {
                let (tx, ty) = (self.value(*x), self.value(*yv));
                let c = if tx.rank() == 1 { tx.numel() } else { tx.cols() };
                let mut dir = vec![0.0; tx.numel()];
                for (r, &dist) in y.iter().enumerate() {
                    if dist > 0.0 {
                        for j in 0..c {
                            let k = r * c + j;
                            dir[k] = g[r] * (tx.data()[k] - ty.data()[k]) / dist;
                        }
                    }
                }
                self.acc(lo, *x, |gx| axpy(gx, &dir, 1.0));
                self.acc(lo, *yv, |gy| axpy(gy, &dir, -1.0));
            }
        }
    }

    fn acc(&self, lo: &mut [Option<Vec<Real>>], v: Var, f: impl FnOnce(&mut [Real])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut lo[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }
}

#[inline]
fn axpy(dst: &mut [Real], src: &[Real], a: Real) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - max);
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` did not
    /// influence the loss or does not require gradient.
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every registered parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[Real])> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.get(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[Real]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(t: &mut Tape, r: usize, c: usize, d: &[Real]) -> Var {
        let t2 = Tensor::matrix(r, c, d.to_vec()).unwrap();
        t.leaf(t2, true)
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let i = m(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = m(&mut t, 2, 1, &[3.0, 4.0]);
        let p = t.matmul(i, v).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 4.0]);
        let a = m(&mut t, 1, 2, &[1.0, 2.0]);
        let p = t.matmul(a, v).unwrap();
        assert_eq!(t.value(p).data(), &[11.0]);
        let z = m(&mut t, 3, 2, &[0.0; 6]);
        let p = t.matmul(z, i).unwrap();
        assert!(t.value(p).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 3, &[0.0; 6]);
        let b = m(&mut t, 2, 3, &[0.0; 6]);
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax(x).unwrap();
        for &p in t.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = t.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(t.softmax(e), Err(Error::EmptyAxis { .. })));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let uniform = t.constant(Tensor::zeros(&[1, 8]));
        let ce = t.cross_entropy(uniform, &[Some(3)]).unwrap();
        assert!((t.item(ce) - libm::log(8.0)).abs() < 1e-12);
        // Probability-space cross-entropy of a perfect one-hot prediction.
        let probs = t.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let lp = t.log(probs);
        let picked = t.pick(lp, &[1]).unwrap();
        assert_eq!(-t.item(picked), 0.0);
    }

    #[test]
    fn euclidean_self_is_zero() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
        let d = t.euclidean_distance(v, v).unwrap();
        assert_eq!(t.item(d), 0.0);
        let g = t.backward(d).unwrap();
        assert!(g.get(v).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_linear_and_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let d = t.detach(x);
        let y = t.mul(d, d).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut t = Tape::new();
        let x = m(&mut t, 3, 1, &[2.0, 2.0, 1.0]);
        let mx = t.max_over_axis(x, 0).unwrap();
        let s = t.sum(mx);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn segment_max_matches_per_segment_max() {
        let mut t = Tape::new();
        let x = m(&mut t, 5, 2, &[1.0, 5.0, 3.0, 0.0, -1.0, 2.0, 4.0, 4.0, 0.0, 9.0]);
        let s = t.segment_max(x, &[2, 3]).unwrap();
        assert_eq!(t.value(s).data(), &[3.0, 5.0, 4.0, 9.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(&mut t, 2, 1, &[5.0, 6.0]);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice_cols(c, 2, 1).unwrap();
        assert_eq!(t.value(s).data(), &[5.0, 6.0]);
    }
}
