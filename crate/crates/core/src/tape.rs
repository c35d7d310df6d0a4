//! Reverse-mode automatic differentiation over an append-only operation tape.
//!
//! Every op evaluates eagerly and records its inputs plus whatever it needs
//! for its backward rule. [`Tape::backward`] walks the records in reverse,
//! accumulating gradients additively, so a value used twice receives the sum
//! of both contributions. Parameters enter the tape through [`Tape::param`],
//! which caches one leaf per parameter; after backward their gradients are
//! read back with [`Tape::param_grads`] (or
//! [`ParamStore::accumulate_grads`](crate::params::ParamStore::accumulate_grads)).
//!
//! The training loop owns the tape and calls [`Tape::clear`] between steps.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    TransposeLastTwo(Var),
    Reshape(Var),
    Sum(Var),
    SoftmaxNll {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "split",
            Op::MeanAxis { .. } => "mean_over_axis",
            Op::TransposeLastTwo(..) => "transpose_last_two",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::SoftmaxNll { .. } => "softmax_nll",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<ParamId>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Clone)]
pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
    #[cfg(debug_assertions)]
    first_non_finite: Option<usize>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
            #[cfg(debug_assertions)]
            first_non_finite: None,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        #[cfg(debug_assertions)]
        {
            self.first_non_finite = None;
        }
    }

    fn push(&mut self, mut value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad && self.grad_enabled);
        #[cfg(debug_assertions)]
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an input tensor. `requires_grad` makes its gradient available
    /// through [`Tape::grad`] after backward.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::from_vec(t.shape(), t.data().to_vec()).expect("valid parameter");
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[S])> + '_ {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.nodes[v.0].value.grad().map(|g| (id, g)))
    }

    /// First recorded value holding a NaN or infinity, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        #[cfg(debug_assertions)]
        let found = self.first_non_finite;
        #[cfg(not(debug_assertions))]
        let found = self.nodes.iter().position(|n| !n.value.is_finite());
        found.map(|i| (i, self.nodes[i].op.name()))
    }

    // ---- forward ops ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * p];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, p], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[..., D] + bias[D]`, the only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::from_vec(self.shape(x), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let t = Tensor::from_vec(self.shape(x), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let out = kernels::softmax_rows(self.value(x).data(), cols);
        let t = Tensor::from_vec(self.shape(x), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    /// Normalises each last-axis vector to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let dn = S::from_usize(d);
        let mut out = vec![S::zero(); xs.len()];
        let mut xhat = vec![S::zero(); xs.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Size {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let block = ext * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `[start, start + len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "split",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Size {
                op: "split",
                detail: alloc::format!(
                    "range {start}..{} outside axis extent {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::from_vec(&oshape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { input: x, axis, start }, rg))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis {
                op: "split",
                axis,
                rank,
            });
        }
        let total: usize = sizes.iter().sum();
        if total != self.shape(x)[axis] {
            return Err(Error::Size {
                op: "split",
                detail: alloc::format!(
                    "sizes {sizes:?} sum to {total}, axis extent is {}",
                    self.shape(x)[axis]
                ),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Mean over `axis`, removing it. A rank-1 input reduces to shape `[1]`.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "mean_over_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let n = S::from_usize(ext);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in &mut out {
            *v /= n;
        }
        let mut oshape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &e)| e)
            .collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let t = Tensor::from_vec(&oshape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanAxis { x, axis }, rg))
    }

    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        if rank < 2 {
            return Err(Error::Axis {
                op: "transpose_last_two",
                axis: 1,
                rank,
            });
        }
        let (r, c) = (shape[rank - 2], shape[rank - 1]);
        let batch = shape[..rank - 2].iter().product();
        let mut out = vec![S::zero(); shape.iter().product()];
        kernels::transpose_last_two(self.value(x).data(), &mut out, batch, r, c);
        let mut oshape = shape;
        oshape.swap(rank - 2, rank - 1);
        let t = Tensor::from_vec(&oshape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::TransposeLastTwo(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Mean over rows of `-log p̃[target]`, where
    /// `p̃_j = w_j e^{z_j} / Σ_k w_k e^{z_k}` and `w` defaults to all ones.
    ///
    /// Gradient to `z_k` is `(p̃_k - y_k) / B`, which is exactly zero for a
    /// non-target class with `w_k = 0`.
    pub fn softmax_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[S]>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("softmax_nll", &shape, &[targets.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange { target: t, classes: c });
        }
        if let Some(w) = weights {
            if w.len() != b * c {
                return Err(Error::shape("softmax_nll weights", &shape, &[w.len()]));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![S::zero(); b * c];
        let mut total = S::zero();
        for r in 0..b {
            let zr = &z[r * c..(r + 1) * c];
            let pr = &mut probs[r * c..(r + 1) * c];
            let max = match weights {
                None => zr.iter().copied().fold(S::neg_infinity(), S::max),
                Some(w) => zr
                    .iter()
                    .zip(&w[r * c..(r + 1) * c])
                    .filter(|&(_, &wk)| wk > S::zero())
                    .map(|(&zk, _)| zk)
                    .fold(S::neg_infinity(), S::max),
            };
            let mut denom = S::zero();
            for k in 0..c {
                let e = (zr[k] - max).libm_exp();
                pr[k] = match weights {
                    None => e,
                    Some(w) => w[r * c + k] * e,
                };
                denom += pr[k];
            }
            for p in pr.iter_mut() {
                *p /= denom;
            }
            total += denom.libm_ln() - (zr[targets[r]] - max);
        }
        let loss = total / S::from_usize(b);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxNll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of every `requires_grad` value reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[S::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(g) = node.value.grad() else {
                continue;
            };
            backward_node(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn acc<S: Real>(nodes: &mut [Node<S>], v: Var, delta: &[S]) {
    let t = &mut nodes[v.0].value;
    if t.requires_grad() {
        t.accumulate_grad(delta);
    }
}

fn wants<S: Real>(nodes: &[Node<S>], v: Var) -> bool {
    nodes[v.0].value.requires_grad()
}

fn backward_node<S: Real>(nodes: &mut [Node<S>], op: &Op<S>, out: &Tensor<S>, g: &[S]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let p = nodes[b.0].value.shape()[1];
            if wants(nodes, *a) {
                let mut da = vec![S::zero(); m * k];
                kernels::matmul_nt_acc(g, nodes[b.0].value.data(), &mut da, m, k, p);
                acc(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                let mut db = vec![S::zero(); k * p];
                kernels::matmul_tn_acc(nodes[a.0].value.data(), g, &mut db, m, k, p);
                acc(nodes, *b, &db);
            }
        }
        Op::Add(a, b) => {
            acc(nodes, *a, g);
            acc(nodes, *b, g);
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let d: Vec<S> = g
                    .iter()
                    .zip(nodes[b.0].value.data())
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                acc(nodes, *a, &d);
            }
            if wants(nodes, *b) {
                let d: Vec<S> = g
                    .iter()
                    .zip(nodes[a.0].value.data())
                    .map(|(&gv, &x)| gv * x)
                    .collect();
                acc(nodes, *b, &d);
            }
        }
        Op::AddBias(x, bias) => {
            acc(nodes, *x, g);
            if wants(nodes, *bias) {
                let d = out.cols();
                let mut db = vec![S::zero(); d];
                for row in g.chunks_exact(d) {
                    for (o, &gv) in db.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
                acc(nodes, *bias, &db);
            }
        }
        Op::Scale(x, c) => {
            let d: Vec<S> = g.iter().map(|&gv| gv * *c).collect();
            acc(nodes, *x, &d);
        }
        Op::Relu(x) => {
            let d: Vec<S> = g
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| if y > S::zero() { gv } else { S::zero() })
                .collect();
            acc(nodes, *x, &d);
        }
        Op::SoftmaxRows(x) => {
            let cols = out.cols();
            let mut d = vec![S::zero(); g.len()];
            for ((gr, yr), dr) in g
                .chunks_exact(cols)
                .zip(out.data().chunks_exact(cols))
                .zip(d.chunks_exact_mut(cols))
            {
                let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = y * (gv - dot);
                }
            }
            acc(nodes, *x, &d);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = out.cols();
            let dn = S::from_usize(d);
            if wants(nodes, *x) {
                let gvals = nodes[gain.0].value.data();
                let mut dx = vec![S::zero(); g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = S::zero();
                    let mut sum_dh_h = S::zero();
                    for c in 0..d {
                        let dh = gr[c] * gvals[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    for c in 0..d {
                        let dh = gr[c] * gvals[c];
                        dx[r * d + c] = rs / dn * (dn * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                acc(nodes, *x, &dx);
            }
            if wants(nodes, *gain) || wants(nodes, *bias) {
                let mut dg = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for c in 0..d {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                }
                acc(nodes, *gain, &dg);
                acc(nodes, *bias, &db);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let ext = nodes[v.0].value.shape()[*axis];
                if wants(nodes, v) {
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    acc(nodes, v, &d);
                }
                offset += ext;
            }
        }
        Op::Slice { input, axis, start } => {
            if wants(nodes, *input) {
                let (outer, ext, inner) = axis_split(nodes[input.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                let buf = nodes[input.0].value.grad_buffer();
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (dst, &s) in buf[base..base + len * inner].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
            }
        }
        Op::MeanAxis { x, axis } => {
            if wants(nodes, *x) {
                let (outer, ext, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let n = S::from_usize(ext);
                let buf = nodes[x.0].value.grad_buffer();
                for o in 0..outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        for (dst, &gv) in buf[base..base + inner].iter_mut().zip(gs) {
                            *dst += gv / n;
                        }
                    }
                }
            }
        }
        Op::TransposeLastTwo(x) => {
            let s = out.shape();
            let rank = s.len();
            // out is [.., c, r]; transposing back yields [.., r, c]
            let (c, r) = (s[rank - 2], s[rank - 1]);
            let batch = s[..rank - 2].iter().product();
            let mut d = vec![S::zero(); g.len()];
            kernels::transpose_last_two(g, &mut d, batch, c, r);
            acc(nodes, *x, &d);
        }
        Op::Reshape(x) => acc(nodes, *x, g),
        Op::Sum(x) => {
            let n = nodes[x.0].value.numel();
            let d = vec![g[0]; n];
            acc(nodes, *x, &d);
        }
        Op::SoftmaxNll {
            logits,
            targets,
            probs,
        } => {
            let c = nodes[logits.0].value.cols();
            let scale = g[0] / S::from_usize(targets.len());
            let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * c + t] -= scale;
            }
            acc(nodes, *logits, &d);
        }
    }
}
