//! Computation tape with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep. Gradients are
//! accumulated additively into per-node buffers.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, dot, LAYER_NORM_EPS};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
    Silu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    SumAll(Var),
    SumAxis { input: Var, outer: usize, len: usize, inner: usize },
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Slice { input: Var, outer: usize, len: usize, inner: usize, start: usize },
    GatherRows { input: Var, indices: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    SigmoidFocal { logits: Var, targets: Vec<f64>, gamma: f64, alpha: Option<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Boolean attention mask, row-major `[queries × keys]`, `true` = may attend.
pub type AttentionMask = Rc<[bool]>;

/// Records primitive operations for one forward pass.
///
/// Parameters are bound lazily from the backing [`ParamStore`]; frozen
/// parameters are bound as constants so they never receive gradient.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

static EMPTY_STORE: ParamStore = ParamStore::new();

impl Tape<'static> {
    /// A tape with no parameters, for free-standing computations.
    pub fn standalone() -> Self {
        Tape::new(&EMPTY_STORE)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store;
        let v = self.push(store.get(id).clone(), Op::Param, store.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = f(x, y);
            }
        } else {
            let (ta, tb) = (bcast_strides(&sa, &out_shape), bcast_strides(&sb, &out_shape));
            for_each_bcast(&out_shape, &ta, &tb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Gelu => kernels::gelu,
            Unary::Silu => |x| x * kernels::sigmoid(x),
            Unary::Relu => |x| x.max(0.0),
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same-shape product")
    }

    // ---------------------------------------------------------------- linalg

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    // ---------------------------------------------------------- normalizers

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c.max(1)) {
            kernels::softmax_row(row);
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let c = value.cols().max(1);
        let mut inv_std = Vec::with_capacity(value.numel() / c);
        for row in value.data_mut().chunks_mut(c) {
            // Shifted by the first entry so constant rows normalize to exact zeros.
            let shift = row[0];
            let mean = shift + row.iter().map(|x| x - shift).sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { input: a, inv_std }, rg)
    }

    // ------------------------------------------------------------ reductions

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: "sum_axis", axis, shape });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { input: a, outer, len, inner }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(a).get(axis).ok_or_else(|| TensorError::Axis {
            op: "mean_axis",
            axis,
            shape: self.shape(a).to_vec(),
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ----------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or(TensorError::ShapeMismatch { op: "concat", lhs: vec![], rhs: vec![] })?;
        if axis >= first.len() {
            return Err(TensorError::Axis { op: "concat", axis, shape: first });
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat { inputs: inputs.to_vec(), outer, inner, lens },
            rg,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: "slice", axis, shape });
        }
        if start > end || end > shape[axis] {
            return Err(TensorError::Index { op: "slice", index: end, len: shape[axis] });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { input: a, outer, len, inner, start }, rg))
    }

    /// Rows of a 2-D tensor, repetitions allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "gather_rows", lhs: shape, rhs: vec![] });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, len: shape[0] });
        }
        let value = self.value(a).gather_rows(indices);
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows { input: a, indices: indices.to_vec() }, rg))
    }

    // ------------------------------------------------------------- attention

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q: [Lq×d]`, `k, v: [Lk×d]`; head `h` uses columns `h·d/heads ..`.
    /// With `mask`, query `i` only sees keys `j` where `mask[i·Lk + j]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(TensorError::ShapeMismatch { op: "attention(q,k)", lhs: sq, rhs: sk });
        }
        if sv != sk {
            return Err(TensorError::ShapeMismatch { op: "attention(k,v)", lhs: sk, rhs: sv });
        }
        let (lq, d, lk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Heads { width: d, heads });
        }
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(TensorError::ShapeMismatch {
                    op: "attention(mask)",
                    lhs: vec![lq, lk],
                    rhs: vec![m.len()],
                });
            }
        }
        let h = d / heads;
        let scale = 1.0 / (h as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        for hd in 0..heads {
            let c0 = hd * h;
            for i in 0..lq {
                let qrow = &qd[i * d + c0..i * d + c0 + h];
                let prow = &mut probs[(hd * lq + i) * lk..(hd * lq + i + 1) * lk];
                let mut any = false;
                for (j, p) in prow.iter_mut().enumerate() {
                    if mask.is_some_and(|m| !m[i * lk + j]) {
                        *p = f64::NEG_INFINITY;
                    } else {
                        *p = dot(qrow, &kd[j * d + c0..j * d + c0 + h]) * scale;
                        any = true;
                    }
                }
                if !any {
                    return Err(TensorError::EmptyAttentionRow { row: i });
                }
                kernels::softmax_row(prow);
                let orow = &mut out[i * d + c0..i * d + c0 + h];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &vd[j * d + c0..j * d + c0 + h];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(vec![lq, d], out)?, Op::Attention { q, k, v, heads, probs }, rg))
    }

    // ---------------------------------------------------------------- losses

    fn check_targets(&self, op: &'static str, logits: Var, targets: &Tensor) -> Result<()> {
        if self.shape(logits) != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.check_targets("bce_with_logits", logits, targets)?;
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let loss: f64 = x
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| kernels::bce_logit(x, t))
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
            rg,
        ))
    }

    /// Mean sigmoid focal loss, `(1 - p_t)^gamma · BCE`, optionally α-balanced.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: &Tensor,
        gamma: f64,
        alpha: Option<f64>,
    ) -> Result<Var> {
        self.check_targets("sigmoid_focal", logits, targets)?;
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let loss: f64 = x
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| focal_terms(x, t, gamma, alpha).0)
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidFocal { logits, targets: targets.data().to_vec(), gamma, alpha },
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                let (ad, bd) = (av.data(), bv.data());
                let (rga, rgb) = (self.rg(a), self.rg(b));
                let same = av.shape() == bv.shape();
                let out_shape = node.value.shape();
                let ta = bcast_strides(av.shape(), out_shape);
                let tb = bcast_strides(bv.shape(), out_shape);
                // Read both operands before touching either gradient buffer,
                // `a` and `b` may be the same node.
                let mut ga = if rga { vec![0.0; ad.len()] } else { Vec::new() };
                let mut gb = if rgb { vec![0.0; bd.len()] } else { Vec::new() };
                let mut visit = |o: usize, ia: usize, ib: usize| {
                    let (x, y, go) = (ad[ia], bd[ib], g[o]);
                    let (da, db) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * y, go * x),
                        Binary::Div => (go / y, -go * x / (y * y)),
                    };
                    if rga {
                        ga[ia] += da;
                    }
                    if rgb {
                        gb[ib] += db;
                    }
                };
                if same {
                    for o in 0..g.len() {
                        visit(o, o, o);
                    }
                } else {
                    for_each_bcast(out_shape, &ta, &tb, visit);
                }
                if rga {
                    add_into(grads, a, &ga);
                }
                if rgb {
                    add_into(grads, b, &gb);
                }
            }
            Op::Unary(kind, a) => {
                if !self.rg(*a) {
                    return;
                }
                let x = self.value(*a).data();
                let buf = acc(grads, *a, x.len());
                for j in 0..x.len() {
                    let d = match kind {
                        Unary::Exp => out[j],
                        Unary::Log => 1.0 / x[j],
                        Unary::Sigmoid => out[j] * (1.0 - out[j]),
                        Unary::Tanh => 1.0 - out[j] * out[j],
                        Unary::Gelu => kernels::gelu_grad(x[j]),
                        Unary::Silu => {
                            let s = kernels::sigmoid(x[j]);
                            s * (1.0 + x[j] * (1.0 - s))
                        }
                        Unary::Relu => {
                            if x[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    buf[j] += g[j] * d;
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let buf = acc(grads, *a, g.len());
                    for (b, &x) in buf.iter_mut().zip(g) {
                        *b += c * x;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.rg(*a) {
                    add_into(grads, *a, g);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bd = self.value(*b).data();
                    let buf = acc(grads, *a, m * k);
                    kernels::matmul_nt(g, bd, buf, m, n, k);
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data();
                    let buf = acc(grads, *b, k * n);
                    kernels::matmul_tn(ad, g, buf, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let s = self.shape(*a);
                    let (m, n) = (s[0], s[1]);
                    let buf = acc(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let c = node.value.cols().max(1);
                    let buf = acc(grads, *a, out.len());
                    for ((y, gy), b) in out.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                        let s = dot(y, gy);
                        for j in 0..c {
                            b[j] += y[j] * (gy[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                if self.rg(*input) {
                    let c = node.value.cols().max(1);
                    let cf = c as f64;
                    let buf = acc(grads, *input, out.len());
                    for (r, ((y, gy), b)) in
                        out.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)).enumerate()
                    {
                        let mg = gy.iter().sum::<f64>() / cf;
                        let mgy = dot(gy, y) / cf;
                        for j in 0..c {
                            b[j] += inv_std[r] * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).numel();
                    let buf = acc(grads, *a, n);
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::SumAxis { input, outer, len, inner } => {
                if self.rg(*input) {
                    let buf = acc(grads, *input, outer * len * inner);
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for i in 0..*inner {
                                buf[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    if self.rg(v) {
                        let buf = acc(grads, v, outer * len * inner);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (b, &x) in buf[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *b += x;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, outer, len, inner, start } => {
                if self.rg(*input) {
                    let w = g.len() / (outer * inner).max(1);
                    let buf = acc(grads, *input, outer * len * inner);
                    for o in 0..*outer {
                        let base = o * len * inner + start * inner;
                        for (b, &x) in buf[base..base + w * inner].iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]) {
                            *b += x;
                        }
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                if self.rg(*input) {
                    let c = node.value.cols();
                    let n = self.value(*input).numel();
                    let buf = acc(grads, *input, n);
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.backprop_attention(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::BceWithLogits { logits, targets } => {
                if self.rg(*logits) {
                    let x = self.value(*logits).data();
                    let n = x.len() as f64;
                    let buf = acc(grads, *logits, x.len());
                    for j in 0..x.len() {
                        buf[j] += g[0] * (kernels::sigmoid(x[j]) - targets[j]) / n;
                    }
                }
            }
            Op::SigmoidFocal { logits, targets, gamma, alpha } => {
                if self.rg(*logits) {
                    let x = self.value(*logits).data();
                    let n = x.len() as f64;
                    let buf = acc(grads, *logits, x.len());
                    for j in 0..x.len() {
                        buf[j] += g[0] * focal_terms(x[j], targets[j], *gamma, *alpha).1 / n;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (sq, sk) = (self.shape(q), self.shape(k));
        let (lq, d, lk) = (sq[0], sq[1], sk[0]);
        let h = d / heads;
        let scale = 1.0 / (h as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (rq, rk, rv) = (self.rg(q), self.rg(k), self.rg(v));
        let mut gq = vec![0.0; if rq { lq * d } else { 0 }];
        let mut gk = vec![0.0; if rk { lk * d } else { 0 }];
        let mut gv = vec![0.0; if rv { lk * d } else { 0 }];
        let mut dp = vec![0.0; lk];
        for hd in 0..heads {
            let c0 = hd * h;
            for i in 0..lq {
                let go = &g[i * d + c0..i * d + c0 + h];
                let prow = &probs[(hd * lq + i) * lk..(hd * lq + i + 1) * lk];
                let mut s = 0.0;
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(go, &vd[j * d + c0..j * d + c0 + h]);
                    s += prow[j] * dp[j];
                    if rv {
                        for (x, &y) in gv[j * d + c0..j * d + c0 + h].iter_mut().zip(go) {
                            *x += prow[j] * y;
                        }
                    }
                }
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - s) * scale;
                    if rq {
                        let krow = &kd[j * d + c0..j * d + c0 + h];
                        for (x, &y) in gq[i * d + c0..i * d + c0 + h].iter_mut().zip(krow) {
                            *x += ds * y;
                        }
                    }
                    if rk {
                        let qrow = &qd[i * d + c0..i * d + c0 + h];
                        for (x, &y) in gk[j * d + c0..j * d + c0 + h].iter_mut().zip(qrow) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        if rq {
            add_into(grads, q, &gq);
        }
        if rk {
            add_into(grads, k, &gk);
        }
        if rv {
            add_into(grads, v, &gv);
        }
    }

    /// Parameter gradients aligned with the store; unbound, unused and frozen
    /// parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut out: Vec<Tensor> = self.store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for (&id, &var) in &self.bound {
            if !self.rg(var) {
                continue;
            }
            if let Some(g) = &grads.grads[var.0] {
                out[id.index()].data_mut().copy_from_slice(g);
            }
        }
        ParamGrads::new(out)
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    let buf = acc(grads, v, g.len());
    for (b, &x) in buf.iter_mut().zip(g) {
        *b += x;
    }
}

/// Returns (loss, dloss/dlogit) for one element of the sigmoid focal loss.
fn focal_terms(x: f64, t: f64, gamma: f64, alpha: Option<f64>) -> (f64, f64) {
    let p = kernels::sigmoid(x);
    let ce = kernels::bce_logit(x, t);
    let dce = p - t;
    let pt = p * t + (1.0 - p) * (1.0 - t);
    let dpt = p * (1.0 - p) * (2.0 * t - 1.0);
    let one_m = (1.0 - pt).max(0.0);
    let m = one_m.powf(gamma);
    let dm = if gamma == 0.0 { 0.0 } else { -gamma * one_m.powf(gamma - 1.0) * dpt };
    let w = alpha.map_or(1.0, |a| a * t + (1.0 - a) * (1.0 - t));
    (w * ce * m, w * (dce * m + ce * dm))
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for (i, o) in out.iter_mut().enumerate() {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[off + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
