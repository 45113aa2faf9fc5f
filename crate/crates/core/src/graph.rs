//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough context to propagate gradients. Nodes are immutable once
//! recorded. Gradients flow only into nodes that transitively depend on an
//! input or a parameter leaf.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use crate::math;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{
    broadcast_shape, broadcast_strides, broadcast_zip, gemm, permute_tensor, split_at_axis,
    sum_to_shape, Tensor,
};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const POW_BASE_MIN: f64 = 1e-4;
pub const POW_BASE_MAX: f64 = 1.0 - 1e-4;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Constant,
    Input,
    Param(ParamId),
    Op,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, f64),
    PowBase(Var, Var),
    Mean(Var),
    Sum(Var),
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        axis: usize,
        index: Vec<Option<usize>>,
    },
    Trilinear {
        volume: Var,
        coords: Var,
    },
    Concat(Vec<Var>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    origin: Origin,
    requires_grad: bool,
}

/// Operation tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.leaves[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn leaf(&mut self, value: Tensor, origin: Origin) -> Var {
        let requires_grad = !matches!(origin, Origin::Constant);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, Origin::Constant)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, Origin::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.leaf(store.get(id).value.clone(), Origin::Param(id))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            origin: Origin::Op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::Shift(a), &[a])
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.scale(a, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::ln);
        self.push("ln", v, Op::Ln(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(floor));
        self.push("clamp_min", v, Op::ClampMin(a, floor), &[a])
    }

    /// `base ^ exponent` under broadcasting, with the base clamped into
    /// `[POW_BASE_MIN, POW_BASE_MAX]`.
    pub fn pow_base(&mut self, base: Var, exponent: Var) -> Result<Var> {
        let v = broadcast_zip("pow_base", self.value(base), self.value(exponent), |b, e| {
            math::powf(clamp_base(b), e)
        })?;
        self.push("pow_base", v, Op::PowBase(base, exponent), &[base, exponent])
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension {
                op: "permute",
                lhs: self.shape(a).to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let v = permute_tensor(self.value(a), perm);
        self.push("permute", v, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(axis_err("concat", &first, axis));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push("concat", v, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn index_select(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(axis_err("index_select", &shape, axis));
        }
        if index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::Config(format!(
                "index_select: indices out of range for extent {}",
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let off = (o * n + i) * inner;
                data.extend_from_slice(&src[off..off + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        let v = Tensor::new(out_shape, data)?;
        self.push(
            "index_select",
            v,
            Op::IndexSelect {
                x: a,
                axis,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Sums slices of `a` along `axis` into an output of extent `out_len`.
    /// Slices whose target is `None` are dropped.
    pub fn scatter_add(&mut self, a: Var, axis: usize, index: &[Option<usize>], out_len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(axis_err("scatter_add", &shape, axis));
        }
        if index.len() != shape[axis] || out_len == 0 || index.iter().flatten().any(|&i| i >= out_len) {
            return Err(Error::Dimension {
                op: "scatter_add",
                lhs: shape,
                rhs: vec![index.len(), out_len],
            });
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = out_len;
        let mut out = Tensor::zeros(&out_shape);
        let src = self.value(a).data();
        let dst = out.data_mut();
        for o in 0..outer {
            for (p, target) in index.iter().enumerate() {
                if let Some(m) = *target {
                    let s = (o * n + p) * inner;
                    let d = (o * out_len + m) * inner;
                    for k in 0..inner {
                        dst[d + k] += src[s + k];
                    }
                }
            }
        }
        self.push(
            "scatter_add",
            out,
            Op::ScatterAdd {
                x: a,
                axis,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over `axes`, keeping them as extent-1 axes.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(axis_err("mean", &shape, bad));
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let mut out_shape = shape.clone();
        let mut count = 1usize;
        for &ax in &axes {
            count *= shape[ax];
            out_shape[ax] = 1;
        }
        let sums = sum_to_shape(self.value(a), &out_shape);
        let v = sums.map(|s| s / count as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_forward(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(axis_err("softmax", t.shape(), axis));
        }
        let v = softmax_forward(t, axis, false);
        self.push("softmax", v, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(axis_err("log_softmax", t.shape(), axis));
        }
        let v = softmax_forward(t, axis, true);
        self.push("log_softmax", v, Op::LogSoftmax(a, axis), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(axis_err("layer_norm", &shape, axis));
        }
        for p in [gain, bias] {
            if self.shape(p) != [shape[axis]] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let mut xhat = Tensor::zeros(&shape);
        let mut out = Tensor::zeros(&shape);
        let mut rstd = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| src[at(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| { let d = src[at(k)] - mean; d * d }).sum::<f64>() / n as f64;
                let r = 1.0 / math::sqrt(var + LAYERNORM_EPS);
                rstd.push(r);
                for k in 0..n {
                    let h = (src[at(k)] - mean) * r;
                    xhat.data_mut()[at(k)] = h;
                    out.data_mut()[at(k)] = h * g[k] + bb[k];
                }
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Same-padded 3D convolution of `x: [C, X, Y, Z]` with `w: [C', C, k, k, k]`
    /// and `b: [C']`; `k` must be odd.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Dimension {
                op: "conv3d",
                lhs: xs,
                rhs: ws,
            });
        }
        if ws[2] % 2 == 0 {
            return Err(Error::Config(format!("conv3d kernel size {} must be odd", ws[2])));
        }
        if xs.len() != 4 || xs[0] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::Dimension {
                op: "conv3d",
                lhs: xs,
                rhs: ws,
            });
        }
        let v = conv3d_forward(self.value(x), self.value(w), self.value(b));
        self.push("conv3d", v, Op::Conv3d { x, w, b }, &[x, w, b])
    }

    /// Trilinear interpolation of `volume: [C, A, B, E]` at continuous
    /// lattice coordinates `coords: [N, 3]`, clamped to the border.
    pub fn trilinear_sample(&mut self, volume: Var, coords: Var) -> Result<Var> {
        let vs = self.shape(volume).to_vec();
        let cs = self.shape(coords).to_vec();
        if vs.len() != 4 || cs.len() != 2 || cs[1] != 3 {
            return Err(Error::Dimension {
                op: "trilinear_sample",
                lhs: vs,
                rhs: cs,
            });
        }
        let v = trilinear_forward(self.value(volume), self.value(coords));
        self.push("trilinear_sample", v, Op::Trilinear { volume, coords }, &[volume, coords])
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(loss)/d(node) from a one-element `loss` back to the leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            match node.origin {
                Origin::Param(id) => {
                    params.push((id, i));
                    continue;
                }
                Origin::Input | Origin::Constant => continue,
                Origin::Op => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { leaves: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, sum_to_shape(g, self.shape(a)));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, sum_to_shape(g, self.shape(b)));
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, sum_to_shape(g, self.shape(a)));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, sum_to_shape(&g.map(|x| -x), self.shape(b)));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let t = broadcast_zip("mul", g, self.value(b), |x, y| x * y).expect("shapes checked");
                    self.accumulate(grads, a, sum_to_shape(&t, self.shape(a)));
                }
                if self.needs(b) {
                    let t = broadcast_zip("mul", g, self.value(a), |x, y| x * y).expect("shapes checked");
                    self.accumulate(grads, b, sum_to_shape(&t, self.shape(b)));
                }
            }
            &Op::Div(a, b) => {
                if self.needs(a) {
                    let t = broadcast_zip("div", g, self.value(b), |x, y| x / y).expect("shapes checked");
                    self.accumulate(grads, a, sum_to_shape(&t, self.shape(a)));
                }
                if self.needs(b) {
                    // d(a/b)/db = -out / b
                    let q = broadcast_zip("div", out, self.value(b), |o, y| -o / y).expect("shapes checked");
                    let t = broadcast_zip("div", g, &q, |x, y| x * y).expect("shapes checked");
                    self.accumulate(grads, b, sum_to_shape(&t, self.shape(b)));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            &Op::Shift(a) => self.accumulate(grads, a, g.clone()),
            &Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(self.value(a), self.value(b), g, self.needs(a), self.needs(b));
                if let Some(ga) = ga {
                    self.accumulate(grads, a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Reshape(a) => {
                let t = g.reshape(self.shape(a)).expect("same size");
                self.accumulate(grads, a, t);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, permute_tensor(g, &inv));
            }
            &Op::Softmax(a, axis) => {
                let (outer, n, inner) = split_at_axis(out.shape(), axis);
                let mut gx = Tensor::zeros(out.shape());
                let (y, gd) = (out.data(), g.data());
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| y[at(j)] * gd[at(j)]).sum();
                        for j in 0..n {
                            gx.data_mut()[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, gx);
            }
            &Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = split_at_axis(out.shape(), axis);
                let mut gx = Tensor::zeros(out.shape());
                let (y, gd) = (out.data(), g.data());
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + k;
                        let total: f64 = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            gx.data_mut()[at(j)] = gd[at(j)] - math::exp(y[at(j)]) * total;
                        }
                    }
                }
                self.accumulate(grads, a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let shape = xhat.shape();
                let (outer, n, inner) = split_at_axis(shape, *axis);
                let gv = self.value(*gain).data();
                let (h, gd) = (xhat.data(), g.data());
                let mut gx = Tensor::zeros(shape);
                let mut ggain = Tensor::zeros(&[n]);
                let mut gbias = Tensor::zeros(&[n]);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let r = rstd[o * inner + i];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for k in 0..n {
                            let d = gd[at(k)] * gv[k];
                            sum_d += d;
                            sum_dh += d * h[at(k)];
                            ggain.data_mut()[k] += gd[at(k)] * h[at(k)];
                            gbias.data_mut()[k] += gd[at(k)];
                        }
                        for k in 0..n {
                            let d = gd[at(k)] * gv[k];
                            gx.data_mut()[at(k)] = r / n as f64 * (n as f64 * d - sum_d - h[at(k)] * sum_dh);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                self.accumulate(grads, *bias, gbias);
            }
            &Op::Conv3d { x, w, b } => {
                let (gx, gw, gb) = conv3d_backward(self.value(x), self.value(w), g, self.needs(x));
                if let Some(gx) = gx {
                    self.accumulate(grads, x, gx);
                }
                self.accumulate(grads, w, gw);
                self.accumulate(grads, b, gb);
            }
            &Op::Relu(a) => {
                let t = zip_same(g, self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, a, t);
            }
            &Op::Sigmoid(a) => self.accumulate(grads, a, zip_same(g, out, |gv, y| gv * y * (1.0 - y))),
            &Op::Tanh(a) => self.accumulate(grads, a, zip_same(g, out, |gv, y| gv * (1.0 - y * y))),
            &Op::Exp(a) => self.accumulate(grads, a, zip_same(g, out, |gv, y| gv * y)),
            &Op::Ln(a) => self.accumulate(grads, a, zip_same(g, self.value(a), |gv, x| gv / x)),
            &Op::ClampMin(a, floor) => {
                let t = zip_same(g, self.value(a), |gv, x| if x > floor { gv } else { 0.0 });
                self.accumulate(grads, a, t);
            }
            &Op::PowBase(base, exponent) => {
                let bv = self.value(base);
                let ev = self.value(exponent);
                if self.needs(base) {
                    // d/db b^e = e * b^(e-1) = e * out / b
                    let eb = broadcast_zip("pow_base", bv, ev, |b, e| {
                        if (POW_BASE_MIN..=POW_BASE_MAX).contains(&b) {
                            e * math::powf(b, e - 1.0)
                        } else {
                            0.0
                        }
                    })
                    .expect("shapes checked");
                    let t = zip_same(g, &eb, |x, y| x * y);
                    self.accumulate(grads, base, sum_to_shape(&t, bv.shape()));
                }
                if self.needs(exponent) {
                    let lnb = broadcast_zip("pow_base", bv, ev, |b, _| math::ln(clamp_base(b))).expect("shapes checked");
                    let t = zip3(g, out, &lnb, |x, o, l| x * o * l);
                    self.accumulate(grads, exponent, sum_to_shape(&t, ev.shape()));
                }
            }
            Op::Mean(a) => {
                let src_shape = self.shape(*a);
                let count = (src_shape.iter().product::<usize>() / out.len()) as f64;
                let expanded = expand(g, src_shape);
                self.accumulate(grads, *a, expanded.map(|x| x / count));
            }
            &Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, a, Tensor::full(self.shape(a), gv));
            }
            Op::IndexSelect { x, axis, index } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_at_axis(shape, *axis);
                let mut gx = Tensor::zeros(shape);
                let m = index.len();
                for o in 0..outer {
                    for (p, &src) in index.iter().enumerate() {
                        let s = (o * m + p) * inner;
                        let d = (o * n + src) * inner;
                        for k in 0..inner {
                            gx.data_mut()[d + k] += g.data()[s + k];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAdd { x, axis, index } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_at_axis(shape, *axis);
                let out_len = out.shape()[*axis];
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    for (p, target) in index.iter().enumerate() {
                        if let Some(mi) = *target {
                            let d = (o * n + p) * inner;
                            let s = (o * out_len + mi) * inner;
                            gx.data_mut()[d..d + inner].copy_from_slice(&g.data()[s..s + inner]);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            &Op::Trilinear { volume, coords } => {
                let (gv, gc) = trilinear_backward(self.value(volume), self.value(coords), g);
                if self.needs(volume) {
                    self.accumulate(grads, volume, gv);
                }
                if self.needs(coords) {
                    self.accumulate(grads, coords, gc);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_at_axis(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut start = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let s = (o * total + start) * inner;
                            gp.extend_from_slice(&g.data()[s..s + ext * inner]);
                        }
                        let gp = Tensor::new(self.shape(p).to_vec(), gp).expect("same size");
                        self.accumulate(grads, p, gp);
                    }
                    start += ext;
                }
            }
        }
    }
}

fn axis_err(op: &'static str, shape: &[usize], axis: usize) -> Error {
    Error::Dimension {
        op,
        lhs: shape.to_vec(),
        rhs: vec![axis],
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn clamp_base(b: f64) -> f64 {
    b.clamp(POW_BASE_MIN, POW_BASE_MAX)
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn zip3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Broadcasts `t` (with extent-1 axes) up to `shape`.
fn expand(t: &Tensor, shape: &[usize]) -> Tensor {
    let st = broadcast_strides(t.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for v in out.data_mut() {
        *v = t.data()[off];
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            off += st[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            off -= st[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

pub(crate) fn softmax_forward(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = split_at_axis(t.shape(), axis);
    let mut out = Tensor::zeros(t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for k in 0..inner {
            let at = |j: usize| (o * n + j) * inner + k;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|j| math::exp(src[at(j)] - max)).sum();
            let lse = math::ln(total);
            for j in 0..n {
                let shifted = src[at(j)] - max;
                dst[at(j)] = if log {
                    shifted - lse
                } else {
                    math::exp(shifted) / total
                };
            }
        }
    }
    out
}

/// Maps every batch position of `out_batch` to a linear batch index of `src_batch`.
fn batch_map(src_batch: &[usize], out_batch: &[usize]) -> Vec<usize> {
    let n: usize = out_batch.iter().product();
    if out_batch.is_empty() {
        return vec![0];
    }
    let st = broadcast_strides(src_batch, out_batch);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_batch.len()];
    for _ in 0..n {
        out.push(idx.iter().zip(&st).map(|(i, s)| i * s).sum());
        crate::tensor::increment_index(&mut idx, out_batch);
    }
    out
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let (sa, sb) = (a.shape(), b.shape());
    let err = || Error::Dimension {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(err());
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch = broadcast_shape("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2]).map_err(|_| err())?;
    Ok((m, k, n, batch))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, batch) = matmul_dims(a, b)?;
    let amap = batch_map(&a.shape()[..a.rank() - 2], &batch);
    let bmap = batch_map(&b.shape()[..b.rank() - 2], &batch);
    let mut shape = batch.clone();
    shape.extend_from_slice(&[m, n]);
    let mut out = Tensor::zeros(&shape);
    for (bi, (&ia, &ib)) in amap.iter().zip(&bmap).enumerate() {
        gemm(
            m,
            k,
            n,
            &a.data()[ia * m * k..(ia + 1) * m * k],
            false,
            &b.data()[ib * k * n..(ib + 1) * k * n],
            false,
            &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
        );
    }
    Ok(out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, need_a: bool, need_b: bool) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k, n, batch) = matmul_dims(a, b).expect("checked in forward");
    let amap = batch_map(&a.shape()[..a.rank() - 2], &batch);
    let bmap = batch_map(&b.shape()[..b.rank() - 2], &batch);
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
    for (bi, (&ia, &ib)) in amap.iter().zip(&bmap).enumerate() {
        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            gemm(
                m,
                n,
                k,
                gs,
                false,
                &b.data()[ib * k * n..(ib + 1) * k * n],
                true,
                &mut ga.data_mut()[ia * m * k..(ia + 1) * m * k],
            );
        }
        if let Some(gb) = gb.as_mut() {
            gemm(
                k,
                m,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                true,
                gs,
                false,
                &mut gb.data_mut()[ib * k * n..(ib + 1) * k * n],
            );
        }
    }
    (ga, gb)
}

/// im2col for a same-padded cubic kernel: rows `(c, i, j, l)`, columns `(x, y, z)`.
fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let s = x.shape();
    let (c_in, nx, ny, nz) = (s[0], s[1], s[2], s[3]);
    let n = nx * ny * nz;
    let p = (k - 1) / 2;
    let mut cols = vec![0.0; c_in * k * k * k * n];
    let src = x.data();
    let mut row = 0;
    for c in 0..c_in {
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let z_lo = p.saturating_sub(l);
                    let z_hi = (nz + p).saturating_sub(l).min(nz);
                    if z_lo < z_hi {
                        for xo in 0..nx {
                            let xi = xo + i;
                            if xi < p || xi - p >= nx {
                                continue;
                            }
                            for yo in 0..ny {
                                let yi = yo + j;
                                if yi < p || yi - p >= ny {
                                    continue;
                                }
                                let d0 = (xo * ny + yo) * nz;
                                let s0 = ((c * nx + xi - p) * ny + yi - p) * nz;
                                for zo in z_lo..z_hi {
                                    dst[d0 + zo] = src[s0 + zo + l - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], shape: &[usize], k: usize) -> Tensor {
    let (c_in, nx, ny, nz) = (shape[0], shape[1], shape[2], shape[3]);
    let n = nx * ny * nz;
    let p = (k - 1) / 2;
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    let mut row = 0;
    for c in 0..c_in {
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    let src = &cols[row * n..(row + 1) * n];
                    let z_lo = p.saturating_sub(l);
                    let z_hi = (nz + p).saturating_sub(l).min(nz);
                    if z_lo < z_hi {
                        for xo in 0..nx {
                            let xi = xo + i;
                            if xi < p || xi - p >= nx {
                                continue;
                            }
                            for yo in 0..ny {
                                let yi = yo + j;
                                if yi < p || yi - p >= ny {
                                    continue;
                                }
                                let s0 = (xo * ny + yo) * nz;
                                let d0 = ((c * nx + xi - p) * ny + yi - p) * nz;
                                for zo in z_lo..z_hi {
                                    dst[d0 + zo + l - p] += src[s0 + zo];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let ws = w.shape();
    let (c_out, k) = (ws[0], ws[2]);
    let s = x.shape();
    let n = s[1] * s[2] * s[3];
    let rows = ws[1] * k * k * k;
    let mut out = Tensor::zeros(&[c_out, s[1], s[2], s[3]]);
    for (o, chunk) in out.data_mut().chunks_mut(n).enumerate() {
        chunk.fill(b.data()[o]);
    }
    if k == 1 {
        gemm(c_out, rows, n, w.data(), false, x.data(), false, out.data_mut());
    } else {
        let cols = im2col(x, k);
        gemm(c_out, rows, n, w.data(), false, &cols, false, out.data_mut());
    }
    out
}

fn conv3d_backward(x: &Tensor, w: &Tensor, g: &Tensor, need_x: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let ws = w.shape();
    let (c_out, k) = (ws[0], ws[2]);
    let s = x.shape();
    let n = s[1] * s[2] * s[3];
    let rows = ws[1] * k * k * k;
    let cols_owned;
    let cols: &[f64] = if k == 1 {
        x.data()
    } else {
        cols_owned = im2col(x, k);
        &cols_owned
    };
    let gd = g.data();
    let mut gw = Tensor::zeros(ws);
    for o in 0..c_out {
        let grow = &gd[o * n..(o + 1) * n];
        for r in 0..rows {
            let crow = &cols[r * n..(r + 1) * n];
            gw.data_mut()[o * rows + r] = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
        }
    }
    let gb = Tensor::new(vec![c_out], (0..c_out).map(|o| gd[o * n..(o + 1) * n].iter().sum()).collect())
        .expect("bias shape");
    let gx = need_x.then(|| {
        let mut gcols = vec![0.0; rows * n];
        gemm(rows, c_out, n, w.data(), true, gd, false, &mut gcols);
        if k == 1 {
            Tensor::new(s.to_vec(), gcols).expect("same size")
        } else {
            col2im(&gcols, s, k)
        }
    });
    (gx, gw, gb)
}

#[derive(Clone, Copy)]
struct AxisInterp {
    lo: usize,
    hi: usize,
    frac: f64,
    inside: bool,
}

fn axis_interp(c: f64, extent: usize) -> AxisInterp {
    if extent == 1 {
        return AxisInterp {
            lo: 0,
            hi: 0,
            frac: 0.0,
            inside: false,
        };
    }
    let max = (extent - 1) as f64;
    let p = c.clamp(0.0, max);
    let lo = (math::floor(p) as usize).min(extent - 2);
    AxisInterp {
        lo,
        hi: lo + 1,
        frac: p - lo as f64,
        inside: (0.0..=max).contains(&c),
    }
}

fn corner_weights(ax: &[AxisInterp; 3]) -> [([usize; 3], f64, [f64; 3]); 8] {
    let mut out = [([0usize; 3], 0.0, [0.0; 3]); 8];
    for (ci, slot) in out.iter_mut().enumerate() {
        let mut idx = [0usize; 3];
        let mut f = [0.0; 3];
        let mut sign = [0.0; 3];
        for a in 0..3 {
            let upper = (ci >> (2 - a)) & 1 == 1;
            idx[a] = if upper { ax[a].hi } else { ax[a].lo };
            f[a] = if upper { ax[a].frac } else { 1.0 - ax[a].frac };
            sign[a] = if upper { 1.0 } else { -1.0 };
        }
        let w = f[0] * f[1] * f[2];
        let dw = [
            sign[0] * f[1] * f[2],
            f[0] * sign[1] * f[2],
            f[0] * f[1] * sign[2],
        ];
        *slot = (idx, w, dw);
    }
    out
}

fn trilinear_forward(volume: &Tensor, coords: &Tensor) -> Tensor {
    let vs = volume.shape();
    let (c, ext) = (vs[0], [vs[1], vs[2], vs[3]]);
    let plane = ext[0] * ext[1] * ext[2];
    let n = coords.shape()[0];
    let mut out = Tensor::zeros(&[n, c]);
    let vd = volume.data();
    for q in 0..n {
        let cd = &coords.data()[q * 3..q * 3 + 3];
        let ax = [axis_interp(cd[0], ext[0]), axis_interp(cd[1], ext[1]), axis_interp(cd[2], ext[2])];
        let row = &mut out.data_mut()[q * c..(q + 1) * c];
        for (idx, w, _) in corner_weights(&ax) {
            if w == 0.0 {
                continue;
            }
            let off = (idx[0] * ext[1] + idx[1]) * ext[2] + idx[2];
            for (ch, r) in row.iter_mut().enumerate() {
                *r += w * vd[ch * plane + off];
            }
        }
    }
    out
}

fn trilinear_backward(volume: &Tensor, coords: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let vs = volume.shape();
    let (c, ext) = (vs[0], [vs[1], vs[2], vs[3]]);
    let plane = ext[0] * ext[1] * ext[2];
    let n = coords.shape()[0];
    let mut gv = Tensor::zeros(vs);
    let mut gc = Tensor::zeros(coords.shape());
    let vd = volume.data();
    for q in 0..n {
        let cd = &coords.data()[q * 3..q * 3 + 3];
        let ax = [axis_interp(cd[0], ext[0]), axis_interp(cd[1], ext[1]), axis_interp(cd[2], ext[2])];
        let grow = &g.data()[q * c..(q + 1) * c];
        let mut dcoord = [0.0; 3];
        for (idx, w, dw) in corner_weights(&ax) {
            let off = (idx[0] * ext[1] + idx[1]) * ext[2] + idx[2];
            let mut dot = 0.0;
            for (ch, &gq) in grow.iter().enumerate() {
                gv.data_mut()[ch * plane + off] += w * gq;
                dot += gq * vd[ch * plane + off];
            }
            for a in 0..3 {
                dcoord[a] += dw[a] * dot;
            }
        }
        for a in 0..3 {
            if ax[a].inside {
                gc.data_mut()[q * 3 + a] = dcoord[a];
            }
        }
    }
    (gv, gc)
}
