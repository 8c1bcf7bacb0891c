//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so the arena index is a topological order and
//! [`Graph::backward`] simply walks it in reverse.

mod gradcheck;
mod kernels;
mod tensor;

pub use gradcheck::{finite_difference_check, kink_aware_check, GradCheckReport, REFINE_ABOVE};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean `rows × cols` mask applied to the last two axes of softmax logits.
/// `false` entries receive zero probability.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[keep.len()]));
        }
        if let Some(r) = (0..rows).find(|&r| !keep[r * cols..(r + 1) * cols].iter().any(|&k| k)) {
            return Err(Error::Contract(format!(
                "mask row {r} excludes every column; softmax is undefined"
            )));
        }
        Ok(Mask { rows, cols, keep })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Sub { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Mul { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Affine { x: Var, scale: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Abs { x: Var },
    Softmax { x: Var, cols: usize },
    Concat { inputs: Vec<Var>, outer: usize, inner: usize, widths: Vec<usize> },
    Slice { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    BroadcastTo { x: Var, map: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn elementwise_grad(map: &Option<Vec<usize>>, grad: Vec<f64>, numel: usize) -> Vec<f64> {
    match map {
        None => grad,
        Some(m) => kernels::reduce_broadcast(&grad, m, numel),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(node.value.shape(), g.clone()).expect("gradient shape"))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., m, k] @ b[k, n]`; leading axes of `a` are folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, data)?;
        self.push("matmul", value, &[a, b], Op::MatMul { a, b, m, k, n })
    }

    /// Batched product `a[..., m, k] @ b[..., k, n]` with identical leading axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(kernels::matmul(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let value = Tensor::new(&shape, data)?;
        self.push("bmm", value, &[a, b], Op::BatchMatMul { a, b, batch, m, k, n })
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let map_a = (sa != out_shape.as_slice()).then(|| kernels::broadcast_map(sa, &out_shape));
        let map_b = (sb != out_shape.as_slice()).then(|| kernels::broadcast_map(sb, &out_shape));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let data = (0..numel)
            .map(|i| {
                let x = ad[map_a.as_ref().map_or(i, |m| m[i])];
                let y = bd[map_b.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(&out_shape, data)?, map_a, map_b))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add { a, b, map_a, map_b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, &[a, b], Op::Sub { a, b, map_a, map_b })
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul { a, b, map_a, map_b })
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, &[x], Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", value, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push("sigmoid", value, &[x], Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::abs);
        self.push("abs", value, &[x], Op::Abs { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `mask` covers the last two axes;
    /// masked logits are treated as `-inf`.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        if let Some(mask) = mask {
            let rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
            if mask.rows != rows || mask.cols != cols {
                return Err(Error::shape("masked_softmax", &shape, &[mask.rows, mask.cols]));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (r, (row_in, row_out)) in src.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let keep = |c: usize| mask.is_none_or(|m| m.get(r % m.rows, c));
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row_in[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row_in[c] - max).exp();
                    row_out[c] = e;
                    total += e;
                }
            }
            for v in row_out.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("softmax", value, &[x], Op::Softmax { x, cols })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let off_axis_equal = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !off_axis_equal {
                return Err(Error::shape("concat", &base, s));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                let chunk = w * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        self.push(
            "concat",
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                widths,
            },
        )
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice axis {axis} range {start}..{} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner;
            data.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        self.push(
            "slice",
            value,
            &[x],
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", &from, shape))?;
        self.push("reshape", value, &[x], Op::Reshape { x })
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        self.push("permute", value, &[x], Op::Permute { x, perm: perm.to_vec() })
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", self.shape(x), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose_last", self.shape(x), &[2]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Tiles `x` to `shape` under broadcasting rules.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        match kernels::broadcast_shape(&from, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", &from, shape)),
        }
        let map = kernels::broadcast_map(&from, shape);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("broadcast_to", value, &[x], Op::BroadcastTo { x, map })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(0.0, |acc, v| acc + v);
        self.push("sum", Tensor::scalar(total), &[x], Op::Sum { x })
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let total = t.data().iter().fold(0.0, |acc, v| acc + v);
        let mean = total / t.len() as f64;
        self.push("mean", Tensor::scalar(mean), &[x], Op::Mean { x })
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice on the same graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |target: Var, contrib: Vec<f64>| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![0.0; m * k];
                kernels::matmul_bt_acc(g, bd, m, n, k, &mut da);
                send(a, da);
                let mut db = vec![0.0; k * n];
                kernels::matmul_at_acc(ad, g, m, k, n, &mut db);
                send(b, db);
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    kernels::matmul_bt_acc(gi, &bd[i * k * n..(i + 1) * k * n], m, n, k, &mut da[i * m * k..(i + 1) * m * k]);
                    kernels::matmul_at_acc(&ad[i * m * k..(i + 1) * m * k], gi, m, k, n, &mut db[i * k * n..(i + 1) * k * n]);
                }
                send(a, da);
                send(b, db);
            }
            Op::Add { a, b, map_a, map_b } => {
                send(*a, elementwise_grad(map_a, g.to_vec(), self.value(*a).len()));
                send(*b, elementwise_grad(map_b, g.to_vec(), self.value(*b).len()));
            }
            Op::Sub { a, b, map_a, map_b } => {
                send(*a, elementwise_grad(map_a, g.to_vec(), self.value(*a).len()));
                let neg = g.iter().map(|v| -v).collect();
                send(*b, elementwise_grad(map_b, neg, self.value(*b).len()));
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let at = |i: usize| ad[map_a.as_ref().map_or(i, |m| m[i])];
                let bt = |i: usize| bd[map_b.as_ref().map_or(i, |m| m[i])];
                let ga = g.iter().enumerate().map(|(i, gv)| gv * bt(i)).collect();
                let gb = g.iter().enumerate().map(|(i, gv)| gv * at(i)).collect();
                send(*a, elementwise_grad(map_a, ga, ad.len()));
                send(*b, elementwise_grad(map_b, gb, bd.len()));
            }
            &Op::Affine { x, scale } => send(x, g.iter().map(|v| v * scale).collect()),
            &Op::Relu { x } => {
                let xd = self.value(x).data();
                send(x, g.iter().zip(xd).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect());
            }
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                send(x, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
            }
            &Op::Abs { x } => {
                let xd = self.value(x).data();
                send(x, g.iter().zip(xd).map(|(gv, &xv)| {
                    if xv > 0.0 {
                        *gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }).collect());
            }
            &Op::Softmax { x, cols } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot = yr.iter().zip(gr).fold(0.0, |acc, (a, b)| acc + a * b);
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(x, dx);
            }
            Op::Concat { inputs, outer, inner, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    let mut part = Vec::with_capacity(outer * w * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + w * inner]);
                    }
                    send(v, part);
                    offset += w;
                }
            }
            &Op::Slice { x, outer, inner, axis_len, start, len } => {
                let mut dx = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    let dst = o * axis_len * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(x, dx);
            }
            &Op::Reshape { x } => send(x, g.to_vec()),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (dx, _) = kernels::permute(g, node.value.shape(), &inv);
                send(*x, dx);
            }
            Op::BroadcastTo { x, map } => {
                send(*x, kernels::reduce_broadcast(g, map, self.value(*x).len()));
            }
            &Op::Sum { x } => send(x, vec![g[0]; self.value(x).len()]),
            &Op::Mean { x } => {
                let n = self.value(x).len();
                send(x, vec![g[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
