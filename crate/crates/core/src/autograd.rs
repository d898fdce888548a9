//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so node ids are
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep. [`Var`] is a cheap copyable handle into one tape. A tape is a
//! single-threaded unit of work; independent runs use independent tapes.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral;
use crate::tensor::{broadcast_index, broadcast_shape, split_axis, strides, Tensor};

/// Variance below which a row is treated as constant by [`Var::pearson`].
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Frozen per-channel linear map applied along the time axis of a `[B, S, V]` tensor.
///
/// `weights` holds `groups` blocks of `[in_len, out_len]`, `bias` holds
/// `groups` blocks of `[out_len]`. With `groups == 1` every channel shares the block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub in_len: usize,
    pub out_len: usize,
    pub groups: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ChannelMap {
    fn block(&self, v: usize) -> (&[f64], &[f64]) {
        let g = if self.groups == 1 { 0 } else { v };
        let w = self.in_len * self.out_len;
        (
            &self.weights[g * w..(g + 1) * w],
            &self.bias[g * self.out_len..(g + 1) * self.out_len],
        )
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Tanh(usize),
    Sqrt(usize),
    Square(usize),
    Huber(usize, f64),
    Matmul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanAxis(usize, usize),
    VarAxis(usize, usize),
    Rdft(usize),
    ComplexAbs(usize),
    Pearson(usize, usize),
    ChannelLinear(usize, Arc<ChannelMap>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not require grad.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`], but an unreached node yields zeros of its shape.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.id).map(|_| None).collect();
        if root_node.requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].requires_grad)
                    .map(|data| Tensor::new(nodes[id].value.shape(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (p, s) in [(*a, 1.0), (*b, sign)] {
                let pshape = nodes[p].value.shape().to_vec();
                if let Some(ga) = acc(grads, nodes, p) {
                    if pshape == out.shape() {
                        ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += s * gi);
                    } else {
                        let idx = broadcast_index(&pshape, out.shape());
                        for (i, &j) in idx.iter().enumerate() {
                            ga[j] += s * g[i];
                        }
                    }
                }
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let ia = broadcast_index(av.shape(), out.shape());
            let ib = broadcast_index(bv.shape(), out.shape());
            let (ad, bd) = (av.data(), bv.data());
            let div = matches!(node.op, Op::Div(..));
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[ia[i]] += if div { g[i] / bd[ib[i]] } else { g[i] * bd[ib[i]] };
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[ib[i]] += if div {
                        -g[i] * ad[ia[i]] / (bd[ib[i]] * bd[ib[i]])
                    } else {
                        g[i] * ad[ia[i]]
                    };
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += c * gi);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi);
            }
        }
        Op::Abs(a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    // subgradient 0 at the kink
                    let s = if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += s * g[i];
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let y = out.data();
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let y = out.data();
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        ga[i] += g[i] * 0.5 / y[i];
                    }
                }
            }
        }
        Op::Square(a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += 2.0 * x[i] * g[i];
                }
            }
        }
        Op::Huber(a, delta) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    let d = if x[i].abs() < *delta {
                        x[i]
                    } else {
                        delta * x[i].signum()
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                matmul_a_bt(g, bd, ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                matmul_at_b(ad, g, gb, m, k, n);
            }
        }
        Op::Bmm(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (nb, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..nb {
                    matmul_a_bt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..nb {
                    matmul_at_b(
                        &ad[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Op::Permute(a, axes) => {
            let src = permute_index(nodes[*a].value.shape(), axes);
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &j) in src.iter().enumerate() {
                    ga[j] += g[i];
                }
            }
        }
        Op::Narrow { src, axis, start } => {
            let (outer, n, inner) = split_axis(nodes[*src].value.shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(ga) = acc(grads, nodes, *src) {
                for o in 0..outer {
                    let from = o * len * inner;
                    let to = (o * n + start) * inner;
                    for i in 0..len * inner {
                        ga[to + i] += g[from + i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::MeanAxis(a, axis) => {
            let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
            if let Some(ga) = acc(grads, nodes, *a) {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[(o * n + j) * inner + i] += g[o * inner + i] / n as f64;
                        }
                    }
                }
            }
        }
        Op::VarAxis(a, axis) => {
            let x = nodes[*a].value.data();
            let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
            if let Some(ga) = acc(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mean = (0..n).map(|j| x[at(j)]).sum::<f64>() / n as f64;
                        let gi = g[o * inner + i];
                        for j in 0..n {
                            ga[at(j)] += gi * 2.0 * (x[at(j)] - mean) / n as f64;
                        }
                    }
                }
            }
        }
        Op::Rdft(a) => {
            let n = *nodes[*a].value.shape().last().unwrap();
            let m = spectral::half_bins(n);
            if let Some(ga) = acc(grads, nodes, *a) {
                let rows = ga.len() / n;
                let (mut gre, mut gim, mut back) = (vec![0.0; m], vec![0.0; m], vec![0.0; n]);
                for r in 0..rows {
                    for k in 0..m {
                        gre[k] = g[(r * m + k) * 2];
                        gim[k] = g[(r * m + k) * 2 + 1];
                    }
                    spectral::rdft_adjoint(&gre, &gim, &mut back);
                    for t in 0..n {
                        ga[r * n + t] += back[t];
                    }
                }
            }
        }
        Op::ComplexAbs(a) => {
            let z = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    let r = out.data()[i];
                    if r > 0.0 {
                        ga[2 * i] += g[i] * z[2 * i] / r;
                        ga[2 * i + 1] += g[i] * z[2 * i + 1] / r;
                    }
                }
            }
        }
        Op::Pearson(a, b) => {
            let (xa, xb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let n = *nodes[*a].value.shape().last().unwrap();
            let rows = xa.len() / n;
            let mut da = vec![0.0; xa.len()];
            let mut db = vec![0.0; xb.len()];
            for r in 0..rows {
                let (pa, pb) = (&xa[r * n..(r + 1) * n], &xb[r * n..(r + 1) * n]);
                let Some(st) = PearsonStats::new(pa, pb) else {
                    continue;
                };
                let (sa, sb) = (st.var_a.sqrt(), st.var_b.sqrt());
                let nf = n as f64;
                for t in 0..n {
                    let (ca, cb) = (pa[t] - st.mean_a, pb[t] - st.mean_b);
                    da[r * n + t] = g[r] * (cb / (nf * sa * sb) - st.r * ca / (nf * st.var_a));
                    db[r * n + t] = g[r] * (ca / (nf * sa * sb) - st.r * cb / (nf * st.var_b));
                }
            }
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(&da).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(&db).for_each(|(x, d)| *x += d);
            }
        }
        Op::ChannelLinear(a, map) => {
            let shape = nodes[*a].value.shape().to_vec();
            let (bsz, s, v) = (shape[0], shape[1], shape[2]);
            let h = map.out_len;
            if let Some(ga) = acc(grads, nodes, *a) {
                for c in 0..v {
                    let (w, _) = map.block(c);
                    for b in 0..bsz {
                        for t in 0..s {
                            let row = &w[t * h..(t + 1) * h];
                            let mut sum = 0.0;
                            for (j, wj) in row.iter().enumerate() {
                                sum += g[(b * h + j) * v + c] * wj;
                            }
                            ga[(b * s + t) * v + c] += sum;
                        }
                    }
                }
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn matmul_a_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += gr[j] * br[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn matmul_at_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * gr[j];
            }
        }
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let pst: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; axes.len()];
    let mut offset = 0;
    for _ in 0..n {
        idx.push(offset);
        for ax in (0..axes.len()).rev() {
            counter[ax] += 1;
            offset += pst[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= pst[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

struct PearsonStats {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    r: f64,
}

impl PearsonStats {
    /// `None` when either row is (numerically) constant.
    fn new(a: &[f64], b: &[f64]) -> Option<Self> {
        let n = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_b = b.iter().sum::<f64>() / n;
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (ca, cb) = (x - mean_a, y - mean_b);
            va += ca * ca;
            vb += cb * cb;
            cov += ca * cb;
        }
        let (var_a, var_b, cov) = (va / n, vb / n, cov / n);
        if var_a < DEGENERATE_VARIANCE || var_b < DEGENERATE_VARIANCE {
            return None;
        }
        Some(PearsonStats {
            mean_a,
            mean_b,
            var_a,
            var_b,
            r: cov / (var_a.sqrt() * var_b.sqrt()),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Borrow of the recorded value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary_broadcast(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(&shape, data)?
            } else {
                let ia = broadcast_index(a.shape(), &shape);
                let ib = broadcast_index(b.shape(), &shape);
                let (ad, bd) = (a.data(), b.data());
                let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect();
                Tensor::new(&shape, data)?
            }
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| c * x);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Square root; the gradient at exactly zero is taken as 0.
    pub fn sqrt(&self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    /// Elementwise Huber penalty of a residual: `0.5 e^2` when `|e| < delta`,
    /// otherwise `delta (|e| - 0.5 delta)`.
    pub fn huber(&self, delta: f64) -> Var<'t> {
        let v = self.value().map(|e| {
            if e.abs() < delta {
                0.5 * e * e
            } else {
                delta * (e.abs() - 0.5 * delta)
            }
        });
        self.unary(v, Op::Huber(self.id, delta))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(&[m, n], out)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Matmul(self.id, other.id), rg))
    }

    /// Batched matrix product `[N, m, k] x [N, k, n]`.
    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::shape("bmm", sa, sb));
            }
            let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; nb * m * n];
            for i in 0..nb {
                matmul_into(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(&[nb, m, n], out)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Bmm(self.id, other.id), rg))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let mut seen = vec![false; a.rank()];
            for &ax in axes {
                if ax >= a.rank() || seen[ax] {
                    return Err(Error::shape("permute", a.shape(), axes));
                }
                seen[ax] = true;
            }
            if axes.len() != a.rank() {
                return Err(Error::shape("permute", a.shape(), axes));
            }
            let src = permute_index(a.shape(), axes);
            let shape: Vec<usize> = axes.iter().map(|&i| a.shape()[i]).collect();
            Tensor::new(&shape, src.iter().map(|&j| a.data()[j]).collect())?
        };
        Ok(self.unary(value, Op::Permute(self.id, axes.to_vec())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if axis >= a.rank() || start + len > a.shape()[axis] {
                return Err(Error::shape("narrow", a.shape(), &[axis, start, len]));
            }
            let (outer, n, inner) = split_axis(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * n + start) * inner;
                data.extend_from_slice(&a.data()[from..from + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        Ok(self.unary(
            value,
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let s = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    fn reduce_axis(&self, axis: usize, name: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let v = self.value();
        if axis >= v.rank() || v.shape()[axis] == 0 {
            return Err(Error::shape(name, v.shape(), &[axis]));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok((shape, outer, n, inner))
    }

    /// Mean along `axis`; the axis is removed from the result.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, outer, n, inner) = self.reduce_axis(axis, "mean_axis")?;
        let value = {
            let x = self.value();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[(o * n + j) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|s| *s /= n as f64);
            Tensor::new(&shape, out)?
        };
        Ok(self.unary(value, Op::MeanAxis(self.id, axis)))
    }

    /// Population variance along `axis`; the axis is removed from the result.
    pub fn var_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, outer, n, inner) = self.reduce_axis(axis, "var_axis")?;
        let value = {
            let x = self.value();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| x.data()[(o * n + j) * inner + i];
                    let mean = (0..n).map(at).sum::<f64>() / n as f64;
                    out[o * inner + i] =
                        (0..n).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / n as f64;
                }
            }
            Tensor::new(&shape, out)?
        };
        Ok(self.unary(value, Op::VarAxis(self.id, axis)))
    }

    /// Real DFT along the last axis, packed as `[..., n/2 + 1, 2]` (re, im).
    pub fn rdft_packed(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let n = match x.shape().last() {
                Some(&n) if n > 0 => n,
                _ => return Err(Error::shape("rdft", x.shape(), &[])),
            };
            let m = spectral::half_bins(n);
            let rows = x.len() / n;
            let mut out = vec![0.0; rows * m * 2];
            let (mut re, mut im) = (vec![0.0; m], vec![0.0; m]);
            for r in 0..rows {
                spectral::rdft(&x.data()[r * n..(r + 1) * n], &mut re, &mut im);
                for k in 0..m {
                    out[(r * m + k) * 2] = re[k];
                    out[(r * m + k) * 2 + 1] = im[k];
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = m;
            shape.push(2);
            Tensor::new(&shape, out)?
        };
        Ok(self.unary(value, Op::Rdft(self.id)))
    }

    /// Modulus of packed complex values `[..., 2] -> [...]`; gradient 0 at the origin.
    pub fn complex_abs(&self) -> Result<Var<'t>> {
        let value = {
            let z = self.value();
            if z.shape().last() != Some(&2) {
                return Err(Error::shape("complex_abs", z.shape(), &[2]));
            }
            let shape = &z.shape()[..z.rank() - 1];
            let data = z
                .data()
                .chunks_exact(2)
                .map(|c| c[0].hypot(c[1]))
                .collect();
            Tensor::new(shape, data)?
        };
        Ok(self.unary(value, Op::ComplexAbs(self.id)))
    }

    /// Pearson correlation of matching rows along the last axis.
    ///
    /// Rows where either side is constant (variance below
    /// [`DEGENERATE_VARIANCE`]) report 1 and pass no gradient.
    pub fn pearson(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() || a.rank() == 0 {
                return Err(Error::shape("pearson", a.shape(), b.shape()));
            }
            let n = *a.shape().last().unwrap();
            let data = a
                .data()
                .chunks_exact(n)
                .zip(b.data().chunks_exact(n))
                .map(|(pa, pb)| PearsonStats::new(pa, pb).map_or(1.0, |s| s.r))
                .collect();
            Tensor::new(&a.shape()[..a.rank() - 1], data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Pearson(self.id, other.id), rg))
    }

    /// Applies a frozen per-channel time map: `[B, S, V] -> [B, H, V]`.
    pub fn channel_linear(&self, map: &Arc<ChannelMap>) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let sh = x.shape();
            if sh.len() != 3 || sh[1] != map.in_len || (map.groups != 1 && map.groups != sh[2]) {
                return Err(Error::shape(
                    "channel_linear",
                    sh,
                    &[map.in_len, map.out_len, map.groups],
                ));
            }
            let (bsz, s, v) = (sh[0], sh[1], sh[2]);
            let h = map.out_len;
            let mut out = vec![0.0; bsz * h * v];
            let mut acc = vec![0.0; h];
            for c in 0..v {
                let (w, bias) = map.block(c);
                for b in 0..bsz {
                    acc.copy_from_slice(bias);
                    for t in 0..s {
                        let xt = x.data()[(b * s + t) * v + c];
                        let row = &w[t * h..(t + 1) * h];
                        for j in 0..h {
                            acc[j] += xt * row[j];
                        }
                    }
                    for j in 0..h {
                        out[(b * h + j) * v + c] = acc[j];
                    }
                }
            }
            Tensor::new(&[bsz, h, v], out)?
        };
        Ok(self.unary(value, Op::ChannelLinear(self.id, Arc::clone(map))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, SeededRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_examples() {
        let tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        assert_eq!(id.matmul(m).unwrap().to_tensor(), m.to_tensor());
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(7);
        let inputs = vec![rng.tensor(&[5, 3]), rng.tensor(&[3, 4])];
        check_gradients(&inputs, 1e-6, |_, v| Ok(v[0].matmul(v[1])?.square().sum()));
    }

    #[test]
    fn tanh_saturation_and_derivative() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.0, 20.0, 0.5]));
        let y = x.tanh();
        assert_eq!(y.value().data()[0], 0.0);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-12);
        let g = tape.backward(y.sum()).unwrap();
        let g = g.get(x).unwrap().data().to_vec();
        assert!(g[1].abs() < 1e-12);
        assert!((g[2] - (1.0 - 0.5f64.tanh().powi(2))).abs() < 1e-10);
    }

    #[test]
    fn broadcast_scalar_gate() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1], &[2.0]));
        let x = tape.constant(t(&[1, 2], &[1.0, -3.0]));
        assert_eq!(a.mul(x).unwrap().value().data(), &[2.0, -6.0]);
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        assert_eq!(x.add(z).unwrap().to_tensor(), x.to_tensor());
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(x.add(bad).is_err());
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.0, -2.0, 3.0]));
        let g = tape.backward(x.abs().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.mean().item(), 2.0);
        let c = tape.constant(Tensor::full(&[5], 4.2));
        assert_eq!(c.var_axis(0).unwrap().item(), 0.0);
        let y = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert!((y.var_axis(0).unwrap().item() - 1.25).abs() < 1e-15);
        let e = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(e.mean_axis(1).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(tape.backward(x.tanh()).is_err());
    }

    #[test]
    fn backward_simple_roots() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.3, -1.0, 2.0, 5.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 2]));

        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn constants_never_receive_gradients() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut rng = SeededRng::new(11);
        let inputs = vec![rng.tensor(&[3, 4])];
        check_gradients(&inputs, 1e-6, |_, v| {
            let h = v[0].tanh();
            let a = h.mul(v[0])?;
            let b = h.matmul(h.permute(&[1, 0])?)?;
            a.sum().add(b.mean())
        });
    }

    #[test]
    fn pearson_degenerate_rows() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1.0, 1.0, 1.0, 1.0, 2.0, 4.0]));
        let b = tape.param(t(&[2, 3], &[0.0, 5.0, 1.0, 2.0, 4.0, 8.0]));
        let r = a.pearson(b).unwrap();
        assert_eq!(r.value().data()[0], 1.0);
        assert!((r.value().data()[1] - 1.0).abs() < 1e-12);
        let g = tape.backward(r.sum()).unwrap();
        assert!(g.get(a).unwrap().data()[..3].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channel_linear_matches_loop() {
        let mut rng = SeededRng::new(3);
        let (s, h, v) = (4, 3, 2);
        let map = Arc::new(ChannelMap {
            in_len: s,
            out_len: h,
            groups: v,
            weights: rng.tensor(&[v * s * h]).into_data(),
            bias: rng.tensor(&[v * h]).into_data(),
        });
        let x = rng.tensor(&[2, s, v]);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).channel_linear(&map).unwrap().to_tensor();
        for b in 0..2 {
            for c in 0..v {
                for j in 0..h {
                    let mut e = map.bias[c * h + j];
                    for k in 0..s {
                        e += x.data()[(b * s + k) * v + c] * map.weights[(c * s + k) * h + j];
                    }
                    assert!((y.data()[(b * h + j) * v + c] - e).abs() < 1e-14);
                }
            }
        }
        check_gradients(&[x], 1e-6, |_, vars| Ok(vars[0].channel_linear(&map)?.square().sum()));
    }
}
