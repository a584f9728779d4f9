//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every op appends one node holding its
//! output value and whatever it needs for the backward rule; a [`Var`] is an
//! index into that tape. [`Graph::backward`] walks the tape in reverse append
//! order exactly once and adds the resulting adjoints into the gradient
//! buffers of leaves that require gradients. Gradients accumulate across
//! calls; callers reset them with [`Graph::zero_grad`].
//!
//! A graph is single-threaded. Independent graphs share nothing and can run
//! on different threads.

mod conv;
pub mod kernels;
mod ops;

pub use ops::Reduction;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};
use kernels::{gemm_nn, gemm_nt, gemm_tn};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Log,
    Exp,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias { x: Var, bias: Var, cols: usize },
    Unary(Var, Unary),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MeanPool { x: Var, map: Vec<usize>, count: usize },
    Sum(Var),
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize, total: usize },
    Narrow { x: Var, outer: usize, extent: usize, start: usize, len: usize, inner: usize },
    SelectRows { x: Var, rows: Vec<usize>, cols: usize },
    Reshape(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T>, d: usize },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<Option<usize>>, classes: usize, scale: T },
    Conv2d(Box<conv::ConvCache<T>>),
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// backward populates a gradient for it.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Leaf that requires a gradient.
    pub fn param(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape("param", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node is consistent")
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every reachable leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_adj {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = adjoint(nodes, adj, $v) $body
            };
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_adj!(a, |da| { gemm_nt(g, bv, da, m, n, k) });
                with_adj!(b, |db| { gemm_tn(av, g, db, m, k, n) });
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_adj!(a, |da| { gemm_nn(g, bv, da, m, n, k) });
                with_adj!(b, |db| { gemm_tn(g, av, db, m, n, k) });
            }
            &Op::Transpose { x, rows, cols } => {
                with_adj!(x, |dx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                with_adj!(a, |da| { add_into(da, g) });
                with_adj!(b, |db| { add_into(db, g) });
            }
            &Op::Sub(a, b) => {
                with_adj!(a, |da| { add_into(da, g) });
                with_adj!(b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_adj!(a, |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                });
                with_adj!(b, |db| {
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                });
            }
            &Op::Scale(x, s) => {
                with_adj!(x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * s);
                });
            }
            &Op::AddRowBias { x, bias, cols } => {
                with_adj!(x, |dx| { add_into(dx, g) });
                with_adj!(bias, |db| {
                    for row in g.chunks_exact(cols) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Unary(x, kind) => {
                let xv = &nodes[x.0].value;
                let y = &node.value;
                with_adj!(x, |dx| {
                    for j in 0..g.len() {
                        let local = match kind {
                            Unary::Tanh => T::one() - y[j] * y[j],
                            Unary::Sigmoid => y[j] * (T::one() - y[j]),
                            Unary::Relu => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Log => T::one() / xv[j],
                            Unary::Exp => y[j],
                        };
                        dx[j] += g[j] * local;
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                with_adj!(x, |dx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let mut s = T::zero();
                            for i in 0..len {
                                s += g[idx(i)] * y[idx(i)];
                            }
                            for i in 0..len {
                                dx[idx(i)] += y[idx(i)] * (g[idx(i)] - s);
                            }
                        }
                    }
                });
            }
            Op::MeanPool { x, map, count } => {
                let inv = T::one() / T::of(*count as f64);
                with_adj!(*x, |dx| {
                    for (d, &o) in dx.iter_mut().zip(map) {
                        *d += g[o] * inv;
                    }
                });
            }
            &Op::Sum(x) => {
                with_adj!(x, |dx| {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            Op::Concat { parts, outer, inner, total } => {
                let mut offset = 0;
                for &(v, len) in parts {
                    with_adj!(v, |dv| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut dv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Narrow { x, outer, extent, start, len, inner } => {
                with_adj!(x, |dx| {
                    for o in 0..outer {
                        let dst = &mut dx[(o * extent + start) * inner..(o * extent + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::SelectRows { x, rows, cols } => {
                let cols = *cols;
                with_adj!(*x, |dx| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut dx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            &Op::Reshape(x) => {
                with_adj!(x, |dx| { add_into(dx, g) });
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd, d } => {
                let d = *d;
                let gv = &nodes[gain.0].value;
                with_adj!(*gain, |dg| {
                    for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                with_adj!(*shift, |ds| {
                    for grow in g.chunks_exact(d) {
                        add_into(ds, grow);
                    }
                });
                with_adj!(*x, |dx| {
                    let inv_d = T::one() / T::of(d as f64);
                    for (r, (grow, xrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dy = T::zero();
                        let mut mean_dyx = T::zero();
                        for j in 0..d {
                            let dy = grow[j] * gv[j];
                            mean_dy += dy;
                            mean_dyx += dy * xrow[j];
                        }
                        mean_dy *= inv_d;
                        mean_dyx *= inv_d;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dy = grow[j] * gv[j];
                            out[j] += rstd[r] * (dy - mean_dy - xrow[j] * mean_dyx);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, probs, targets, classes, scale } => {
                let c = *classes;
                let s = g[0] * *scale;
                with_adj!(*logits, |dl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Conv2d(cache) => {
                let (x, w, b) = (cache.x, cache.w, cache.b);
                let wv = &nodes[w.0].value;
                with_adj!(w, |dw| { cache.backward_weight(g, dw) });
                if let Some(b) = b {
                    with_adj!(b, |db| { cache.backward_bias(g, db) });
                }
                with_adj!(x, |dx| { cache.backward_input(g, wv, dx) });
            }
        }
    }
}

/// Lazily allocated adjoint buffer of `v`, or None when it needs no gradient.
fn adjoint<'a, T: Real>(nodes: &[Node<T>], adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param([3], vec![1.0, -2.0, 0.5]).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let x = g.param([2], vec![1.0, 2.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param([2], vec![1.0, 2.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param([2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant([2], vec![1.0, 2.0]).unwrap();
        let x = g.param([2], vec![3.0, 4.0]).unwrap();
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
