use serde::{Deserialize, Serialize};

use super::kernels::{gemm_nn, gemm_nt, split_axis};
use super::{Graph, Op, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl<T: Real> Graph<T> {
    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// a[m×k] · b[k×n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// a[m×k] · b[n×k]ᵀ, the layout of `x · Wᵀ` and `Q · Kᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul_nt")?;
        let (n, k2) = self.rank2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(a, b, op)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.needs_grad(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    /// x[n×d] + bias[d] broadcast over rows; the only broadcasting op.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rank2(x, "add_row_bias")?;
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.needs_grad(x) || self.needs_grad(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRowBias { x, bias, cols }, rg))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
                Unary::Relu => v.max(T::zero()),
                Unary::Log => v.ln(),
                Unary::Exp => v.exp(),
            })
            .collect();
        let rg = self.needs_grad(x);
        self.push(self.shape(x).to_vec(), out, Op::Unary(x, kind), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Unary::Log))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mx = (0..len).map(|i| xv[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (xv[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] = out[idx(i)] / total;
                }
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Arithmetic mean over `axes`; reduced axes are removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        for &a in axes {
            self.check_axis(x, a)?;
        }
        if axes.is_empty() {
            return Err(Error::EmptyReduction("mean_pool"));
        }
        let reduced: Vec<bool> = (0..shape.len()).map(|a| axes.contains(&a)).collect();
        let out_shape: Vec<usize> = shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&e, _)| e).collect();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&e, _)| e).product();

        // Output strides projected onto the input's axes (0 for reduced axes).
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for a in (0..shape.len()).rev() {
            if !reduced[a] {
                out_strides[a] = stride;
                stride *= shape[a];
            }
        }
        let n = numel(&shape);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for a in (0..shape.len()).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (&v, &o) in self.value(x).iter().zip(&map) {
            out[o] += v;
        }
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.needs_grad(x);
        Ok(self.push(out_shape, out, Op::MeanPool { x, map, count }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.needs_grad(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyReduction("concat"))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        for &v in &xs[1..] {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let parts: Vec<(Var, usize)> = xs.iter().map(|&v| (v, self.shape(v)[axis])).collect();
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                out.extend_from_slice(&self.value(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.needs_grad(v));
        Ok(self.push(shape, out, Op::Concat { parts, outer, inner, total }, rg))
    }

    /// Slice `[start, start+len)` along `axis`; inverse of [`Graph::concat`].
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = split_axis(&shape, axis);
        if len == 0 || start + len > extent {
            return Err(Error::Data(format!("narrow [{start}, {}) out of extent {extent}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * extent + start) * inner..(o * extent + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.needs_grad(x);
        Ok(self.push(out_shape, out, Op::Narrow { x, outer, extent, start, len, inner }, rg))
    }

    /// Gathers rows of a rank-2 tensor; gradient flows only to the selected rows.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.rank2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Data(format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let out = rows.iter().flat_map(|&r| xv[r * cols..(r + 1) * cols].iter().copied()).collect();
        let rg = self.needs_grad(x);
        Ok(self.push(vec![rows.len(), cols], out, Op::SelectRows { x, rows: rows.to_vec(), cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.needs_grad(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Row-wise layer normalization: (x − mean)/√(var + eps) · gain + shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.rank2(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in xv.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + sv[j]);
            }
        }
        let rg = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(shift);
        Ok(self.push(vec![rows, d], out, Op::LayerNorm { x, gain, shift, xhat, rstd, d }, rg))
    }

    /// Softmax cross-entropy of `logits[n×C]` against class ids.
    ///
    /// Rows whose target equals `ignore` contribute nothing and are excluded
    /// from the mean's denominator. If every row is ignored the loss is 0 with
    /// zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction, ignore: Option<usize>) -> Result<Var> {
        let (n, c) = self.rank2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let targets: Vec<Option<usize>> = targets.iter().map(|&t| if Some(t) == ignore { None } else { Some(t) }).collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Data(format!("target {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        let mut active = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if let Some(t) = *t {
                total += lse - row[t];
                active += 1;
            }
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean if active > 0 => T::one() / T::of(active as f64),
            Reduction::Mean => T::zero(),
        };
        let loss = total * scale;
        let rg = self.needs_grad(logits);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, probs, targets, classes: c, scale }, rg))
    }
}
