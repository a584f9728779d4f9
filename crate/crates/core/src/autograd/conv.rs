//! 2-D convolution via im2col, enough for the multi-scale image backbone.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub(crate) struct ConvCache<T> {
    pub x: Var,
    pub w: Var,
    pub b: Option<Var>,
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    /// im2col buffers, one [C·k·k × out_h·out_w] block per batch item.
    cols: Vec<T>,
}

impl<T: Real> ConvCache<T> {
    fn patch_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[T], cols: &mut [T]) {
        let (k, p) = (self.kernel, self.positions());
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width;
                            cols[row * p + oy * self.out_w + ox] = if inside {
                                x[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], dx: &mut [T]) {
        let (k, p) = (self.kernel, self.positions());
        for c in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            dx[(c * self.height + iy as usize) * self.width + ix as usize] += cols[row * p + oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn backward_weight(&self, g: &[T], dw: &mut [T]) {
        let (q, p) = (self.patch_rows(), self.positions());
        for n in 0..self.batch {
            let gn = &g[n * self.out_ch * p..(n + 1) * self.out_ch * p];
            gemm_nt(gn, &self.cols[n * q * p..(n + 1) * q * p], dw, self.out_ch, p, q);
        }
    }

    pub fn backward_bias(&self, g: &[T], db: &mut [T]) {
        let p = self.positions();
        for (i, block) in g.chunks_exact(p).enumerate() {
            db[i % self.out_ch] += block.iter().copied().sum();
        }
    }

    pub fn backward_input(&self, g: &[T], w: &[T], dx: &mut [T]) {
        let (q, p) = (self.patch_rows(), self.positions());
        let mut dcols = vec![T::zero(); q * p];
        let image = self.in_ch * self.height * self.width;
        for n in 0..self.batch {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            let gn = &g[n * self.out_ch * p..(n + 1) * self.out_ch * p];
            gemm_tn(w, gn, &mut dcols, self.out_ch, q, p);
            self.col2im(&dcols, &mut dx[n * image..(n + 1) * image]);
        }
    }
}

impl<T: Real> Graph<T> {
    /// Square-kernel convolution of `x[N×C×H×W]` with `w[O×C×k×k]` and optional `bias[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, in_ch, height, width) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::shape("conv2d", s, self.shape(w))),
        };
        let (out_ch, kernel) = match *self.shape(w) {
            [o, c, k1, k2] if c == in_ch && k1 == k2 => (o, k1),
            ref s => return Err(Error::shape("conv2d", self.shape(x), s)),
        };
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape("conv2d", self.shape(w), self.shape(b)));
            }
        }
        if stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::Config(format!("conv2d: kernel {kernel} stride {stride} does not fit {height}×{width}")));
        }
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        let mut cache = ConvCache {
            x,
            w,
            b: bias,
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
            cols: Vec::new(),
        };
        let (q, p) = (cache.patch_rows(), cache.positions());
        let image = in_ch * height * width;
        let mut cols = vec![T::zero(); batch * q * p];
        let mut out = vec![T::zero(); batch * out_ch * p];
        let xv = self.value(x);
        let wv = self.value(w);
        for n in 0..batch {
            let cn = &mut cols[n * q * p..(n + 1) * q * p];
            cache.im2col(&xv[n * image..(n + 1) * image], cn);
            let on = &mut out[n * out_ch * p..(n + 1) * out_ch * p];
            if let Some(b) = bias {
                let bv = self.value(b);
                for (o, block) in on.chunks_exact_mut(p).enumerate() {
                    block.iter_mut().for_each(|v| *v = bv[o]);
                }
            }
            gemm_nn(wv, cn, on, out_ch, q, p);
        }
        cache.cols = cols;
        let rg = self.needs_grad(x) || self.needs_grad(w) || bias.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(vec![batch, out_ch, out_h, out_w], out, Op::Conv2d(Box::new(cache)), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.5).collect();
        let ws: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5 % 13) as f64) * 0.05 - 0.3).collect();
        let x = g.constant([2, 2, 5, 5], xs.clone()).unwrap();
        let w = g.constant([3, 2, 3, 3], ws.clone()).unwrap();
        let b = g.constant([3], vec![0.1, -0.2, 0.3]).unwrap();
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        let yv = g.value(y);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = [0.1, -0.2, 0.3][o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    s += xs[((n * 2 + c) * 5 + iy as usize) * 5 + ix as usize] * ws[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = yv[((n * 3 + o) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant([1, 2, 4, 4], vec![0.0; 32]).unwrap();
        let w = g.constant([1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(g.conv2d(x, w, None, 1, 0).is_err());
    }
}
