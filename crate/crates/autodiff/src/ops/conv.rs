use rayon::prelude::*;

use crate::error::{contract_err, dim_err, Result};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// Samples per work item when reducing weight gradients. Fixed so the
/// reduction order never depends on the thread count.
const REDUCE_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(dim_err(
                "conv2d",
                format!("expected 4-D input and kernel, got {x:?} and {w:?}"),
            ));
        }
        if stride == 0 {
            return Err(contract_err("conv2d", "stride must be at least 1"));
        }
        if x[1] != w[1] {
            return Err(dim_err(
                "conv2d",
                format!("input {x:?} has {} channels, kernel {w:?} expects {}", x[1], w[1]),
            ));
        }
        let (h, wd) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if w[2] > h || w[3] > wd {
            return Err(dim_err(
                "conv2d",
                format!("kernel {w:?} larger than padded input {h}×{wd} (input {x:?}, pad {pad})"),
            ));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            oh: (h - w[2]) / stride + 1,
            ow: (wd - w[3]) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let ohw = self.ohw();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ohw;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let ohw = self.ohw();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ohw;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                let d = &mut dx[dst_row + ix as usize];
                                *d = *d + cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding: `N×C×H×W ⋆ O×C×kh×kw → N×O×H'×W'`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.numel() != g.o {
            return Err(dim_err(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), g.o),
            ));
        }
    }
    let (chw, ckk, ohw) = (g.c * g.h * g.w, g.ckk(), g.ohw());
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    out.par_chunks_mut(g.o * ohw).enumerate().for_each(|(n, out_n)| {
        let xn = &x.data()[n * chw..(n + 1) * chw];
        if let Some(b) = b {
            for (o, row) in out_n.chunks_mut(ohw).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(Trans::N, Trans::N, g.o, ohw, ckk, T::one(), w.data(), xn, beta, out_n);
        } else {
            let mut cols = vec![T::zero(); ckk * ohw];
            g.im2col(xn, &mut cols);
            gemm(Trans::N, Trans::N, g.o, ohw, ckk, T::one(), w.data(), &cols, beta, out_n);
        }
    });
    Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out))
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let (chw, ckk, ohw) = (g.c * g.h * g.w, g.ckk(), g.ohw());
    let dy_per = g.o * ohw;

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * chw];
        dx.par_chunks_mut(chw).enumerate().for_each(|(n, dx_n)| {
            let dyn_ = &dy.data()[n * dy_per..(n + 1) * dy_per];
            if g.is_pointwise() {
                gemm(Trans::T, Trans::N, ckk, ohw, g.o, T::one(), w.data(), dyn_, T::zero(), dx_n);
            } else {
                let mut dcols = vec![T::zero(); ckk * ohw];
                gemm(Trans::T, Trans::N, ckk, ohw, g.o, T::one(), w.data(), dyn_, T::zero(), &mut dcols);
                g.col2im(&dcols, dx_n);
            }
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    let chunks = g.n.div_ceil(REDUCE_CHUNK);
    let partials: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![T::zero(); g.o * ckk];
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ohw] };
            for n in ci * REDUCE_CHUNK..((ci + 1) * REDUCE_CHUNK).min(g.n) {
                let xn = &x.data()[n * chw..(n + 1) * chw];
                let dyn_ = &dy.data()[n * dy_per..(n + 1) * dy_per];
                let cols_ref: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    g.im2col(xn, &mut cols);
                    &cols
                };
                gemm(Trans::N, Trans::T, g.o, ckk, ohw, T::one(), dyn_, cols_ref, T::one(), &mut acc);
            }
            acc
        })
        .collect();
    let mut dw = vec![T::zero(); g.o * ckk];
    for p in &partials {
        for (a, &v) in dw.iter_mut().zip(p) {
            *a = *a + v;
        }
    }

    let mut db = vec![T::zero(); g.o];
    for n in 0..g.n {
        for (o, acc) in db.iter_mut().enumerate() {
            let row = &dy.data()[n * dy_per + o * ohw..][..ohw];
            *acc = row.iter().fold(*acc, |s, &v| s + v);
        }
    }
    (dx, Tensor::from_parts(w.shape().to_vec(), dw), Tensor::from_parts(vec![g.o], db))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn check_4d(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(dim_err(op, format!("expected N×C×H×W, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Window max or mean with stride `s`, no padding. For max pooling the flat
/// input index of every selected element is returned alongside.
pub fn pool2d<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    s: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = check_4d("pool2d", x.shape())?;
    if k == 0 || s == 0 {
        return Err(contract_err("pool2d", "window and stride must be at least 1"));
    }
    if k > h || k > w {
        return Err(dim_err("pool2d", format!("window {k} larger than input {h}×{w}")));
    }
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    let inv = T::one() / T::from_usize_lossy(k * k);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                let mut acc = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oy * s + i) * w + ox * s + j;
                        let v = x.data()[idx];
                        acc = acc + v;
                        // First maximum wins; a NaN wins and sticks.
                        if !best.is_nan() && (v > best || v.is_nan()) {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        argmax.push(best_idx);
                    }
                    PoolKind::Avg => out.push(acc * inv),
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub fn pool2d_backward<T: Scalar>(
    x_shape: &[usize],
    kind: PoolKind,
    k: usize,
    s: usize,
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    match kind {
        PoolKind::Max => {
            let d = dx.data_mut();
            for (&idx, &g) in argmax.iter().zip(dy.data()) {
                d[idx] = d[idx] + g;
            }
        }
        PoolKind::Avg => {
            let (h, w) = (x_shape[2], x_shape[3]);
            let (oh, ow) = (dy.dim(2), dy.dim(3));
            let inv = T::one() / T::from_usize_lossy(k * k);
            let d = dx.data_mut();
            for plane in 0..x_shape[0] * x_shape[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy.data()[(plane * oh + oy) * ow + ox] * inv;
                        for i in 0..k {
                            for j in 0..k {
                                let idx = plane * h * w + (oy * s + i) * w + ox * s + j;
                                d[idx] = d[idx] + g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Half-open source window `[start, end)` of output cell `i` when adaptively
/// pooling `len` positions into `out` cells.
pub fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    ((i * len) / out, ((i + 1) * len).div_ceil(out))
}

/// Average pooling to an exact output grid; windows may overlap or repeat
/// when the output is larger than the input.
pub fn adaptive_avg_pool2d<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d("adaptive_avg_pool2d", x.shape())?;
    if oh == 0 || ow == 0 {
        return Err(dim_err("adaptive_avg_pool2d", format!("target grid {oh}×{ow} is empty")));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let mut acc = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc = acc + src[yy * w + xx];
                    }
                }
                out.push(acc / T::from_usize_lossy((y1 - y0) * (x1 - x0)));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn adaptive_avg_pool2d_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let d = dx.data_mut();
    for plane in 0..x_shape[0] * x_shape[1] {
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let g = dy.data()[(plane * oh + oy) * ow + ox]
                    / T::from_usize_lossy((y1 - y0) * (x1 - x0));
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = plane * h * w + yy * w + xx;
                        d[idx] = d[idx] + g;
                    }
                }
            }
        }
    }
    dx
}
