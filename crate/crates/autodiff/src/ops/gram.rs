use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inner products between channel rows of a `C×M` feature matrix:
/// `G[i,j] = Σ_k F[i,k]·F[j,k]`, divided by `C·M` when `normalize` is set.
///
/// Only the upper triangle is accumulated; the lower one is a copy, so the
/// result is symmetric bit for bit.
pub fn gram_matrix<T: Scalar>(f: &[T], c: usize, m: usize, normalize: bool, out: &mut [T]) {
    debug_assert_eq!(f.len(), c * m);
    debug_assert_eq!(out.len(), c * c);
    let s = if normalize { T::one() / T::from_usize_lossy(c * m) } else { T::one() };
    for i in 0..c {
        let fi = &f[i * m..(i + 1) * m];
        for j in i..c {
            let fj = &f[j * m..(j + 1) * m];
            let g = fi.iter().zip(fj).fold(T::zero(), |a, (&x, &y)| a + x * y) * s;
            out[i * c + j] = g;
            out[j * c + i] = g;
        }
    }
}

/// Per-sample Gram matrices of `N×C×H×W` feature maps, shaped `N×C×C`.
pub fn gram<T: Scalar>(x: &Tensor<T>, normalize: bool) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(dim_err("gram", format!("expected N×C×H×W, got {:?}", x.shape())));
    }
    let (n, c, m) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let mut out = vec![T::zero(); n * c * c];
    out.par_chunks_mut(c * c).enumerate().for_each(|(s, g)| {
        gram_matrix(&x.data()[s * c * m..(s + 1) * c * m], c, m, normalize, g);
    });
    Ok(Tensor::from_parts(vec![n, c, c], out))
}

/// `dF = s·(dG + dGᵀ)·F`.
pub fn gram_backward<T: Scalar>(x: &Tensor<T>, normalize: bool, dy: &Tensor<T>) -> Tensor<T> {
    let (c, m) = (x.dim(1), x.dim(2) * x.dim(3));
    let s = if normalize { T::one() / T::from_usize_lossy(c * m) } else { T::one() };
    let mut dx = vec![T::zero(); x.numel()];
    dx.par_chunks_mut(c * m).enumerate().for_each(|(b, dxb)| {
        let f = &x.data()[b * c * m..(b + 1) * c * m];
        let g = &dy.data()[b * c * c..(b + 1) * c * c];
        for i in 0..c {
            let row = &mut dxb[i * m..(i + 1) * m];
            for j in 0..c {
                let w = (g[i * c + j] + g[j * c + i]) * s;
                if w == T::zero() {
                    continue;
                }
                for (r, &fj) in row.iter_mut().zip(&f[j * m..(j + 1) * m]) {
                    *r = *r + w * fj;
                }
            }
        }
    });
    Tensor::from_parts(x.shape().to_vec(), dx)
}
