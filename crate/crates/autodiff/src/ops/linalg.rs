use crate::error::{dim_err, Result};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// `C[i,j] = Σ_t A[i,t]·B[t,j]` for 2-D operands.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(dim_err(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![T::zero(); m * n];
    gemm(Trans::N, Trans::N, m, n, k, T::one(), a.data(), b.data(), T::zero(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    gemm(Trans::N, Trans::T, m, k, n, T::one(), dy.data(), b.data(), T::zero(), &mut da);
    gemm(Trans::T, Trans::N, k, n, m, T::one(), a.data(), dy.data(), T::zero(), &mut db);
    (Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db))
}

/// Affine map over the last axis: `x (…×Din) · w (Din×Dout) + b`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let din = *x.shape().last().unwrap();
    if w.rank() != 2 || w.dim(0) != din {
        return Err(dim_err(
            "linear",
            format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    let dout = w.dim(1);
    if let Some(b) = b {
        if b.numel() != dout {
            return Err(dim_err(
                "linear",
                format!("bias {:?} does not match output width {dout}", b.shape()),
            ));
        }
    }
    let rows = x.numel() / din;
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(Trans::N, Trans::N, rows, dout, din, T::one(), x.data(), w.data(), beta, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Ok(Tensor::from_parts(shape, out))
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (din, dout) = (w.dim(0), w.dim(1));
    let rows = x.numel() / din;
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * din];
        gemm(Trans::N, Trans::T, rows, din, dout, T::one(), dy.data(), w.data(), T::zero(), &mut dx);
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    let mut dw = vec![T::zero(); din * dout];
    gemm(Trans::T, Trans::N, din, dout, rows, T::one(), x.data(), dy.data(), T::zero(), &mut dw);
    let mut db = vec![T::zero(); dout];
    for row in dy.data().chunks(dout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    (dx, Tensor::from_parts(vec![din, dout], dw), Tensor::from_parts(vec![dout], db))
}
