use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// NaN passes through, so a poisoned input still surfaces in the loss.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v <= T::zero() { T::zero() } else { v })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() }).expect("same shape")
}

/// Standard normal CDF via `erf`.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `x·Φ(x)` with the exact Gaussian CDF.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * normal_cdf(v))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let half = T::from_f64_lossy(0.5);
    x.zip_map(dy, |v, g| {
        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
        g * (normal_cdf(v) + v * pdf)
    })
    .expect("same shape")
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout("softmax", x.shape(), axis)?;
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let m = (0..len).fold(T::neg_infinity(), |m, t| m.max(d[at(t)]));
            let mut sum = T::zero();
            for t in 0..len {
                let e = (d[at(t)] - m).exp();
                out[at(t)] = e;
                sum = sum + e;
            }
            for t in 0..len {
                out[at(t)] = out[at(t)] / sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_layout("softmax", y.shape(), axis).expect("validated");
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let dot = (0..len).fold(T::zero(), |s, t| s + dy.data()[at(t)] * y.data()[at(t)]);
            for t in 0..len {
                dx[at(t)] = y.data()[at(t)] * (dy.data()[at(t)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Log-softmax of a single row.
pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln() + m;
    row.iter().map(|&v| v - lse).collect()
}

/// Mean over the batch of `−Σ_c target_c · log softmax(logits)_c` for
/// `B×K` logits and soft targets. Returns the loss and the softmax
/// probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape() != targets.shape() {
        return Err(dim_err(
            "cross_entropy",
            format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
        ));
    }
    let (b, k) = (logits.dim(0), logits.dim(1));
    let mut probs = Vec::with_capacity(b * k);
    let mut total = T::zero();
    for (row, t) in logits.data().chunks(k).zip(targets.data().chunks(k)) {
        let ls = log_softmax_row(row);
        total = total - ls.iter().zip(t).fold(T::zero(), |s, (&l, &ti)| s + ti * l);
        probs.extend(ls.iter().map(|l| l.exp()));
    }
    Ok((total / T::from_usize_lossy(b), Tensor::from_parts(vec![b, k], probs)))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    dloss: T,
) -> Tensor<T> {
    let (b, k) = (probs.dim(0), probs.dim(1));
    let scale = dloss / T::from_usize_lossy(b);
    let mut dx = Vec::with_capacity(b * k);
    for (p, t) in probs.data().chunks(k).zip(targets.data().chunks(k)) {
        let mass = t.iter().fold(T::zero(), |s, &v| s + v);
        dx.extend(p.iter().zip(t).map(|(&pi, &ti)| scale * (pi * mass - ti)));
    }
    Tensor::from_parts(vec![b, k], dx)
}
