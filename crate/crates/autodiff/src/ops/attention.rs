use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Dims {
    b: usize,
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

fn dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Dims> {
    let bad = || {
        dim_err(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?} with {heads} heads",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        )
    };
    if q.rank() != 3 || k.rank() != 3 || k.shape() != v.shape() {
        return Err(bad());
    }
    let (b, tq, d) = (q.dim(0), q.dim(1), q.dim(2));
    if k.dim(0) != b || k.dim(2) != d || heads == 0 || d % heads != 0 {
        return Err(bad());
    }
    Ok(Dims { b, tq, tk: k.dim(1), d, heads, dh: d / heads })
}

/// Multi-head scaled dot-product attention.
///
/// `q: B×Tq×D`, `k, v: B×Tk×D`; each of the `heads` heads works on a
/// contiguous `D/heads` slice. Returns the `B×Tq×D` output and the
/// `B×heads×Tq×Tk` attention weights.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let Dims { b, tq, tk, d, heads, dh } = dims(q, k, v, heads)?;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut out = vec![T::zero(); b * tq * d];
    let mut probs = vec![T::zero(); b * heads * tq * tk];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut row = vec![T::zero(); tk];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..tq {
                let qi = &qd[(bi * tq + i) * d + h * dh..][..dh];
                let mut m = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kd[(bi * tk + j) * d + h * dh..][..dh];
                    let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                    *r = s;
                    m = m.max(s);
                }
                let mut sum = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    sum = sum + *r;
                }
                let p = &mut probs[((bi * heads + h) * tq + i) * tk..][..tk];
                for (pj, &r) in p.iter_mut().zip(&row) {
                    *pj = r / sum;
                }
                let o = &mut out[(bi * tq + i) * d + h * dh..][..dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[(bi * tk + j) * d + h * dh..][..dh];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc = *oc + pj * vc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![b, tq, d], out),
        Tensor::from_parts(vec![b, heads, tq, tk], probs),
    ))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    heads: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let Dims { b, tq, tk, d, heads, dh } = dims(q, k, v, heads).expect("validated in forward");
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let (qd, kd, vd, pd, g) = (q.data(), k.data(), v.data(), probs.data(), dy.data());
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    let mut dp = vec![T::zero(); tk];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..tq {
                let p = &pd[((bi * heads + h) * tq + i) * tk..][..tk];
                let gi = &g[(bi * tq + i) * d + h * dh..][..dh];
                // dP = dO·Vᵀ, dV += Pᵀ·dO
                for j in 0..tk {
                    let vj = &vd[(bi * tk + j) * d + h * dh..][..dh];
                    dp[j] = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    let dvj = &mut dv[(bi * tk + j) * d + h * dh..][..dh];
                    for (acc, &gc) in dvj.iter_mut().zip(gi) {
                        *acc = *acc + p[j] * gc;
                    }
                }
                let dot = p.iter().zip(&dp).fold(T::zero(), |a, (&x, &y)| a + x * y);
                let qi_off = (bi * tq + i) * d + h * dh;
                for j in 0..tk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj_off = (bi * tk + j) * d + h * dh;
                    for c in 0..dh {
                        dq[qi_off + c] = dq[qi_off + c] + ds * kd[kj_off + c];
                        dk[kj_off + c] = dk[kj_off + c] + ds * qd[qi_off + c];
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    )
}
