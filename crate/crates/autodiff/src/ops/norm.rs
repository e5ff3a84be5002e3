use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward pass results kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    /// `1/√(var+eps)` per normalized group.
    pub rstd: Vec<T>,
}

/// Normalizes each row over the last axis, then applies `gamma·x̂ + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let d = *x.shape().last().unwrap();
    if gamma.numel() != d || beta.numel() != d {
        return Err(dim_err(
            "layer_norm",
            format!(
                "last axis {d} does not match gamma {:?} / beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let inv_d = T::one() / T::from_usize_lossy(d);
    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    let mut rstds = Vec::with_capacity(x.numel() / d);
    for row in x.data().chunks(d) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (i, &v) in row.iter().enumerate() {
            let h = (v - mean) * rstd;
            xhat.push(h);
            out.push(gamma.data()[i] * h + beta.data()[i]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat: Tensor::from_parts(x.shape().to_vec(), xhat), rstd: rstds },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let inv_d = T::one() / T::from_usize_lossy(d);
    let mut dx = Vec::with_capacity(dy.numel());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for ((g_row, h_row), &rstd) in
        dy.data().chunks(d).zip(cache.xhat.data().chunks(d)).zip(&cache.rstd)
    {
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for i in 0..d {
            let dh = g_row[i] * gamma.data()[i];
            mean_dh = mean_dh + dh;
            mean_dh_h = mean_dh_h + dh * h_row[i];
            dgamma[i] = dgamma[i] + g_row[i] * h_row[i];
            dbeta[i] = dbeta[i] + g_row[i];
        }
        mean_dh = mean_dh * inv_d;
        mean_dh_h = mean_dh_h * inv_d;
        for i in 0..d {
            let dh = g_row[i] * gamma.data()[i];
            dx.push(rstd * (dh - mean_dh - h_row[i] * mean_dh_h));
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Infer,
}

/// Per-channel batch statistics observed in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var_unbiased: Tensor<T>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(dim_err("batch_norm", format!("expected N×C or N×C×H×W, got {shape:?}"))),
    }
}

/// Batch normalization over all axes except the channel axis (axis 1).
///
/// In [`BatchNormMode::Infer`] the `running` pair `(mean, var)` is required.
#[allow(clippy::type_complexity)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
    mode: BatchNormMode,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>, Option<BatchStats<T>>)> {
    let (n, c, hw) = channel_layout(x.shape())?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(dim_err(
            "batch_norm",
            format!("{c} channels but gamma {:?} / beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let count = n * hw;
    let (mean, var, stats) = match mode {
        BatchNormMode::Train => {
            let inv = T::one() / T::from_usize_lossy(count);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for s in 0..n {
                    for &v in &x.data()[(s * c + ch) * hw..][..hw] {
                        acc = acc + v;
                    }
                }
                mean[ch] = acc * inv;
                let mut acc = T::zero();
                for s in 0..n {
                    for &v in &x.data()[(s * c + ch) * hw..][..hw] {
                        acc = acc + (v - mean[ch]) * (v - mean[ch]);
                    }
                }
                var[ch] = acc * inv;
            }
            let unbiased = if count > 1 {
                let f = T::from_usize_lossy(count) / T::from_usize_lossy(count - 1);
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                mean: Tensor::from_parts(vec![c], mean.clone()),
                var_unbiased: Tensor::from_parts(vec![c], unbiased),
            };
            (mean, var, Some(stats))
        }
        BatchNormMode::Infer => {
            let (rm, rv) = running.ok_or(Error::MissingRunningStats)?;
            if rm.numel() != c || rv.numel() != c {
                return Err(dim_err(
                    "batch_norm",
                    format!("running stats {:?}/{:?} for {c} channels", rm.shape(), rv.shape()),
                ));
            }
            (rm.data().to_vec(), rv.data().to_vec(), None)
        }
    };
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let h = (x.data()[i] - mean[ch]) * rstd[ch];
                xhat[i] = h;
                out[i] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache { xhat: Tensor::from_parts(x.shape().to_vec(), xhat), rstd },
        stats,
    ))
}

/// Returns `(dx, dgamma, dbeta)`. In train mode the batch statistics are
/// differentiated through; in infer mode they are constants.
pub fn batch_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    mode: BatchNormMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = channel_layout(dy.shape()).expect("validated in forward");
    let count = T::from_usize_lossy(n * hw);
    let h = cache.xhat.data();
    let g = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] = dgamma[ch] + g[i] * h[i];
                dbeta[ch] = dbeta[ch] + g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let scale = gamma.data()[ch] * cache.rstd[ch];
            for i in base..base + hw {
                dx[i] = match mode {
                    BatchNormMode::Infer => scale * g[i],
                    BatchNormMode::Train => {
                        scale * (g[i] - dbeta[ch] / count - h[i] * dgamma[ch] / count)
                    }
                };
            }
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}
