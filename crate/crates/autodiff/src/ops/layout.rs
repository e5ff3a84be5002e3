use crate::error::{dim_err, Result};
use crate::ops::activation::axis_layout;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Joins tensors along `axis`; all other dimensions must agree exactly.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
    let (outer, _, inner) = axis_layout("concat", first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let same_other = same_rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_other {
            return Err(dim_err(
                "concat",
                format!("cannot join {:?} with {:?} along axis {axis}", first.shape(), p.shape()),
            ));
        }
        total += p.dim(axis);
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits a gradient of a concatenation back into its parts.
pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, sizes: &[usize], axis: usize) -> Vec<Tensor<T>> {
    let (outer, total, inner) = axis_layout("concat", dy.shape(), axis).expect("validated");
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = narrow_raw(dy, outer, total, inner, axis, start, len);
            start += len;
            t
        })
        .collect()
}

fn narrow_raw<T: Scalar>(
    x: &Tensor<T>,
    outer: usize,
    total: usize,
    inner: usize,
    axis: usize,
    start: usize,
    len: usize,
) -> Tensor<T> {
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * total + start) * inner..][..len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

/// Slice `[start, start+len)` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, total, inner) = axis_layout("narrow", x.shape(), axis)?;
    if len == 0 || start + len > total {
        return Err(dim_err(
            "narrow",
            format!("range {start}..{} invalid for axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    Ok(narrow_raw(x, outer, total, inner, axis, start, len))
}

pub fn narrow_backward<T: Scalar>(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (outer, total, inner) = axis_layout("narrow", x_shape, axis).expect("validated");
    let len = dy.dim(axis);
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let d = dx.data_mut();
    for o in 0..outer {
        d[(o * total + start) * inner..][..len * inner]
            .copy_from_slice(&dy.data()[o * len * inner..][..len * inner]);
    }
    dx
}

/// Flat index pairs `(src, dst)` mapping `B×C×H×W` to `B×N×(C·P·P)`, with
/// patches in row-major grid order and features ordered channel, row, col.
fn patch_index(shape: &[usize], p: usize) -> impl Iterator<Item = (usize, usize)> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    (0..b).flat_map(move |bi| {
        (0..gh * gw).flat_map(move |t| {
            let (py, px) = (t / gw, t % gw);
            (0..feat).map(move |f| {
                let (ch, i, j) = (f / (p * p), (f / p) % p, f % p);
                let src = ((bi * c + ch) * h + py * p + i) * w + px * p + j;
                let dst = (bi * gh * gw + t) * feat + f;
                (src, dst)
            })
        })
    })
}

/// Unfolds non-overlapping `P×P` patches into token rows.
pub fn patchify<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 || p == 0 || !x.dim(2).is_multiple_of(p) || !x.dim(3).is_multiple_of(p) {
        return Err(dim_err(
            "patchify",
            format!("patch size {p} does not tile input {:?}", x.shape()),
        ));
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in patch_index(x.shape(), p) {
        out[dst] = x.data()[src];
    }
    Ok(Tensor::from_parts(vec![b, (h / p) * (w / p), c * p * p], out))
}

pub fn patchify_backward<T: Scalar>(x_shape: &[usize], p: usize, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let d = dx.data_mut();
    for (src, dst) in patch_index(x_shape, p) {
        d[src] = dy.data()[dst];
    }
    dx
}

/// `x + y` where `y`'s shape equals the trailing dimensions of `x`.
pub fn add_broadcast<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let ok = y.rank() <= x.rank() && x.shape().ends_with(y.shape());
    if !ok {
        return Err(dim_err(
            "add_broadcast",
            format!("{:?} does not broadcast onto {:?}", y.shape(), x.shape()),
        ));
    }
    let n = y.numel();
    let mut out = x.data().to_vec();
    for chunk in out.chunks_mut(n) {
        for (a, &b) in chunk.iter_mut().zip(y.data()) {
            *a = *a + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Sums a gradient over the leading (broadcast) dimensions.
pub fn reduce_leading<T: Scalar>(dy: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut acc = vec![T::zero(); n];
    for chunk in dy.data().chunks(n) {
        for (a, &g) in acc.iter_mut().zip(chunk) {
            *a = *a + g;
        }
    }
    Tensor::from_parts(shape.to_vec(), acc)
}

/// Repeats a tensor with leading dimension 1 `n` times along that axis.
pub fn expand_leading<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if x.dim(0) != 1 || n == 0 {
        return Err(dim_err("expand", format!("cannot expand {:?} to {n} rows", x.shape())));
    }
    let mut data = Vec::with_capacity(x.numel() * n);
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    let mut shape = x.shape().to_vec();
    shape[0] = n;
    Ok(Tensor::from_parts(shape, data))
}
