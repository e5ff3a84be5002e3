use texvit_autodiff::ops::gram_matrix;
use texvit_autodiff::{Scalar, Tensor, Var};

use super::Graph;
use crate::error::{config_err, Result};

/// Channel correlations of one feature map: `G[i,j] = Σ_k F[i,k]·F[j,k]`,
/// optionally divided by `C·M`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    values: Tensor<T>,
    channels: usize,
    positions: usize,
    normalized: bool,
}

impl<T: Scalar> GramMatrix<T> {
    /// From a `C×M` matrix (or any `C×…` tensor, flattened per channel).
    pub fn from_features(f: &Tensor<T>, normalize: bool) -> Self {
        let c = f.dim(0);
        let m = f.numel() / c;
        let mut out = vec![T::zero(); c * c];
        gram_matrix(f.data(), c, m, normalize, &mut out);
        let values = Tensor::new([c, c], out).expect("c×c buffer");
        Self { values, channels: c, positions: m, normalized: normalize }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// `C·M`, the divisor applied when normalized.
    pub fn normalizer(&self) -> usize {
        self.channels * self.positions
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values.data()[i * self.channels + j]
    }

    pub fn trace(&self) -> T {
        (0..self.channels).fold(T::zero(), |a, i| a + self.get(i, i))
    }

    /// `xᵀGx`.
    pub fn quadratic_form(&self, x: &[T]) -> T {
        let c = self.channels;
        let mut s = T::zero();
        for i in 0..c {
            for j in 0..c {
                s = s + x[i] * self.get(i, j) * x[j];
            }
        }
        s
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.channels).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// 1×1 channel mix → per-sample normalized Gram → Gram as a one-channel
/// `C×C` image → 3×3 conv, ReLU, 3×3 conv → adaptive average pool to the
/// `grid×grid` transformer grid. Returns `N×C'×grid×grid`.
pub fn texture_block<T: Scalar>(g: &mut Graph<'_, T>, feat: Var, prefix: &str, grid: usize) -> Result<Var> {
    if grid == 0 {
        return Err(config_err("texture block target grid must be at least 1×1"));
    }
    let n = g.tape.shape(feat)[0];
    let c = g.tape.shape(feat)[1];
    let mixed = g.conv(feat, &format!("{prefix}.mix"), 1, 0, true)?;
    let gram = g.tape.gram(mixed, true)?;
    let map = g.tape.reshape(gram, &[n, 1, c, c])?;
    let h = g.conv(map, &format!("{prefix}.conv1"), 1, 1, true)?;
    let h = g.tape.relu(h);
    let h = g.conv(h, &format!("{prefix}.conv2"), 1, 1, true)?;
    Ok(g.tape.adaptive_avg_pool2d(h, grid, grid)?)
}
