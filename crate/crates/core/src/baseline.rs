//! Gram-feature linear probe: a fixed derivative filter bank, the
//! normalized Gram matrix of its responses, and logistic regression on the
//! upper triangle.

use texvit_autodiff::Tensor;

use crate::data::Sample;
use crate::error::{config_err, Result};
use crate::model::GramMatrix;

/// Filter bank channels: R, G, B, then ∂x, ∂y and the 4-neighbour
/// Laplacian of the channel mean (replicated borders).
pub fn filter_bank(img: &Tensor<f32>) -> Tensor<f64> {
    let (h, w) = (img.dim(1), img.dim(2));
    let plane = h * w;
    let d = img.data();
    let lum: Vec<f64> = (0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) as f64 / 3.0).collect();
    let at = |y: isize, x: isize| lum[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; 6 * plane];
    for (i, v) in d.iter().enumerate() {
        out[i] = *v as f64;
    }
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            out[3 * plane + i] = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            out[4 * plane + i] = (at(y + 1, x) - at(y - 1, x)) / 2.0;
            out[5 * plane + i] = 4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1);
        }
    }
    Tensor::new([6, h, w], out).expect("6×H×W")
}

/// Upper triangle (with diagonal) of the normalized Gram matrix of
/// [`filter_bank`].
pub fn gram_features(img: &Tensor<f32>) -> Vec<f64> {
    let g = GramMatrix::from_features(&filter_bank(img), true);
    let c = g.channels();
    (0..c).flat_map(|i| (i..c).map(move |j| (i, j))).map(|(i, j)| g.get(i, j)).collect()
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { iterations: 500, learning_rate: 0.5, l2: 1e-4 }
    }
}

/// Logistic regression on standardized Gram features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LinearProbe {
    /// Full-batch gradient descent from zero weights; deterministic.
    pub fn fit(samples: &[Sample], opts: &ProbeOptions) -> Result<Self> {
        if samples.is_empty() {
            return Err(config_err("cannot fit a probe on no samples"));
        }
        let feats: Vec<Vec<f64>> = samples.iter().map(|s| gram_features(&s.image)).collect();
        let labels: Vec<f64> = samples.iter().map(|s| s.label[1] as f64).collect();
        let (n, k) = (feats.len() as f64, feats[0].len());
        let mean: Vec<f64> = (0..k).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..k)
            .map(|j| (feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
            .collect();
        let xs: Vec<Vec<f64>> =
            feats.iter().map(|f| f.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect()).collect();

        let mut w = vec![0.0; k];
        let mut b = 0.0;
        for _ in 0..opts.iterations {
            let mut gw = vec![0.0; k];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(&labels) {
                let err = sigmoid(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()) - y;
                gb += err;
                for (g, a) in gw.iter_mut().zip(x) {
                    *g += err * a;
                }
            }
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= opts.learning_rate * (g / n + opts.l2 * *wj);
            }
            b -= opts.learning_rate * gb / n;
        }
        Ok(Self { mean, std, weights: w, bias: b })
    }

    /// Probability of class 1.
    pub fn score(&self, img: &Tensor<f32>) -> f64 {
        let f = gram_features(img);
        let z: f64 = f.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j] * self.weights[j]).sum();
        sigmoid(z + self.bias)
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        let correct = samples.iter().filter(|s| u8::from(self.score(&s.image) >= 0.5) == s.class()).count();
        correct as f64 / samples.len().max(1) as f64
    }
}
