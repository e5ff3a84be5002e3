//! Synthetic real-vs-fake corpus. Real images are band-limited noise with
//! a fine oriented grating on top; fakes come from the same generator and
//! are then low-pass filtered, so they have smoother surfaces and lose the
//! fine texture.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use texvit_autodiff::{RngState, Tensor};

use super::corrupt::{gaussian_kernel_1d, separable_filter};
use super::image_io::{encode_png, from_rgb_bytes, to_rgb_bytes};
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{config_err, io_err, Result};

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    /// Written manifest files, in train, val, test order.
    pub manifest_paths: [PathBuf; 3],
    /// Mean per-image Laplacian energy of class 0 and class 1.
    pub laplacian_energy: [f64; 2],
}

fn blur_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = ((3.0 * sigma).ceil() as usize).clamp(1, size.saturating_sub(1).max(1));
    gaussian_kernel_1d(2 * r + 1, sigma)
}

/// One `3×size×size` image of class `label` from its own stream.
pub fn generate_image(size: usize, label: u8, smooth_sigma: f64, rng: &mut RngState) -> Tensor<f32> {
    let plane = size * size;
    let lum: Vec<f64> = (0..plane).map(|_| rng.gaussian()).collect();
    let mut field = Tensor::<f32>::zeros([3, size, size]);
    for c in 0..3 {
        for (i, l) in lum.iter().enumerate() {
            field.data_mut()[c * plane + i] = (0.8 * l + 0.6 * rng.gaussian()) as f32;
        }
    }
    let mut field = separable_filter(&field, &blur_kernel(0.8, size));

    let period = rng.uniform_range(2.5, 4.0);
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let amp = rng.uniform_range(0.3, 0.5);
    let (fx, fy) = (theta.cos() / period, theta.sin() / period);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase;
                field.data_mut()[c * plane + y * size + x] += (amp * t.sin()) as f32;
            }
        }
    }
    if label == 1 && smooth_sigma > 0.0 {
        field = separable_filter(&field, &blur_kernel(smooth_sigma, size));
    }

    // Per-image standardization: both classes share brightness and
    // contrast, only the spatial spectrum differs.
    let n = field.numel() as f64;
    let mean = field.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = field.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = 0.15 / var.sqrt().max(1e-12);
    field.map(|v| ((v as f64 - mean) * scale + 0.5).clamp(0.0, 1.0) as f32)
}

/// Mean squared response of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_energy(img: &Tensor<f32>) -> f64 {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let d = img.data();
    let mut s = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let l = 4.0 * p[y * w + x] as f64
                    - p[(y - 1) * w + x] as f64
                    - p[(y + 1) * w + x] as f64
                    - p[y * w + x - 1] as f64
                    - p[y * w + x + 1] as f64;
                s += l * l;
                count += 1;
            }
        }
    }
    s / count.max(1) as f64
}

fn check_args(n: usize, size: usize, smooth_sigma: f64) -> Result<()> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(config_err(format!("n must be a positive even number, got {n}")));
    }
    if size < 8 {
        return Err(config_err(format!("image size must be at least 8, got {size}")));
    }
    if smooth_sigma < 0.0 || !smooth_sigma.is_finite() {
        return Err(config_err(format!("smooth_sigma must be non-negative, got {smooth_sigma}")));
    }
    if smooth_sigma == 0.0 {
        log::warn!("smooth_sigma = 0: real and fake images are identically distributed");
    }
    Ok(())
}

/// Writes `n` images (classes alternate, starting with 0) under
/// `out_dir/images/` named `{stem}_{index}.png` and returns an unsplit
/// manifest rooted at `out_dir` together with the per-class mean
/// Laplacian energy.
pub fn synth_images(
    n: usize,
    size: usize,
    smooth_sigma: f64,
    seed: u64,
    out_dir: &Path,
    stem: &str,
) -> Result<(DatasetManifest, [f64; 2])> {
    check_args(n, size, smooth_sigma)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let results: Vec<(ManifestEntry, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let label = (i % 2) as u8;
            let mut rng = RngState::derive_indexed(seed, "synth", i as u64);
            let img = generate_image(size, label, smooth_sigma, &mut rng);
            let rel = format!("images/{stem}_{i:05}.png");
            let path = out_dir.join(&rel);
            std::fs::write(&path, encode_png(&img)).map_err(io_err(&path))?;
            let stored = from_rgb_bytes(size, size, &to_rgb_bytes(&img));
            Ok((ManifestEntry { path: rel, label }, laplacian_energy(&stored)))
        })
        .collect::<Result<_>>()?;
    let mut energy = [0.0; 2];
    for (e, l) in &results {
        energy[e.label as usize] += l;
    }
    let per_class = (n / 2) as f64;
    let energy = [energy[0] / per_class, energy[1] / per_class];
    let entries = results.into_iter().map(|(e, _)| e).collect();
    Ok((DatasetManifest::new(out_dir, None, entries), energy))
}

/// Index sets for a 70/15/15 split: `⌊0.7n⌋` train, `⌊0.15n⌋` val, the
/// rest test. Each class is shuffled on its own stream and the classes are
/// interleaved before cutting, so every split stays close to balanced.
pub fn stratified_split(labels: &[u8], seed: u64) -> [Vec<usize>; 3] {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l.min(1) as usize].push(i);
    }
    for (c, idx) in by_class.iter_mut().enumerate() {
        RngState::derive_indexed(seed, "split", c as u64).shuffle(idx);
    }
    let mut order = Vec::with_capacity(labels.len());
    for k in 0..by_class[0].len().max(by_class[1].len()) {
        for class in &by_class {
            if let Some(&i) = class.get(k) {
                order.push(i);
            }
        }
    }
    let n = labels.len();
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    [order, val, test]
}

/// Generates `n` images and writes `train.csv`, `val.csv` and `test.csv`
/// into `out_dir`.
pub fn synth_texture_dataset(
    n: usize,
    size: usize,
    smooth_sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<SynthCorpus> {
    let (all, laplacian_energy) = synth_images(n, size, smooth_sigma, seed, out_dir, "img")?;
    let labels: Vec<u8> = all.entries.iter().map(|e| e.label).collect();
    let [tr, va, te] = stratified_split(&labels, seed);
    let pick = |idx: &[usize], split| {
        DatasetManifest::new(out_dir, Some(split), idx.iter().map(|&i| all.entries[i].clone()).collect())
    };
    let (train, val, test) = (pick(&tr, Split::Train), pick(&va, Split::Val), pick(&te, Split::Test));
    let manifest_paths = [out_dir.join("train.csv"), out_dir.join("val.csv"), out_dir.join("test.csv")];
    for (m, p) in [&train, &val, &test].into_iter().zip(&manifest_paths) {
        m.write(p)?;
    }
    Ok(SynthCorpus { train, val, test, manifest_paths, laplacian_energy })
}
