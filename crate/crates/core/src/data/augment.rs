//! Training-time augmentation: RandAugment, mixup, CutMix and random
//! erasing.

use serde::{Deserialize, Serialize};
use texvit_autodiff::{RngState, Tensor};

use super::Sample;
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rand_augment: bool,
    pub num_ops: usize,
    /// RandAugment magnitude in `0..=10`.
    pub magnitude: f64,
    /// Beta parameter for mixup; 0 disables it.
    pub mixup_alpha: f64,
    /// Beta parameter for CutMix; 0 disables it.
    pub cutmix_alpha: f64,
    pub erase_prob: f64,
    pub erase_area: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rand_augment: false,
            num_ops: 2,
            magnitude: 5.0,
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            erase_prob: 0.0,
            erase_area: [0.02, 0.25],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=10.0).contains(&self.magnitude) {
            return Err(config_err(format!("magnitude {} outside 0..=10", self.magnitude)));
        }
        if self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            return Err(config_err("mixup/cutmix alpha must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(config_err(format!("erase_prob {} outside [0, 1]", self.erase_prob)));
        }
        let [lo, hi] = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(config_err(format!("erase_area [{lo}, {hi}] must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.rand_augment && self.mixup_alpha == 0.0 && self.cutmix_alpha == 0.0 && self.erase_prob == 0.0
    }
}

/// One RandAugment transform on a `3×H×W` image, at magnitude `m ∈ [0, 10]`.
pub trait AugmentOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, img: &Tensor<f32>, m: f64, rng: &mut RngState) -> Tensor<f32>;
}

const FILL: f32 = 0.5;

fn signed(rng: &mut RngState, v: f64) -> f64 {
    if rng.bernoulli(0.5) {
        v
    } else {
        -v
    }
}

/// Nearest-neighbour resampling: output pixel `(y, x)` reads
/// `src(y, x)`, or [`FILL`] outside the image.
fn resample(img: &Tensor<f32>, src: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let mut out = Tensor::full([c, h, w], FILL);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64, x as f64);
            let (sy, sx) = (sy.round(), sx.round());
            if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for ch in 0..c {
                out.data_mut()[(ch * h + y) * w + x] = img.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

struct HFlip;
struct Rotate;
struct Translate;
struct Brightness;
struct Contrast;
struct Posterize;

impl AugmentOp for HFlip {
    fn name(&self) -> &'static str {
        "hflip"
    }

    fn apply(&self, img: &Tensor<f32>, _: f64, _: &mut RngState) -> Tensor<f32> {
        let w = img.dim(2) as f64;
        resample(img, |y, x| (y, w - 1.0 - x))
    }
}

impl AugmentOp for Rotate {
    fn name(&self) -> &'static str {
        "rotate"
    }

    /// Up to ±30° about the centre.
    fn apply(&self, img: &Tensor<f32>, m: f64, rng: &mut RngState) -> Tensor<f32> {
        let a = signed(rng, (m / 10.0 * 30.0).to_radians());
        let (cy, cx) = ((img.dim(1) as f64 - 1.0) / 2.0, (img.dim(2) as f64 - 1.0) / 2.0);
        let (s, c) = a.sin_cos();
        resample(img, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy + c * dy - s * dx, cx + s * dy + c * dx)
        })
    }
}

impl AugmentOp for Translate {
    fn name(&self) -> &'static str {
        "translate"
    }

    /// Up to ±30% of the side, independently per axis.
    fn apply(&self, img: &Tensor<f32>, m: f64, rng: &mut RngState) -> Tensor<f32> {
        let ty = signed(rng, (m / 10.0 * 0.3 * img.dim(1) as f64).round());
        let tx = signed(rng, (m / 10.0 * 0.3 * img.dim(2) as f64).round());
        resample(img, |y, x| (y - ty, x - tx))
    }
}

impl AugmentOp for Brightness {
    fn name(&self) -> &'static str {
        "brightness"
    }

    fn apply(&self, img: &Tensor<f32>, m: f64, rng: &mut RngState) -> Tensor<f32> {
        let f = (1.0 + signed(rng, m / 10.0 * 0.9)) as f32;
        img.map(|v| (v * f).clamp(0.0, 1.0))
    }
}

impl AugmentOp for Contrast {
    fn name(&self) -> &'static str {
        "contrast"
    }

    fn apply(&self, img: &Tensor<f32>, m: f64, rng: &mut RngState) -> Tensor<f32> {
        let f = (1.0 + signed(rng, m / 10.0 * 0.9)) as f32;
        let mean = img.mean();
        img.map(|v| ((v - mean) * f + mean).clamp(0.0, 1.0))
    }
}

impl AugmentOp for Posterize {
    fn name(&self) -> &'static str {
        "posterize"
    }

    /// Keeps `8 − round(0.4·m)` bits per channel.
    fn apply(&self, img: &Tensor<f32>, m: f64, _: &mut RngState) -> Tensor<f32> {
        let drop = (0.4 * m).round() as u32;
        let mask = 0xffu32 << drop & 0xff;
        img.map(|v| (((v.clamp(0.0, 1.0) * 255.0).round() as u32) & mask) as f32 / 255.0)
    }
}

pub fn rand_augment_ops() -> Vec<Box<dyn AugmentOp>> {
    vec![
        Box::new(HFlip),
        Box::new(Rotate),
        Box::new(Translate),
        Box::new(Brightness),
        Box::new(Contrast),
        Box::new(Posterize),
    ]
}

/// Applies `n` ops drawn uniformly (with replacement) at magnitude `m`.
pub fn rand_augment(img: &Tensor<f32>, n: usize, m: f64, rng: &mut RngState) -> Tensor<f32> {
    let ops = rand_augment_ops();
    let mut out = img.clone();
    for _ in 0..n {
        let op = &ops[rng.below(ops.len())];
        out = op.apply(&out, m, rng);
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

fn check_pair(s1: &Sample, s2: &Sample) -> Result<()> {
    if s1.image.shape() != s2.image.shape() {
        return Err(config_err(format!(
            "cannot mix images of shapes {:?} and {:?}",
            s1.image.shape(),
            s2.image.shape()
        )));
    }
    Ok(())
}

fn mix_labels(a: [f32; 2], b: [f32; 2], lambda: f64) -> [f32; 2] {
    let l = lambda as f32;
    let p1 = l * a[1] + (1.0 - l) * b[1];
    [1.0 - p1, p1]
}

/// `λ·s1 + (1−λ)·s2` for images and labels.
pub fn mixup_with_lambda(s1: &Sample, s2: &Sample, lambda: f64) -> Result<Sample> {
    check_pair(s1, s2)?;
    let l = lambda as f32;
    let image = s1.image.zip_map(&s2.image, |a, b| l * a + (1.0 - l) * b)?;
    Ok(Sample { image, label: mix_labels(s1.label, s2.label, lambda) })
}

/// Mixup with `λ ~ Beta(α, α)`. Returns the sample and `λ`.
pub fn mixup(s1: &Sample, s2: &Sample, alpha: f64, rng: &mut RngState) -> Result<(Sample, f64)> {
    let lambda = rng.beta(alpha, alpha);
    Ok((mixup_with_lambda(s1, s2, lambda)?, lambda))
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

/// Pastes `rect` of `s2` into `s1`; `λ = 1 − area/(H·W)`.
pub fn cutmix_with_box(s1: &Sample, s2: &Sample, rect: Rect) -> Result<(Sample, f64)> {
    check_pair(s1, s2)?;
    let (c, h, w) = (s1.image.dim(0), s1.image.dim(1), s1.image.dim(2));
    if rect.y + rect.h > h || rect.x + rect.w > w {
        return Err(config_err(format!("box {rect:?} exceeds the {h}×{w} image")));
    }
    let mut image = s1.image.clone();
    for ch in 0..c {
        for y in rect.y..rect.y + rect.h {
            let row = (ch * h + y) * w;
            image.data_mut()[row + rect.x..row + rect.x + rect.w]
                .copy_from_slice(&s2.image.data()[row + rect.x..row + rect.x + rect.w]);
        }
    }
    let lambda = 1.0 - rect.area() as f64 / (h * w) as f64;
    Ok((Sample { image, label: mix_labels(s1.label, s2.label, lambda) }, lambda))
}

/// CutMix: box of area `(1−λ₀)·H·W` with `λ₀ ~ Beta(α, α)`, centred
/// uniformly and clipped to the image; `λ` is recomputed from the clipped
/// area.
pub fn cutmix(s1: &Sample, s2: &Sample, alpha: f64, rng: &mut RngState) -> Result<(Sample, f64)> {
    let (h, w) = (s1.image.dim(1), s1.image.dim(2));
    let lambda0 = rng.beta(alpha, alpha);
    let r = (1.0 - lambda0).sqrt();
    let (bh, bw) = ((h as f64 * r).round() as isize, (w as f64 * r).round() as isize);
    let (cy, cx) = (rng.below(h) as isize, rng.below(w) as isize);
    let y0 = (cy - bh / 2).clamp(0, h as isize) as usize;
    let y1 = (cy - bh / 2 + bh).clamp(0, h as isize) as usize;
    let x0 = (cx - bw / 2).clamp(0, w as isize) as usize;
    let x1 = (cx - bw / 2 + bw).clamp(0, w as isize) as usize;
    cutmix_with_box(s1, s2, Rect { y: y0, x: x0, h: y1 - y0, w: x1 - x0 })
}

/// With probability `p`, fills one rectangle whose area fraction lies in
/// `area` (aspect ratio in `[0.3, 3.3]`) with uniform noise.
pub fn random_erase(img: &Tensor<f32>, p: f64, area: [f64; 2], rng: &mut RngState) -> (Tensor<f32>, Option<Rect>) {
    if !rng.bernoulli(p) {
        return (img.clone(), None);
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let total = (h * w) as f64;
    let fits = |bh: usize, bw: usize| {
        let f = (bh * bw) as f64 / total;
        bh >= 1 && bw >= 1 && bh <= h && bw <= w && f >= area[0] && f <= area[1]
    };
    let mut size = None;
    for _ in 0..10 {
        let target = rng.uniform_range(area[0], area[1]) * total;
        let aspect = rng.uniform_range(0.3f64.ln(), 3.3f64.ln()).exp();
        let bh = (target * aspect).sqrt().round() as usize;
        let bw = (target / aspect).sqrt().round() as usize;
        if fits(bh, bw) {
            size = Some((bh, bw));
            break;
        }
    }
    // Fallback: the smallest near-square box inside the range.
    let (bh, bw) = size.unwrap_or_else(|| {
        (1..=h)
            .flat_map(|a| [(a, a), (a, a + 1)])
            .find(|&(a, b)| fits(a, b))
            .unwrap_or((((area[0] * total).sqrt().ceil() as usize).clamp(1, h), ((area[0] * total).sqrt().ceil() as usize).clamp(1, w)))
    });
    let rect = Rect { y: rng.below(h - bh + 1), x: rng.below(w - bw + 1), h: bh, w: bw };
    let mut out = img.clone();
    for ch in 0..c {
        for y in rect.y..rect.y + bh {
            for x in rect.x..rect.x + bw {
                out.data_mut()[(ch * h + y) * w + x] = rng.uniform() as f32;
            }
        }
    }
    (out, Some(rect))
}

/// Per-sample RandAugment and erasing, then pairwise mixing with a shuffled
/// partner. Each sample draws from its own stream `(seed, index)`.
pub fn augment_batch(samples: &[Sample], cfg: &AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    if cfg.is_identity() {
        return Ok(samples.to_vec());
    }
    let mut out: Vec<Sample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = RngState::derive_indexed(seed, "augment", i as u64);
            let mut img = s.image.clone();
            if cfg.rand_augment {
                img = rand_augment(&img, cfg.num_ops, cfg.magnitude, &mut rng);
            }
            if cfg.erase_prob > 0.0 {
                img = random_erase(&img, cfg.erase_prob, cfg.erase_area, &mut rng).0;
            }
            Sample { image: img, label: s.label }
        })
        .collect();
    if cfg.mixup_alpha > 0.0 || cfg.cutmix_alpha > 0.0 {
        let mut rng = RngState::derive(seed, "mix");
        let mut partner: Vec<usize> = (0..out.len()).collect();
        rng.shuffle(&mut partner);
        let base = out.clone();
        for (i, &j) in partner.iter().enumerate() {
            let use_cutmix = match (cfg.mixup_alpha > 0.0, cfg.cutmix_alpha > 0.0) {
                (true, true) => rng.bernoulli(0.5),
                (false, true) => true,
                _ => false,
            };
            out[i] = if use_cutmix {
                cutmix(&base[i], &base[j], cfg.cutmix_alpha, &mut rng)?.0
            } else {
                mixup(&base[i], &base[j], cfg.mixup_alpha, &mut rng)?.0
            };
        }
    }
    Ok(out)
}
