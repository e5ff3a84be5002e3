//! Test-time corruptions: Gaussian blur, additive noise and block-DCT
//! compression, selectable by name.

use std::fmt;

use serde::{Deserialize, Serialize};
use texvit_autodiff::{RngState, Tensor};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    None,
    Blur,
    Noise,
    Compress,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] =
        [CorruptionKind::None, CorruptionKind::Blur, CorruptionKind::Noise, CorruptionKind::Compress];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Compress => "compress",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err(format!("unknown corruption `{s}` (none, blur, noise, compress)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Clamp noisy images to `[0, 1]`. Off keeps the noise statistics exact.
    pub noise_clamp: bool,
    pub compress_factor: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::None,
            blur_kernel: 7,
            blur_sigma: 25.0,
            noise_mean: 0.0,
            noise_std: 0.2,
            noise_clamp: false,
            compress_factor: 3.0,
        }
    }
}

impl CorruptionSpec {
    pub fn of(kind: CorruptionKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel.is_multiple_of(2) {
            return Err(config_err(format!("blur kernel {} must be odd", self.blur_kernel)));
        }
        if self.blur_sigma <= 0.0 || !self.blur_sigma.is_finite() {
            return Err(config_err(format!("blur sigma {} must be positive", self.blur_sigma)));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(config_err(format!("noise std {} must be non-negative", self.noise_std)));
        }
        if self.compress_factor < 1.0 || !self.compress_factor.is_finite() {
            return Err(config_err(format!("compress factor {} must be at least 1", self.compress_factor)));
        }
        Ok(())
    }

    /// Applies the configured corruption. `rng` is only drawn from by noise.
    pub fn apply(&self, img: &Tensor<f32>, rng: &mut RngState) -> Tensor<f32> {
        corruption(self.kind).apply(img, self, rng)
    }
}

/// A named image degradation.
pub trait Corruption: Send + Sync {
    fn kind(&self) -> CorruptionKind;
    fn apply(&self, img: &Tensor<f32>, spec: &CorruptionSpec, rng: &mut RngState) -> Tensor<f32>;
}

struct Identity;
struct Blur;
struct Noise;
struct Compress;

impl Corruption for Identity {
    fn kind(&self) -> CorruptionKind {
        CorruptionKind::None
    }

    fn apply(&self, img: &Tensor<f32>, _: &CorruptionSpec, _: &mut RngState) -> Tensor<f32> {
        img.clone()
    }
}

impl Corruption for Blur {
    fn kind(&self) -> CorruptionKind {
        CorruptionKind::Blur
    }

    fn apply(&self, img: &Tensor<f32>, spec: &CorruptionSpec, _: &mut RngState) -> Tensor<f32> {
        gaussian_blur(img, spec.blur_kernel, spec.blur_sigma)
    }
}

impl Corruption for Noise {
    fn kind(&self) -> CorruptionKind {
        CorruptionKind::Noise
    }

    fn apply(&self, img: &Tensor<f32>, spec: &CorruptionSpec, rng: &mut RngState) -> Tensor<f32> {
        add_noise(img, spec.noise_mean, spec.noise_std, rng, spec.noise_clamp)
    }
}

impl Corruption for Compress {
    fn kind(&self) -> CorruptionKind {
        CorruptionKind::Compress
    }

    fn apply(&self, img: &Tensor<f32>, spec: &CorruptionSpec, _: &mut RngState) -> Tensor<f32> {
        compress(img, spec.compress_factor)
    }
}

pub fn corruptions() -> Vec<Box<dyn Corruption>> {
    vec![Box::new(Identity), Box::new(Blur), Box::new(Noise), Box::new(Compress)]
}

pub fn corruption(kind: CorruptionKind) -> Box<dyn Corruption> {
    corruptions().into_iter().find(|c| c.kind() == kind).expect("every kind is registered")
}

/// Normalized 1-D Gaussian weights `exp(−d²/2σ²)` for `d = −k/2 ..= k/2`.
pub fn gaussian_kernel_1d(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge (`…2 1 | 0 1 2 … n−1 | n−2…`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable convolution of every `H×W` plane with `weights` along both
/// axes, reflect-padded.
pub fn separable_filter(img: &Tensor<f32>, weights: &[f64]) -> Tensor<f32> {
    let shape = img.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let r = (weights.len() / 2) as isize;
    let mut out = img.clone();
    let mut tmp = vec![0.0f64; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| k * plane[y * w + reflect(x as isize + i as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| k * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                    .sum();
                plane[y * w + x] = v as f32;
            }
        }
    }
    out
}

/// Separable normalized Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Tensor<f32>, kernel: usize, sigma: f64) -> Tensor<f32> {
    separable_filter(img, &gaussian_kernel_1d(kernel, sigma))
}

/// Adds i.i.d. `N(mean, std²)` noise, optionally clamping to `[0, 1]`.
pub fn add_noise(img: &Tensor<f32>, mean: f64, std: f64, rng: &mut RngState, clamp: bool) -> Tensor<f32> {
    if std == 0.0 && mean == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let n = *v as f64 + mean + std * rng.gaussian();
        *v = if clamp { n.clamp(0.0, 1.0) } else { n } as f32;
    }
    out
}

/// Baseline luminance quantization table, row-major over `(v, u)`.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality for a degradation factor: `round(100 / factor)`, at least 1.
pub fn quality_for_factor(factor: f64) -> u32 {
    ((100.0 / factor).round() as u32).clamp(1, 100)
}

/// Luminance table scaled for `quality` (IJG convention).
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(&LUMA_QUANT) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

/// Orthonormal `n`-point DCT-II basis, row-major `C[u][x]`.
fn dct_basis(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for u in 0..n {
        let a = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            c[u * n + x] = a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// Separable 2-D DCT for `h×w` blocks.
struct BlockDct {
    h: usize,
    w: usize,
    cy: Vec<f64>,
    cx: Vec<f64>,
}

impl BlockDct {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, cy: dct_basis(h), cx: dct_basis(w) }
    }

    /// Forward (`[y][x]` → `[v][u]`) or inverse transform.
    fn apply(&self, block: &[f64], inverse: bool) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        // forward: out[v][u] = Σ C[v][y] C[u][x] b[y][x]; inverse swaps the roles.
        let k = |c: &[f64], n: usize, a: usize, b: usize| if inverse { c[b * n + a] } else { c[a * n + b] };
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for u in 0..w {
                tmp[y * w + u] = (0..w).map(|x| k(&self.cx, w, u, x) * block[y * w + x]).sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for v in 0..h {
            for u in 0..w {
                out[v * w + u] = (0..h).map(|y| k(&self.cy, h, v, y) * tmp[y * w + u]).sum();
            }
        }
        out
    }
}

/// 2-D forward DCT of an 8×8 block (row-major `[y][x]` → `[v][u]`).
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    BlockDct::new(8, 8).apply(block, false).try_into().expect("64 coefficients")
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    BlockDct::new(8, 8).apply(coef, true).try_into().expect("64 values")
}

/// Position of frequency `k` of an `n`-point transform on the 8-point grid.
fn freq8(k: usize, n: usize) -> usize {
    (k * 8 / n).min(7)
}

/// Visits the 8×8 tiling of every plane, with smaller blocks along the
/// right and bottom edges, letting `f` rewrite each block in the `0..255`
/// range.
fn for_each_block(img: &Tensor<f32>, mut f: impl FnMut(&mut [f64], &BlockDct)) -> Tensor<f32> {
    let shape = img.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = img.clone();
    let mut dcts: Vec<BlockDct> = Vec::new();
    let mut block = Vec::with_capacity(64);
    for plane in out.data_mut().chunks_mut(h * w) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let (bh, bw) = (8.min(h - by), 8.min(w - bx));
                let i = match dcts.iter().position(|d| (d.h, d.w) == (bh, bw)) {
                    Some(i) => i,
                    None => {
                        dcts.push(BlockDct::new(bh, bw));
                        dcts.len() - 1
                    }
                };
                block.clear();
                for y in 0..bh {
                    block.extend((0..bw).map(|x| plane[(by + y) * w + bx + x] as f64 * 255.0));
                }
                f(&mut block, &dcts[i]);
                for y in 0..bh {
                    for x in 0..bw {
                        plane[(by + y) * w + bx + x] = (block[y * bw + x] / 255.0).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    out
}

/// Head-room kept inside each quantization cell so that `f32` storage of
/// the output cannot tip a coefficient into the neighbouring level.
const LEVEL_MARGIN: f64 = 1e-3;
/// Dykstra stops once the two projections agree this closely (`0..255`).
const PROJ_TOL: f64 = 1e-5;
const MAX_PROJ_ITERS: usize = 2000;

/// Nearest point to the centre of the quantization cell of `levels` that
/// lies in `[0, 255]` and inside the cell, found with Dykstra's alternating
/// projections. `None` when the two sets do not meet.
fn project_into_range(dct: &BlockDct, levels: &[f64], step: &[f64]) -> Option<Vec<f64>> {
    let centre: Vec<f64> = levels.iter().zip(step).map(|(l, s)| l * s).collect();
    let start = dct.apply(&centre, true);
    if start.iter().all(|v| (-128.0..=127.0).contains(v)) {
        return Some(start);
    }
    let n = start.len();
    let mut x = start;
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..MAX_PROJ_ITERS {
        let y: Vec<f64> = x.iter().zip(&p).map(|(a, b)| (a + b).clamp(-128.0, 127.0)).collect();
        for i in 0..n {
            p[i] += x[i] - y[i];
        }
        let shifted: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
        let coef: Vec<f64> = dct
            .apply(&shifted, false)
            .iter()
            .zip(&centre)
            .zip(step)
            .map(|((&c, &m), &s)| {
                let half = 0.5 * s - LEVEL_MARGIN;
                c.clamp(m - half, m + half)
            })
            .collect();
        let next = dct.apply(&coef, true);
        for i in 0..n {
            q[i] += y[i] - next[i];
        }
        let gap = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let moved = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if gap <= PROJ_TOL && moved <= PROJ_TOL {
            return Some(x);
        }
    }
    None
}

/// Block-DCT quantization at quality `round(100/factor)`. Per block and
/// channel: forward DCT of the level-shifted `0..255` values, DC rounded to
/// a unit step, AC coefficients rounded to multiples of the scaled
/// luminance table, inverse DCT. Edge blocks use a DCT of their own size
/// with the table sampled at matching frequencies.
///
/// Strong ringing can leave `[0, 255]`, and plain clipping would shift
/// coefficients into other levels, so a second pass would land elsewhere.
/// Instead the output is the point nearest the dequantized block that is in
/// range and still quantizes to the same levels. A second pass therefore
/// solves the same problem and the operation is idempotent. When no such
/// point exists (rounding ties on saturated blocks, heavy ringing) the AC
/// magnitudes are shrunk by a growing fraction of a step before rounding
/// until one does, ending at the DC-only block.
pub fn compress(img: &Tensor<f32>, factor: f64) -> Tensor<f32> {
    let q = quant_table(quality_for_factor(factor));
    for_each_block(img, |block, dct| {
        let (bh, bw) = (dct.h, dct.w);
        let step: Vec<f64> = (0..bh * bw)
            .map(|k| if k == 0 { 1.0 } else { q[freq8(k / bw, bh) * 8 + freq8(k % bw, bw)] })
            .collect();
        let shifted: Vec<f64> = block.iter().map(|v| v - 128.0).collect();
        let coef = dct.apply(&shifted, false);
        // Shrink schedule in units of a step: ties first, then whole steps
        // until every AC level is zero.
        let top = coef.iter().zip(&step).skip(1).map(|(c, s)| (c / s).abs()).fold(0.0, f64::max) + 1.0;
        let shrinks = [0.0, 0.01, 0.05, 0.1, 0.25].into_iter().chain((2..).map(|i| 0.25 * i as f64));
        let mut out = None;
        for t in shrinks {
            let t = t.min(top);
            let levels: Vec<f64> = coef
                .iter()
                .zip(&step)
                .enumerate()
                .map(|(i, (&c, &st))| {
                    let l = c / st;
                    if i == 0 { l.round() } else { (l.signum() * (l.abs() - t).max(0.0)).round() }
                })
                .collect();
            out = project_into_range(dct, &levels, &step);
            if out.is_some() {
                break;
            }
            if t == top {
                out = Some(dct.apply(&levels, true).iter().map(|v| v.clamp(-128.0, 127.0)).collect());
                break;
            }
        }
        for (b, r) in block.iter_mut().zip(out.expect("DC-only fallback")) {
            *b = r + 128.0;
        }
    })
}

/// Total squared DCT coefficient energy in the top quartile of frequencies
/// (`u ≥ 4` and `v ≥ 4` on the 8-point grid) over every block of every
/// channel, on the `0..255` scale.
pub fn high_frequency_energy(img: &Tensor<f32>) -> f64 {
    let mut total = 0.0;
    for_each_block(img, |block, dct| {
        let coef = dct.apply(block, false);
        for v in 0..dct.h {
            for u in 0..dct.w {
                if freq8(v, dct.h) >= 4 && freq8(u, dct.w) >= 4 {
                    total += coef[v * dct.w + u].powi(2);
                }
            }
        }
    });
    total
}
