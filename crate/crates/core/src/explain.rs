//! Grad-CAM heatmaps over named backbone activations, and PNG overlays.

use std::path::Path;

use texvit_autodiff::{Tape, Tensor};

use crate::data::image_io::write_png;
use crate::error::{config_err, Result};
use crate::model::{texvit_forward, Graph, Mode};
use crate::train::Checkpoint;

/// Default layer: the last backbone stage.
pub const DEFAULT_LAYER: &str = "stage4";

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `H×W`, values in `[0, 1]`.
    pub values: Tensor<f32>,
    pub layer: String,
    pub target_class: usize,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.dim(0)
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }
}

/// Bilinear resize of an `h×w` plane (half-pixel centres, edge clamped).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Grad-CAM from one sample's activation and gradient, both `C×h×w`:
/// `ReLU(Σ_c mean(∂y/∂A_c)·A_c)`, upsampled to `out_h×out_w` and divided
/// by its maximum (left at zero when identically zero).
pub fn cam_from_activation_and_grad(act: &Tensor<f32>, grad: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if act.rank() != 3 || act.shape() != grad.shape() {
        return Err(config_err(format!(
            "activation {:?} and gradient {:?} must be matching C×h×w maps",
            act.shape(),
            grad.shape()
        )));
    }
    let (c, h, w) = (act.dim(0), act.dim(1), act.dim(2));
    let plane = h * w;
    let mut map = vec![0.0f64; plane];
    for ch in 0..c {
        let g = &grad.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for (m, &a) in map.iter_mut().zip(&act.data()[ch * plane..(ch + 1) * plane]) {
            *m += weight * a as f64;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut up = resize_bilinear(&map, h, w, out_h, out_w);
    let max = up.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v /= max);
    }
    Ok(up)
}

/// Heatmap for one `3×H×W` image. `target_class = None` uses the predicted
/// class.
pub fn grad_cam(ckpt: &Checkpoint, img: &Tensor<f32>, layer: &str, target_class: Option<usize>) -> Result<Heatmap> {
    let cfg = &ckpt.config;
    if let Some(t) = target_class.filter(|&t| t >= cfg.num_classes) {
        return Err(config_err(format!("target class {t} out of range for {} classes", cfg.num_classes)));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &ckpt.params, Mode::Eval);
    let x = g.tape.input_with_grad(Tensor::stack(std::slice::from_ref(img))?);
    let out = texvit_forward(cfg, &mut g, x)?;
    let Some(&(_, act)) = g.layers.iter().find(|(n, _)| n == layer) else {
        let names: Vec<_> = g.layers.iter().map(|(n, _)| n.as_str()).collect();
        return Err(config_err(format!("unknown layer `{layer}` (available: {})", names.join(", "))));
    };
    let logits = tape.value(out.logits).data().to_vec();
    let target = target_class.unwrap_or_else(|| usize::from(logits[1] > logits[0]));
    let y = tape.narrow(out.logits, 1, target, 1)?;
    let y = tape.sum(y);
    let grads = tape.backward(y)?;
    let a = tape.value(act);
    let shape = [a.dim(1), a.dim(2), a.dim(3)];
    let a = a.reshape(shape)?;
    let da = match grads.get(act) {
        Some(d) => d.reshape(shape)?,
        None => Tensor::zeros(shape),
    };
    let values = cam_from_activation_and_grad(&a, &da, h, w)?;
    Ok(Heatmap {
        values: Tensor::new([h, w], values.into_iter().map(|v| v as f32).collect())?,
        layer: layer.to_string(),
        target_class: target,
    })
}

/// Blue→red ramp: `(255v, 0, 255(1−v))`.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

/// Original image on the left; on the right, each pixel blended towards
/// the ramp colour with weight `0.5·heat`, so cold regions keep the
/// original pixels.
pub fn overlay_image(img: &Tensor<f32>, heat: &Heatmap) -> Result<Tensor<f32>> {
    let (h, w) = (img.dim(1), img.dim(2));
    if img.rank() != 3 || img.dim(0) != 3 || (heat.height(), heat.width()) != (h, w) {
        return Err(config_err(format!(
            "image {:?} and heatmap {:?} are not compatible",
            img.shape(),
            heat.values.shape()
        )));
    }
    let mut out = Tensor::zeros([3, h, 2 * w]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = img.data()[(c * h + y) * w + x];
                let hv = heat.values.data()[y * w + x];
                let colour = colormap(hv as f64)[c] as f32 / 255.0;
                let a = 0.5 * hv;
                let d = out.data_mut();
                d[(c * h + y) * 2 * w + x] = v;
                d[(c * h + y) * 2 * w + w + x] = (1.0 - a) * v + a * colour;
            }
        }
    }
    Ok(out)
}

pub fn export_overlay(img: &Tensor<f32>, heat: &Heatmap, path: &Path) -> Result<()> {
    write_png(path, &overlay_image(img, heat)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn upsampling_constant_stays_constant() {
        let up = resize_bilinear(&[0.3; 4], 2, 2, 7, 5);
        assert!(up.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
}
