use texvit_autodiff::{ParamStore, RngState, Tensor};

use super::checkpoint::Checkpoint;
use crate::config::TexViTConfig;
use crate::data::{CorruptionSpec, DatasetManifest, Sample};
use crate::error::{config_err, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::predict_logits;

/// Inference batch size. Fixed so that results never depend on how a
/// caller chunks its data.
pub const EVAL_BATCH: usize = 64;

/// `softmax(logits)[1] = 1 / (1 + e^(l0 − l1))`.
fn fake_probability(l0: f32, l1: f32) -> f64 {
    1.0 / (1.0 + (l0 as f64 - l1 as f64).exp())
}

/// Class-1 probabilities in evaluation mode.
pub fn predict_scores(cfg: &TexViTConfig, params: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<f64>> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    predict_images(cfg, params, &images)
}

pub fn predict_images(cfg: &TexViTConfig, params: &ParamStore<f32>, images: &[Tensor<f32>]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let logits = predict_logits(cfg, params, Tensor::stack(chunk)?)?;
        scores.extend(logits.data().chunks_exact(2).map(|l| fake_probability(l[0], l[1])));
    }
    Ok(scores)
}

/// Applies `corruption` to every image (sample `i` draws from stream
/// `(seed, "corrupt", i)`), scores the result and computes the metrics.
pub fn evaluate(ckpt: &Checkpoint, samples: &[Sample], corruption: &CorruptionSpec, seed: u64) -> Result<MetricsReport> {
    corruption.validate()?;
    let want = [ckpt.config.backbone.input_channels, ckpt.config.image_size, ckpt.config.image_size];
    if let Some(s) = samples.iter().find(|s| s.image.shape() != want) {
        return Err(config_err(format!(
            "checkpoint expects {:?} images, manifest has {:?}",
            want,
            s.image.shape()
        )));
    }
    let images: Vec<Tensor<f32>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = RngState::derive_indexed(seed, "corrupt", i as u64);
            corruption.apply(&s.image, &mut rng)
        })
        .collect();
    let scores = predict_images(&ckpt.config, &ckpt.params, &images)?;
    let labels: Vec<u8> = samples.iter().map(Sample::class).collect();
    compute_metrics(&scores, &labels, corruption.kind.name())
}

pub fn evaluate_manifest(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(config_err("evaluation manifest is empty"));
    }
    evaluate(ckpt, &manifest.load_samples()?, corruption, seed)
}
