use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use texvit_autodiff::{ParamStore, RngState, Tape, Tensor};

use super::adam::{AdamConfig, AdamState};
use super::checkpoint::Checkpoint;
use super::eval::predict_scores;
use crate::config::TexViTConfig;
use crate::data::augment::augment_batch;
use crate::data::{AugmentConfig, DatasetManifest, Sample};
use crate::error::{config_err, Error, Result};
use crate::model::{init_params, texvit_forward, Graph, Mode, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Run on a single worker thread. Results do not depend on the thread
    /// count either way; this only removes scheduling as a variable.
    pub reproducible: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            reproducible: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err(format!("learning_rate {} must be a non-negative number", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err("batch_size and epochs must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(config_err("adam_eps must be positive"));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Observer for the training loop. `validation_score` may replace the
/// computed accuracy, which lets tests drive best-epoch selection.
pub trait TrainHooks {
    fn on_epoch(&mut self, _record: &EpochRecord) {}

    fn validation_score(&mut self, _epoch: usize, computed: f64) -> f64 {
        computed
    }
}

/// Logs one line per epoch.
pub struct LogHooks;

impl TrainHooks for LogHooks {
    fn on_epoch(&mut self, r: &EpochRecord) {
        log::info!("epoch {:>3}  loss {:.5}  val_acc {:.4}", r.epoch, r.train_loss, r.val_accuracy);
    }
}

/// Highest score wins; ties keep the earliest epoch.
#[derive(Clone, Debug, Default)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// True when `score` becomes the new best.
    pub fn offer(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, s)) if score <= s => false,
            _ => {
                self.best = Some((epoch, score));
                true
            }
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Folds the batch statistics recorded during one step into the running
/// buffers: `r ← (1−m)·r + m·batch`.
fn update_running_stats(params: &mut ParamStore<f32>, tape: &Tape<f32>) -> Result<()> {
    let m = BN_MOMENTUM as f32;
    for (prefix, stats) in tape.batch_stats() {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let name = format!("{prefix}.{suffix}");
            let e = params.get_mut(&name).ok_or_else(|| config_err(format!("no buffer `{name}`")))?;
            e.value = e.value.zip_map(batch, |r, b| (1.0 - m) * r + m * b)?;
        }
    }
    Ok(())
}

fn targets(batch: &[Sample]) -> Tensor<f32> {
    Tensor::new([batch.len(), 2], batch.iter().flat_map(|s| s.label).collect()).expect("N×2 targets")
}

pub fn accuracy(scores: &[f64], samples: &[Sample]) -> f64 {
    let correct = scores.iter().zip(samples).filter(|(&s, x)| u8::from(s >= 0.5) == x.class()).count();
    correct as f64 / samples.len().max(1) as f64
}

fn check_images(model: &TexViTConfig, samples: &[Sample], what: &str) -> Result<()> {
    let want = [model.backbone.input_channels, model.image_size, model.image_size];
    if let Some(s) = samples.iter().find(|s| s.image.shape() != want) {
        return Err(config_err(format!(
            "{what} image has shape {:?}, the model expects {:?}",
            s.image.shape(),
            want
        )));
    }
    Ok(())
}

/// Trains from a fresh initialization and returns the best-validation
/// weights.
pub fn train(
    model: &TexViTConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(config_err("training and validation sets must be non-empty"));
    }
    check_images(model, train_set, "training")?;
    check_images(model, val_set, "validation")?;

    let mut params = init_params(model, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let adam_cfg = cfg.adam();
    let mut best = BestTracker::default();
    let mut best_ckpt: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        RngState::derive_indexed(cfg.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = RngState::derive_indexed(cfg.seed, "step", step).next_u64();
            step += 1;
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let batch = augment_batch(&batch, &cfg.augment, step_seed)?;
            let images = Tensor::stack(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &params, Mode::Train { seed: step_seed });
            let x = g.tape.input(images);
            let out = texvit_forward(model, &mut g, x)?;
            let loss = tape.cross_entropy(out.logits, targets(&batch))?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1, loss: lv });
            }
            let grads = tape.backward(loss)?;
            params.load_grads(&grads)?;
            adam.step(&mut params, cfg.learning_rate, &adam_cfg)?;
            update_running_stats(&mut params, &tape)?;
            loss_sum += lv;
            batches += 1;
        }

        let computed = accuracy(&predict_scores(model, &params, val_set)?, val_set);
        let val_accuracy = hooks.validation_score(epoch, computed);
        let record = EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_accuracy };
        hooks.on_epoch(&record);
        history.push(record);
        if best.offer(epoch, val_accuracy) {
            // Gradients are not part of a checkpoint.
            let mut snapshot = params.clone();
            snapshot.zero_grads();
            best_ckpt = Some(Checkpoint {
                config: model.clone(),
                params: snapshot,
                adam: Some(adam.clone()),
                best_epoch: epoch,
                best_val_accuracy: val_accuracy,
            });
        }
    }
    let checkpoint = best_ckpt.expect("at least one epoch ran");
    Ok(TrainOutcome { checkpoint, history })
}

/// Rejects a training/validation pair that shares any image file.
pub fn check_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let seen: HashSet<_> = a.canonical_paths().into_iter().collect();
    if let Some(p) = b.canonical_paths().into_iter().find(|p| seen.contains(p)) {
        return Err(Error::Protocol(format!("`{}` appears in both training and held-out data", p.display())));
    }
    Ok(())
}

/// [`train`] on manifests, which must be non-empty and disjoint.
pub fn train_manifests(
    model: &TexViTConfig,
    cfg: &TrainConfig,
    train_m: &DatasetManifest,
    val_m: &DatasetManifest,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    if train_m.is_empty() || val_m.is_empty() {
        return Err(config_err("training and validation manifests must be non-empty"));
    }
    check_disjoint(train_m, val_m)?;
    let train_set = train_m.load_samples()?;
    let val_set = val_m.load_samples()?;
    train(model, cfg, &train_set, &val_set, hooks)
}
