//! Images, manifests, the synthetic corpus, augmentation and corruptions.

pub mod augment;
pub mod corrupt;
pub mod image_io;
pub mod manifest;
pub mod synth;

use texvit_autodiff::Tensor;

pub use augment::{augment_batch, cutmix, cutmix_with_box, mixup, mixup_with_lambda, rand_augment, rand_augment_ops, random_erase, AugmentConfig, AugmentOp, Rect};
pub use corrupt::{add_noise, compress, corruption, corruptions, gaussian_blur, Corruption, CorruptionKind, CorruptionSpec};
pub use image_io::decode_image;
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
pub use synth::{synth_images, synth_texture_dataset, SynthCorpus};

/// One training example: a `3×H×W` image in `[0, 1]` and a two-class
/// label distribution `[p_real, p_fake]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: [f32; 2],
}

impl Sample {
    pub fn hard(image: Tensor<f32>, label: u8) -> Self {
        let label = if label == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        Self { image, label }
    }

    /// The class with the larger weight (ties go to 0).
    pub fn class(&self) -> u8 {
        u8::from(self.label[1] > self.label[0])
    }
}
