//! End-to-end finite-difference probe for the whole network, registered
//! alongside the primitive probes.

use texvit_autodiff::{
    grad_check, primitive_probes, GradCheckOptions, GradCheckReport, GradProbe, RngState, Tensor,
};

use super::{init_params, texvit_forward, Graph, Mode};
use crate::config::{preset, TexViTConfig};
use crate::error::Error;

fn to_tensor_err(e: Error) -> texvit_autodiff::Error {
    match e {
        Error::Tensor(t) => t,
        other => texvit_autodiff::Error::Contract { op: "texvit_forward", detail: other.to_string() },
    }
}

/// Cross-entropy of the full network on a random batch, checked in `f64`
/// with batch-statistics normalization and no drop path.
pub struct TexViTProbe {
    pub name: &'static str,
    pub config: TexViTConfig,
    pub batch: usize,
}

impl TexViTProbe {
    pub fn micro() -> Self {
        Self { name: "texvit_micro", config: preset("micro").expect("micro preset"), batch: 2 }
    }
}

impl GradProbe for TexViTProbe {
    fn name(&self) -> &'static str {
        self.name
    }

    fn check(&self, instance_seed: u64, opts: &GradCheckOptions) -> texvit_autodiff::Result<GradCheckReport> {
        let cfg = &self.config;
        let mut params = init_params(cfg, instance_seed).map_err(to_tensor_err)?.cast::<f64>();
        let mut rng = RngState::derive(instance_seed, self.name);
        let s = cfg.image_size;
        let images = rng.uniform_tensor(&[self.batch, cfg.backbone.input_channels, s, s], 0.0, 1.0);
        let targets = Tensor::from_fn([self.batch, 2], |i| if (i / 2) % 2 == i % 2 { 1.0 } else { 0.0 });
        grad_check(
            |p, tape| {
                let mut g = Graph::new(tape, p, Mode::Check);
                let x = g.tape.input(images.clone());
                let out = texvit_forward(cfg, &mut g, x).map_err(to_tensor_err)?;
                tape.cross_entropy(out.logits, targets.clone())
            },
            &mut params,
            opts,
        )
    }
}

/// Every primitive probe followed by the end-to-end micro network.
pub fn all_probes() -> Vec<Box<dyn GradProbe>> {
    let mut v = primitive_probes();
    v.push(Box::new(TexViTProbe::micro()));
    v
}

pub fn find_probe(name: &str) -> Option<Box<dyn GradProbe>> {
    all_probes().into_iter().find(|p| p.name() == name)
}
