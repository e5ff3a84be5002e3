//! The Tex-ViT network: ResNet-18 with texture taps feeding a dual-branch
//! cross-attention transformer.

pub mod backbone;
pub mod gradcheck;
pub mod texture;
pub mod vit;

use texvit_autodiff::{BatchNormMode, ParamStore, RngState, Scalar, Tape, Tensor, Var};

use crate::config::{NormKind, TexViTConfig};
use crate::error::Result;

pub use backbone::{resnet18_forward, FeatureStreams};
pub use texture::{texture_block, GramMatrix};
pub use vit::{classify, cross_attention_fuse, encoder_block, patch_embed};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a forward pass treats normalization and stochastic depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, drop path active with streams derived from `seed`.
    Train { seed: u64 },
    /// Running statistics, no drop path.
    Eval,
    /// Batch statistics, no drop path: deterministic and differentiable
    /// everywhere the network is, for finite-difference checks.
    Check,
}

/// A forward pass in progress: the tape, the parameters it reads and the
/// side outputs collected along the way.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    /// Every attention node, self and cross, in evaluation order.
    pub attention: Vec<Var>,
    /// Named backbone activations (`stem`, `stage1..`, `tap0..`).
    pub layers: Vec<(String, Var)>,
    drop_calls: u64,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { tape, params, mode, attention: Vec::new(), layers: Vec::new(), drop_calls: 0 }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        Ok(self.tape.param(self.params, name)?)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = if bias { Some(self.p(&format!("{prefix}.b"))?) } else { None };
        Ok(self.tape.conv2d(x, w, b, stride, pad)?)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.layer_norm(x, g, b, T::from_f64_lossy(NORM_EPS))?)
    }

    /// Per-channel normalization of an `N×C×H×W` map.
    pub fn norm2d(&mut self, x: Var, prefix: &str, kind: NormKind) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        match kind {
            NormKind::Batch => {
                let eps = T::from_f64_lossy(NORM_EPS);
                match self.mode {
                    Mode::Eval => {
                        let mean = self.params.value(&format!("{prefix}.running_mean"))?;
                        let var = self.params.value(&format!("{prefix}.running_var"))?;
                        Ok(self.tape.batch_norm(x, g, b, Some((mean, var)), BatchNormMode::Infer, eps, prefix)?)
                    }
                    Mode::Train { .. } | Mode::Check => {
                        Ok(self.tape.batch_norm(x, g, b, None, BatchNormMode::Train, eps, prefix)?)
                    }
                }
            }
            NormKind::Layer => {
                // Standardize each sample over C·H·W, then apply the
                // per-channel affine through an identity-statistics batch norm.
                let shape = self.tape.shape(x).to_vec();
                let flat: usize = shape[1..].iter().product();
                let r = self.tape.reshape(x, &[shape[0], flat])?;
                let ones = self.tape.input(Tensor::ones([flat]));
                let zeros = self.tape.input(Tensor::zeros([flat]));
                let n = self.tape.layer_norm(r, ones, zeros, T::from_f64_lossy(NORM_EPS))?;
                let n = self.tape.reshape(n, &shape)?;
                let c = shape[1];
                let (m, v) = (Tensor::zeros([c]), Tensor::ones([c]));
                Ok(self.tape.batch_norm(n, g, b, Some((&m, &v)), BatchNormMode::Infer, T::zero(), prefix)?)
            }
        }
    }

    /// Stochastic depth on a residual branch `x` (leading axis = sample).
    pub fn drop_path(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Mode::Train { seed } = self.mode else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        let mut rng = RngState::derive_indexed(seed, "drop_path", self.drop_calls);
        self.drop_calls += 1;
        let keep = 1.0 - rate;
        let n = self.tape.shape(x)[0];
        let factors =
            (0..n).map(|_| if rng.bernoulli(keep) { T::from_f64_lossy(1.0 / keep) } else { T::zero() }).collect();
        Ok(self.tape.scale_rows(x, factors)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−√(6/fan_in), √(6/fan_in))`.
    HeUniform { fan_in: usize },
    /// Normal with the given std, redrawn outside ±2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) {
        self.0.push(ParamSpec { name, shape, init, trainable });
    }

    fn conv(&mut self, prefix: &str, o: usize, c: usize, k: usize, bias: bool) {
        self.push(format!("{prefix}.w"), vec![o, c, k, k], Init::HeUniform { fan_in: c * k * k }, true);
        if bias {
            self.push(format!("{prefix}.b"), vec![o], Init::Zeros, true);
        }
    }

    fn norm2d(&mut self, prefix: &str, c: usize, kind: NormKind) {
        self.push(format!("{prefix}.g"), vec![c], Init::Ones, true);
        self.push(format!("{prefix}.b"), vec![c], Init::Zeros, true);
        if kind == NormKind::Batch {
            self.push(format!("{prefix}.running_mean"), vec![c], Init::Zeros, false);
            self.push(format!("{prefix}.running_var"), vec![c], Init::Ones, false);
        }
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(format!("{prefix}.w"), vec![din, dout], Init::TruncNormal(0.02), true);
        self.push(format!("{prefix}.b"), vec![dout], Init::Zeros, true);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), vec![d], Init::Ones, true);
        self.push(format!("{prefix}.b"), vec![d], Init::Zeros, true);
    }
}

/// Every tensor the network owns, in a fixed order. Running statistics are
/// included as non-trainable entries.
pub fn param_specs(cfg: &TexViTConfig) -> Vec<ParamSpec> {
    let mut s = Specs::default();
    let bb = &cfg.backbone;
    let ch = &bb.stage_channels;

    let stem_k = if bb.small_input_mode { 3 } else { 7 };
    s.conv("stem.conv", ch[0], bb.input_channels, stem_k, false);
    s.norm2d("stem.bn", ch[0], bb.norm_kind);
    for (si, (&cout, &blocks)) in ch.iter().zip(&bb.blocks_per_stage).enumerate() {
        for bi in 0..blocks {
            let cin = if bi == 0 && si > 0 { ch[si - 1] } else { cout };
            let p = format!("stage{}.block{}", si + 1, bi);
            s.conv(&format!("{p}.conv1"), cout, cin, 3, false);
            s.norm2d(&format!("{p}.bn1"), cout, bb.norm_kind);
            s.conv(&format!("{p}.conv2"), cout, cout, 3, false);
            s.norm2d(&format!("{p}.bn2"), cout, bb.norm_kind);
            if bi == 0 && si > 0 {
                s.conv(&format!("{p}.down"), cout, cin, 1, false);
                s.norm2d(&format!("{p}.down_bn"), cout, bb.norm_kind);
            }
        }
    }
    for (t, &tap) in bb.texture_taps.iter().enumerate() {
        let c = cfg.tap_channels(tap);
        let p = format!("tex{t}");
        s.conv(&format!("{p}.mix"), c, c, 1, true);
        s.conv(&format!("{p}.conv1"), bb.texture_hidden, 1, 3, true);
        s.conv(&format!("{p}.conv2"), bb.texture_channels, bb.texture_hidden, 3, true);
    }

    let grid = cfg.grid();
    let streams = [("a", &cfg.branch_a, *ch.last().unwrap()), ("b", &cfg.branch_b, cfg.texture_stream_channels())];
    for (id, br, c) in streams {
        let d = br.embed_dim;
        let tokens = (grid / br.patch_size).pow(2);
        s.linear(&format!("{id}.embed"), c * br.patch_size * br.patch_size, d);
        s.push(format!("{id}.cls"), vec![1, 1, d], Init::TruncNormal(0.02), true);
        s.push(format!("{id}.pos"), vec![tokens + 1, d], Init::TruncNormal(0.02), true);
        for l in 0..br.depth {
            let p = format!("{id}.block{l}");
            s.layer_norm(&format!("{p}.ln1"), d);
            s.linear(&format!("{p}.qkv"), d, 3 * d);
            s.linear(&format!("{p}.proj"), d, d);
            s.layer_norm(&format!("{p}.ln2"), d);
            s.linear(&format!("{p}.fc1"), d, br.mlp_hidden());
            s.linear(&format!("{p}.fc2"), br.mlp_hidden(), d);
        }
    }
    for r in 0..cfg.cross_rounds {
        for (id, q, kv) in [("a", &cfg.branch_a, &cfg.branch_b), ("b", &cfg.branch_b, &cfg.branch_a)] {
            let p = format!("cross{r}.{id}");
            let d = kv.embed_dim;
            if q.embed_dim != d {
                s.linear(&format!("{p}.bridge_in"), q.embed_dim, d);
                s.linear(&format!("{p}.bridge_out"), d, q.embed_dim);
            }
            s.layer_norm(&format!("{p}.ln"), d);
            s.linear(&format!("{p}.q"), d, d);
            s.linear(&format!("{p}.kv"), d, 2 * d);
            s.linear(&format!("{p}.proj"), d, d);
        }
    }
    for (id, br) in [("a", &cfg.branch_a), ("b", &cfg.branch_b)] {
        s.layer_norm(&format!("head_{id}.ln"), br.embed_dim);
        s.linear(&format!("head_{id}.fc"), br.embed_dim, cfg.num_classes);
    }
    s.0
}

/// Number of trainable scalars.
pub fn parameter_count(cfg: &TexViTConfig) -> usize {
    param_specs(cfg).iter().filter(|p| p.trainable).map(|p| p.shape.iter().product::<usize>()).sum()
}

/// Fresh parameters for `cfg`, drawn from a stream derived from `seed`.
pub fn init_params(cfg: &TexViTConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = RngState::derive(seed, "init");
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let value = match spec.init {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                rng.uniform_tensor(&spec.shape, -bound, bound)
            }
            Init::TruncNormal(std) => rng.truncated_normal_tensor(&spec.shape, std),
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
            Init::Ones => Tensor::ones(spec.shape.clone()),
        };
        if spec.trainable {
            store.insert_param(spec.name, value);
        } else {
            store.insert_buffer(spec.name, value);
        }
    }
    Ok(store)
}

pub struct ForwardOutput {
    /// `N×2` class scores.
    pub logits: Var,
    pub streams: FeatureStreams,
}

/// Full network on an `N×C×H×W` image batch already on the tape.
pub fn texvit_forward<T: Scalar>(cfg: &TexViTConfig, g: &mut Graph<'_, T>, images: Var) -> Result<ForwardOutput> {
    let shape = g.tape.shape(images).to_vec();
    let want = [cfg.backbone.input_channels, cfg.image_size, cfg.image_size];
    if shape.len() != 4 || shape[1..] != want {
        return Err(crate::error::config_err(format!(
            "image batch {:?} does not match the configured {}×{}×{} input",
            shape, want[0], want[1], want[2]
        )));
    }
    let streams = resnet18_forward(cfg, g, images)?;
    let (a, b) = (&cfg.branch_a, &cfg.branch_b);
    let mut xa = patch_embed(g, streams.conventional, "a", a.patch_size)?;
    let mut xb = patch_embed(g, streams.texture, "b", b.patch_size)?;

    let pre_a = a.depth - cfg.cross_rounds;
    let pre_b = b.depth - cfg.cross_rounds;
    for l in 0..pre_a {
        xa = encoder_block(g, xa, &format!("a.block{l}"), a.heads, a.drop_path_rate)?;
    }
    for l in 0..pre_b {
        xb = encoder_block(g, xb, &format!("b.block{l}"), b.heads, b.drop_path_rate)?;
    }
    for r in 0..cfg.cross_rounds {
        // Both directions read the pre-fusion state.
        let (na, nb) = (g.tape.shape(xa)[1] - 1, g.tape.shape(xb)[1] - 1);
        let cls_a = g.tape.narrow(xa, 1, 0, 1)?;
        let cls_b = g.tape.narrow(xb, 1, 0, 1)?;
        let pa = g.tape.narrow(xa, 1, 1, na)?;
        let pb = g.tape.narrow(xb, 1, 1, nb)?;
        let fa = cross_attention_fuse(g, cls_a, Some(pb), &format!("cross{r}.a"), b.heads)?;
        let fb = cross_attention_fuse(g, cls_b, Some(pa), &format!("cross{r}.b"), a.heads)?;
        xa = g.tape.concat(&[fa, pa], 1)?;
        xb = g.tape.concat(&[fb, pb], 1)?;
        xa = encoder_block(g, xa, &format!("a.block{}", pre_a + r), a.heads, a.drop_path_rate)?;
        xb = encoder_block(g, xb, &format!("b.block{}", pre_b + r), b.heads, b.drop_path_rate)?;
    }
    let cls_a = g.tape.narrow(xa, 1, 0, 1)?;
    let cls_b = g.tape.narrow(xb, 1, 0, 1)?;
    let logits = classify(g, cls_a, cls_b)?;
    Ok(ForwardOutput { logits, streams })
}

/// Logits of a batch in evaluation mode, as a plain tensor.
pub fn predict_logits(cfg: &TexViTConfig, params: &ParamStore<f32>, images: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, params, Mode::Eval);
    let x = g.tape.input(images);
    let out = texvit_forward(cfg, &mut g, x)?;
    Ok(tape.value(out.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn specs_have_unique_names() {
        let specs = param_specs(&preset("paper_scale").unwrap());
        let mut names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = preset("micro").unwrap();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        let c = init_params(&cfg, 4).unwrap();
        let w = "stage2.block0.conv1.w";
        assert_eq!(a.value(w).unwrap(), b.value(w).unwrap());
        assert_ne!(a.value(w).unwrap(), c.value(w).unwrap());
        assert!(a.value("a.pos").unwrap().data().iter().all(|v| v.abs() <= 0.04));
        let bound = (6.0f32 / (4.0 * 9.0)).sqrt();
        assert!(a.value(w).unwrap().data().iter().all(|v| v.abs() <= bound));
    }
}
