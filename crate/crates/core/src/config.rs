//! Architecture configuration and the named presets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Layer,
}

/// Where a texture block reads the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tap {
    /// The raw image.
    Input,
    /// The activation entering stage `s` (1-based), i.e. right before its
    /// down-sampling block.
    PreStage(usize),
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::Input => write!(f, "input"),
            Tap::PreStage(s) => write!(f, "stage{s}"),
        }
    }
}

impl std::str::FromStr for Tap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "input" {
            return Ok(Tap::Input);
        }
        s.strip_prefix("stage")
            .and_then(|n| n.parse().ok())
            .map(Tap::PreStage)
            .ok_or_else(|| format!("unknown tap `{s}` (expected `input` or `stageN`)"))
    }
}

impl Serialize for Tap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Stride-1 3×3 stem without max-pool, for inputs under 64 px.
    pub small_input_mode: bool,
    pub texture_taps: Vec<Tap>,
    /// Output channels of every texture block.
    pub texture_channels: usize,
    /// Width of the conv between the Gram map and the projection.
    pub texture_hidden: usize,
    pub norm_kind: NormKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Total encoder blocks, including the ones that follow fusion rounds.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
}

impl BranchConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TexViTConfig {
    pub preset: String,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    /// Embeds the conventional (final stage) stream.
    pub branch_a: BranchConfig,
    /// Embeds the texture stream.
    pub branch_b: BranchConfig,
    pub cross_rounds: usize,
    pub num_classes: usize,
}

impl TexViTConfig {
    /// Spatial side after the stem.
    pub fn stem_side(&self) -> usize {
        if self.backbone.small_input_mode {
            self.image_size
        } else {
            // 7×7/2 conv (pad 3) then 2×2/2 max-pool.
            ((self.image_size - 1) / 2).div_ceil(2)
        }
    }

    /// Spatial side of the input to each stage, then the final output.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut sides = vec![self.stem_side()];
        for s in 0..self.backbone.stage_channels.len() {
            let h = *sides.last().unwrap();
            sides.push(if s == 0 { h } else { (h - 1) / 2 + 1 });
        }
        sides
    }

    /// Side of the token grid both branches see.
    pub fn grid(&self) -> usize {
        *self.stage_sides().last().unwrap()
    }

    /// Channels of the concatenated texture stream.
    pub fn texture_stream_channels(&self) -> usize {
        self.backbone.texture_channels * self.backbone.texture_taps.len()
    }

    pub fn tap_channels(&self, tap: Tap) -> usize {
        match tap {
            Tap::Input => self.backbone.input_channels,
            Tap::PreStage(s) => self.backbone.stage_channels[s - 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let ns = b.stage_channels.len();
        if b.input_channels == 0 || ns == 0 {
            return Err(config_err("backbone needs input channels and at least one stage"));
        }
        if b.blocks_per_stage.len() != ns || b.blocks_per_stage.contains(&0) {
            return Err(config_err(format!(
                "blocks_per_stage {:?} must give a positive count for each of {ns} stages",
                b.blocks_per_stage
            )));
        }
        if b.stage_channels[0] == 0 || b.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err(format!("stage_channels {:?} must be strictly increasing", b.stage_channels)));
        }
        for (i, tap) in b.texture_taps.iter().enumerate() {
            if let Tap::PreStage(s) = tap {
                if *s < 2 || *s > ns {
                    return Err(config_err(format!(
                        "texture tap `{tap}` is not a down-sampling boundary (stages 2..={ns})"
                    )));
                }
            }
            if b.texture_taps[..i].contains(tap) {
                return Err(config_err(format!("texture tap `{tap}` listed twice")));
            }
        }
        if b.texture_taps.is_empty() || b.texture_channels == 0 || b.texture_hidden == 0 {
            return Err(config_err("texture stream needs at least one tap and positive widths"));
        }
        if self.image_size < 8 {
            return Err(config_err(format!("image_size {} below the minimum of 8", self.image_size)));
        }
        if !b.small_input_mode && self.image_size < 64 {
            return Err(config_err(format!(
                "image_size {} needs small_input_mode (the strided stem requires at least 64 px)",
                self.image_size
            )));
        }
        let sides = self.stage_sides();
        for (s, pair) in sides.windows(2).enumerate().skip(1) {
            if pair[0] < 2 {
                return Err(config_err(format!(
                    "input too small: stage{} receives a {}×{} map and cannot down-sample",
                    s + 1,
                    pair[0],
                    pair[0]
                )));
            }
        }
        let grid = self.grid();
        for (name, br) in [("branch_a", &self.branch_a), ("branch_b", &self.branch_b)] {
            if br.embed_dim == 0 || br.heads == 0 || br.embed_dim % br.heads != 0 {
                return Err(config_err(format!(
                    "{name}: embed_dim {} not divisible by heads {}",
                    br.embed_dim, br.heads
                )));
            }
            if br.patch_size == 0 || !grid.is_multiple_of(br.patch_size) {
                return Err(config_err(format!(
                    "{name}: patch_size {} does not divide the {grid}×{grid} grid",
                    br.patch_size
                )));
            }
            if br.mlp_ratio == 0 {
                return Err(config_err(format!("{name}: mlp_ratio must be positive")));
            }
            if !(0.0..1.0).contains(&br.drop_path_rate) {
                return Err(config_err(format!("{name}: drop_path_rate {} outside [0, 1)", br.drop_path_rate)));
            }
            if br.depth < self.cross_rounds {
                return Err(config_err(format!(
                    "{name}: depth {} is smaller than cross_rounds {}",
                    br.depth, self.cross_rounds
                )));
            }
        }
        if self.num_classes != 2 {
            return Err(config_err(format!("num_classes must be 2, got {}", self.num_classes)));
        }
        Ok(())
    }
}

/// A named, fully specified architecture.
pub trait Preset: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn config(&self) -> TexViTConfig;
}

fn branch(d: usize, depth: usize, heads: usize, mlp_ratio: usize, drop: f64) -> BranchConfig {
    BranchConfig { patch_size: 1, embed_dim: d, depth, heads, mlp_ratio, drop_path_rate: drop }
}

fn all_taps(stages: usize) -> Vec<Tap> {
    std::iter::once(Tap::Input).chain((2..=stages).map(Tap::PreStage)).collect()
}

struct PaperScale;

impl Preset for PaperScale {
    fn name(&self) -> &'static str {
        "paper_scale"
    }

    fn summary(&self) -> &'static str {
        "128 px ResNet-18, D=384, depth 8, 6 heads, 2 fusion rounds"
    }

    fn config(&self) -> TexViTConfig {
        TexViTConfig {
            preset: self.name().into(),
            image_size: 128,
            backbone: BackboneConfig {
                input_channels: 3,
                stage_channels: vec![64, 128, 256, 512],
                blocks_per_stage: vec![2, 2, 2, 2],
                small_input_mode: false,
                texture_taps: all_taps(4),
                texture_channels: 64,
                texture_hidden: 16,
                norm_kind: NormKind::Batch,
            },
            branch_a: branch(384, 8, 6, 4, 0.1),
            branch_b: branch(384, 8, 6, 4, 0.1),
            cross_rounds: 2,
            num_classes: 2,
        }
    }
}

struct Micro;

impl Preset for Micro {
    fn name(&self) -> &'static str {
        "micro"
    }

    fn summary(&self) -> &'static str {
        "16 px toy network for finite-difference checks"
    }

    fn config(&self) -> TexViTConfig {
        TexViTConfig {
            preset: self.name().into(),
            image_size: 16,
            backbone: BackboneConfig {
                input_channels: 3,
                stage_channels: vec![4, 6, 8, 10],
                blocks_per_stage: vec![1, 1, 1, 1],
                small_input_mode: true,
                texture_taps: all_taps(4),
                texture_channels: 4,
                texture_hidden: 2,
                norm_kind: NormKind::Batch,
            },
            branch_a: branch(32, 2, 4, 2, 0.0),
            branch_b: branch(32, 2, 4, 2, 0.0),
            cross_rounds: 1,
            num_classes: 2,
        }
    }
}

struct Desk;

impl Preset for Desk {
    fn name(&self) -> &'static str {
        "desk"
    }

    fn summary(&self) -> &'static str {
        "32 px network sized for single-machine experiments"
    }

    fn config(&self) -> TexViTConfig {
        TexViTConfig {
            preset: self.name().into(),
            image_size: 32,
            backbone: BackboneConfig {
                input_channels: 3,
                stage_channels: vec![8, 16, 32, 64],
                blocks_per_stage: vec![1, 1, 1, 1],
                small_input_mode: true,
                texture_taps: all_taps(4),
                texture_channels: 16,
                texture_hidden: 4,
                norm_kind: NormKind::Batch,
            },
            branch_a: branch(32, 2, 4, 2, 0.0),
            branch_b: branch(32, 2, 4, 2, 0.0),
            cross_rounds: 1,
            num_classes: 2,
        }
    }
}

pub fn presets() -> Vec<Box<dyn Preset>> {
    vec![Box::new(PaperScale), Box::new(Micro), Box::new(Desk)]
}

pub fn preset(name: &str) -> Result<TexViTConfig> {
    presets()
        .into_iter()
        .find(|p| p.name() == name)
        .map(|p| p.config())
        .ok_or_else(|| {
            let known: Vec<_> = presets().iter().map(|p| p.name()).collect();
            config_err(format!("unknown preset `{name}` (known: {})", known.join(", ")))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in presets() {
            p.config().validate().unwrap_or_else(|e| panic!("{}: {e}", p.name()));
        }
    }

    #[test]
    fn paper_scale_grid_is_four() {
        let cfg = preset("paper_scale").unwrap();
        assert_eq!(cfg.stage_sides(), vec![32, 32, 16, 8, 4]);
        assert_eq!(cfg.texture_stream_channels(), 256);
        assert_eq!(preset("desk").unwrap().grid(), 4);
        assert_eq!(preset("micro").unwrap().grid(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = preset("micro").unwrap();
        cfg.branch_a.heads = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = preset("micro").unwrap();
        cfg.backbone.stage_channels = vec![4, 4, 8, 10];
        assert!(cfg.validate().is_err());

        let mut cfg = preset("micro").unwrap();
        cfg.backbone.texture_taps = vec![Tap::PreStage(1)];
        assert!(cfg.validate().is_err());

        let mut cfg = preset("micro").unwrap();
        cfg.image_size = 8;
        cfg.backbone.stage_channels = vec![4, 6, 8, 10, 12];
        cfg.backbone.blocks_per_stage = vec![1; 5];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stage5"), "{err}");

        assert!(preset("huge").is_err());
    }

    #[test]
    fn tap_names_round_trip() {
        for t in [Tap::Input, Tap::PreStage(3)] {
            assert_eq!(t.to_string().parse::<Tap>().unwrap(), t);
        }
        assert!("stagex".parse::<Tap>().is_err());
    }
}
