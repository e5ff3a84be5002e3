use texvit_autodiff::{PoolKind, Scalar, Var};

use super::texture::texture_block;
use super::Graph;
use crate::config::{NormKind, Tap, TexViTConfig};
use crate::error::{config_err, Result};

/// The two branch inputs, both on the transformer grid.
#[derive(Clone, Debug)]
pub struct FeatureStreams {
    /// Final stage output, `N×C_a×g×g`.
    pub conventional: Var,
    /// Concatenated texture-block outputs, `N×C_b×g×g`.
    pub texture: Var,
}

/// ResNet basic block: two 3×3 convs with a residual connection, projected
/// by a strided 1×1 conv when the shape changes.
pub fn basic_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    prefix: &str,
    stride: usize,
    project: bool,
    norm: NormKind,
) -> Result<Var> {
    let h = g.conv(x, &format!("{prefix}.conv1"), stride, 1, false)?;
    let h = g.norm2d(h, &format!("{prefix}.bn1"), norm)?;
    let h = g.tape.relu(h);
    let h = g.conv(h, &format!("{prefix}.conv2"), 1, 1, false)?;
    let h = g.norm2d(h, &format!("{prefix}.bn2"), norm)?;
    let skip = if project {
        let s = g.conv(x, &format!("{prefix}.down"), stride, 0, false)?;
        g.norm2d(s, &format!("{prefix}.down_bn"), norm)?
    } else {
        x
    };
    let y = g.tape.add(h, skip)?;
    Ok(g.tape.relu(y))
}

pub fn resnet18_forward<T: Scalar>(cfg: &TexViTConfig, g: &mut Graph<'_, T>, images: Var) -> Result<FeatureStreams> {
    let bb = &cfg.backbone;
    let norm = bb.norm_kind;
    let grid = cfg.grid();

    let mut x = if bb.small_input_mode {
        g.conv(images, "stem.conv", 1, 1, false)?
    } else {
        g.conv(images, "stem.conv", 2, 3, false)?
    };
    x = g.norm2d(x, "stem.bn", norm)?;
    x = g.tape.relu(x);
    if !bb.small_input_mode {
        x = g.tape.pool2d(x, PoolKind::Max, 2, 2)?;
    }
    g.layers.push(("stem".into(), x));

    let mut taps = Vec::with_capacity(bb.texture_taps.len());
    let mut tap_input = |g: &mut Graph<'_, T>, at: Tap, x: Var| -> Result<()> {
        for (t, &tap) in bb.texture_taps.iter().enumerate() {
            if tap == at {
                g.layers.push((format!("tap{t}"), x));
                let out = texture_block(g, x, &format!("tex{t}"), grid)?;
                taps.push((t, out));
            }
        }
        Ok(())
    };
    tap_input(g, Tap::Input, images)?;

    for (si, &blocks) in bb.blocks_per_stage.iter().enumerate() {
        if si > 0 {
            let side = g.tape.shape(x)[2].min(g.tape.shape(x)[3]);
            if side < 2 {
                return Err(config_err(format!(
                    "input too small: stage{} receives a {side}×{side} map and cannot down-sample",
                    si + 1
                )));
            }
            tap_input(g, Tap::PreStage(si + 1), x)?;
        }
        for bi in 0..blocks {
            let first = bi == 0 && si > 0;
            let stride = if first { 2 } else { 1 };
            x = basic_block(g, x, &format!("stage{}.block{bi}", si + 1), stride, first, norm)?;
        }
        g.layers.push((format!("stage{}", si + 1), x));
    }

    let side = (g.tape.shape(x)[2], g.tape.shape(x)[3]);
    if side != (grid, grid) {
        return Err(config_err(format!("backbone produced a {}×{} map, expected {grid}×{grid}", side.0, side.1)));
    }
    taps.sort_by_key(|&(t, _)| t);
    let outs: Vec<Var> = taps.into_iter().map(|(_, v)| v).collect();
    let texture = if outs.len() == 1 { outs[0] } else { g.tape.concat(&outs, 1)? };
    Ok(FeatureStreams { conventional: x, texture })
}
