use texvit_autodiff::{Scalar, Var};

use super::Graph;
use crate::error::{config_err, Result};

/// `x₀ = [cls ‖ patches·E] + E_pos` on an `N×C×H×W` map. Returns
/// `N×(T+1)×D` with the CLS token in row 0.
pub fn patch_embed<T: Scalar>(g: &mut Graph<'_, T>, feat: Var, prefix: &str, p: usize) -> Result<Var> {
    let n = g.tape.shape(feat)[0];
    let patches = g.tape.patchify(feat, p)?;
    let tokens = g.linear(patches, &format!("{prefix}.embed"))?;
    let cls = g.p(&format!("{prefix}.cls"))?;
    let cls = g.tape.expand(cls, n)?;
    let x = g.tape.concat(&[cls, tokens], 1)?;
    let pos = g.p(&format!("{prefix}.pos"))?;
    Ok(g.tape.add_broadcast(x, pos)?)
}

/// Pre-norm transformer block:
/// `z = x + MSA(LN(x))`, `out = z + FFN(LN(z))`, FFN = Linear, GELU, Linear.
pub fn encoder_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    prefix: &str,
    heads: usize,
    drop_path: f64,
) -> Result<Var> {
    let d = *g.tape.shape(x).last().unwrap();
    let h = g.layer_norm(x, &format!("{prefix}.ln1"))?;
    let qkv = g.linear(h, &format!("{prefix}.qkv"))?;
    let q = g.tape.narrow(qkv, 2, 0, d)?;
    let k = g.tape.narrow(qkv, 2, d, d)?;
    let v = g.tape.narrow(qkv, 2, 2 * d, d)?;
    let a = g.tape.attention(q, k, v, heads)?;
    g.attention.push(a);
    let a = g.linear(a, &format!("{prefix}.proj"))?;
    let a = g.drop_path(a, drop_path)?;
    let z = g.tape.add(x, a)?;

    let h = g.layer_norm(z, &format!("{prefix}.ln2"))?;
    let h = g.linear(h, &format!("{prefix}.fc1"))?;
    let h = g.tape.gelu(h);
    let h = g.linear(h, &format!("{prefix}.fc2"))?;
    let h = g.drop_path(h, drop_path)?;
    Ok(g.tape.add(z, h)?)
}

/// One branch's CLS token (`N×1×D_q`) attends over itself and the other
/// branch's patch tokens (`N×N_b×D`):
///
/// ```text
/// x¹ = [cls ‖ patches]
/// q = LN(x¹)₀·W_q,  [k v] = LN(x¹)·W_kv
/// out = cls + softmax(q kᵀ/√D_h)·v·W_msa
/// ```
///
/// When `D_q ≠ D` the CLS is bridged into the other width by a linear map
/// before fusion and mapped back afterwards. `patches = None` fuses the CLS
/// with itself only.
pub fn cross_attention_fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    cls: Var,
    patches: Option<Var>,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let bridged = g.params.contains(&format!("{prefix}.bridge_in.w"));
    let c = if bridged { g.linear(cls, &format!("{prefix}.bridge_in"))? } else { cls };
    let x1 = match patches {
        Some(p) => {
            let (dc, dp) = (*g.tape.shape(c).last().unwrap(), *g.tape.shape(p).last().unwrap());
            if dc != dp {
                return Err(config_err(format!(
                    "{prefix}: CLS width {dc} does not match patch width {dp} after projection"
                )));
            }
            g.tape.concat(&[c, p], 1)?
        }
        None => c,
    };
    let d = *g.tape.shape(x1).last().unwrap();
    let h = g.layer_norm(x1, &format!("{prefix}.ln"))?;
    let h0 = g.tape.narrow(h, 1, 0, 1)?;
    let q = g.linear(h0, &format!("{prefix}.q"))?;
    let kv = g.linear(h, &format!("{prefix}.kv"))?;
    let k = g.tape.narrow(kv, 2, 0, d)?;
    let v = g.tape.narrow(kv, 2, d, d)?;
    let a = g.tape.attention(q, k, v, heads)?;
    g.attention.push(a);
    let a = g.linear(a, &format!("{prefix}.proj"))?;
    let y = g.tape.add(c, a)?;
    if bridged {
        g.linear(y, &format!("{prefix}.bridge_out"))
    } else {
        Ok(y)
    }
}

/// Per-branch `LN → Linear` on the final CLS tokens (`N×1×D`), summed
/// into `N×2` logits.
pub fn classify<T: Scalar>(g: &mut Graph<'_, T>, cls_a: Var, cls_b: Var) -> Result<Var> {
    let mut out = None;
    for (id, cls) in [("a", cls_a), ("b", cls_b)] {
        let n = g.tape.shape(cls)[0];
        let d = *g.tape.shape(cls).last().unwrap();
        let c = g.tape.reshape(cls, &[n, d])?;
        let h = g.layer_norm(c, &format!("head_{id}.ln"))?;
        let s = g.linear(h, &format!("head_{id}.fc"))?;
        out = Some(match out {
            None => s,
            Some(prev) => g.tape.add(prev, s)?,
        });
    }
    Ok(out.unwrap())
}
