//! Private patches `Patch(h) = V^D g(V^E h)` and their four insertion forms.
//!
//! Outer and horizontal insertion add the patch to an existing sum, so a
//! zero up-projection reproduces the plain backbone exactly. Inner and
//! vertical insertion replace a sub-layer output with the patch output and
//! have no such identity.

use crate::error::Result;
use crate::tape::{Tape, Var};

use super::backbone::{attention_head, ffn, multi_head, self_attention};
use super::{LayerIds, PalIds, PatchIds};

/// `V^D g(V^E h)` applied position-wise (low-rank) or with attention across
/// positions inside the patch space (PAL).
pub fn patch_apply(tape: &mut Tape, h: Var, p: &PatchIds) -> Result<Var> {
    let down = tape.param(p.down);
    let z = tape.linear(h, down, None)?;
    let g = match &p.pal {
        None => tape.gelu(z),
        Some(pal) => projected_attention(tape, z, pal)?,
    };
    let up = tape.param(p.up);
    tape.linear(g, up, None)
}

fn projected_attention(tape: &mut Tape, z: Var, pal: &PalIds) -> Result<Var> {
    let mut heads = Vec::with_capacity(pal.query.len());
    for i in 0..pal.query.len() {
        let wq = tape.param(pal.query[i]);
        let wk = tape.param(pal.key[i]);
        let wv = tape.param(pal.value[i]);
        heads.push(attention_head(tape, z, z, wq, wk, wv)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = tape.param(pal.output);
    tape.linear(cat, wo, None)
}

/// Inner attention sub-layer: `SA(h) = LN(Patch(MH(h)) + h)`.
pub fn patched_self_attention(
    tape: &mut Tape,
    h: Var,
    ctx: Var,
    layer: &LayerIds,
    p: &PatchIds,
) -> Result<Var> {
    let mh = multi_head(tape, h, ctx, layer)?;
    let patched = patch_apply(tape, mh, p)?;
    let sum = tape.add(patched, h)?;
    let (g, b) = (tape.param(layer.attn_gain), tape.param(layer.attn_bias));
    tape.layer_norm(sum, g, b)
}

/// Inner feed-forward sub-layer: `LN(Patch(FFN(sa)) + sa)`.
pub fn patched_ffn_block(tape: &mut Tape, sa: Var, layer: &LayerIds, p: &PatchIds) -> Result<Var> {
    let f = ffn(tape, sa, layer)?;
    let patched = patch_apply(tape, f, p)?;
    let sum = tape.add(patched, sa)?;
    let (g, b) = (tape.param(layer.ffn_gain), tape.param(layer.ffn_bias));
    tape.layer_norm(sum, g, b)
}

/// Full inner-mode layer.
pub fn patched_inner(
    tape: &mut Tape,
    h: Var,
    ctx: Var,
    layer: &LayerIds,
    p_sa: &PatchIds,
    p_ffn: &PatchIds,
) -> Result<Var> {
    let sa = patched_self_attention(tape, h, ctx, layer, p_sa)?;
    patched_ffn_block(tape, sa, layer, p_ffn)
}

/// Outer-mode layer:
/// `SA(h) = LN(MH(h) + h + Patch(h))`,
/// `BL(h) = LN(FFN(SA(h)) + Patch(SA(h)) + SA(h))`.
pub fn patched_outer(
    tape: &mut Tape,
    h: Var,
    ctx: Var,
    layer: &LayerIds,
    p_sa: &PatchIds,
    p_ffn: &PatchIds,
) -> Result<Var> {
    let mh = multi_head(tape, h, ctx, layer)?;
    let sum = tape.add(mh, h)?;
    let side = patch_apply(tape, h, p_sa)?;
    let sum = tape.add(sum, side)?;
    let (g, b) = (tape.param(layer.attn_gain), tape.param(layer.attn_bias));
    let sa = tape.layer_norm(sum, g, b)?;

    let f = ffn(tape, sa, layer)?;
    let side = patch_apply(tape, sa, p_ffn)?;
    let sum = tape.add(f, side)?;
    let sum = tape.add(sum, sa)?;
    let (g, b) = (tape.param(layer.ffn_gain), tape.param(layer.ffn_bias));
    tape.layer_norm(sum, g, b)
}

/// Vertical mode: the topmost layer's output is replaced by `Patch(h_top)`.
pub fn patched_vertical(tape: &mut Tape, h_top: Var, p: &PatchIds) -> Result<Var> {
    patch_apply(tape, h_top, p)
}

/// Horizontal mode: `Patch(h) + BL(h)`.
pub fn patched_horizontal(
    tape: &mut Tape,
    h: Var,
    ctx: Var,
    layer: &LayerIds,
    p: &PatchIds,
) -> Result<Var> {
    let sa = self_attention(tape, h, ctx, layer)?;
    let bl = super::backbone::ffn_block(tape, sa, layer)?;
    let side = patch_apply(tape, h, p)?;
    tape.add(side, bl)
}
