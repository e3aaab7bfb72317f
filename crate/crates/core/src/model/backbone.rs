//! Forward pass of the shared encoder.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::patch;
use super::{EmbedIds, InsertionMode, LayerIds, LayerPatches, Model, PatchKind, CLS_ID, SEP_ID};

/// Sum of token, position and segment embeddings, one row per position.
pub fn embed(
    tape: &mut Tape,
    ids: &EmbedIds,
    token_ids: &[usize],
    segment_ids: &[usize],
) -> Result<Var> {
    if token_ids.len() != segment_ids.len() {
        return Err(Error::Dimension(format!(
            "{} token ids but {} segment ids",
            token_ids.len(),
            segment_ids.len()
        )));
    }
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let max_len = tape.params().tensor(ids.position).rows();
    if token_ids.len() > max_len {
        return Err(Error::Dimension(format!(
            "sequence of {} tokens exceeds max_seq_len {max_len}",
            token_ids.len()
        )));
    }
    let tok_table = tape.param(ids.token);
    let tok = tape.gather(tok_table, token_ids)?;
    let pos_table = tape.param(ids.position);
    let pos = tape.gather(pos_table, &positions)?;
    let seg_table = tape.param(ids.segment);
    let seg = tape.gather(seg_table, segment_ids)?;
    let sum = tape.add(tok, pos)?;
    tape.add(sum, seg)
}

/// Multi-head attention `Concat(head_1..head_n) · W^o` without residual.
///
/// Queries come from the rows of `h`; keys and values from the rows of
/// `ctx`. Passing the same variable for both is ordinary self-attention.
pub fn multi_head(tape: &mut Tape, h: Var, ctx: Var, layer: &LayerIds) -> Result<Var> {
    let n_heads = layer.query.len();
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let wq = tape.param(layer.query[i]);
        let wk = tape.param(layer.key[i]);
        let wv = tape.param(layer.value[i]);
        heads.push(attention_head(tape, h, ctx, wq, wk, wv)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = tape.param(layer.attn_output);
    tape.linear(cat, wo, None)
}

/// One scaled dot-product head: rows of `h` attend over all rows of `ctx`.
pub(crate) fn attention_head(
    tape: &mut Tape,
    h: Var,
    ctx: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<Var> {
    let q = tape.linear(h, wq, None)?;
    let k = tape.linear(ctx, wk, None)?;
    let v = tape.linear(ctx, wv, None)?;
    let head_dim = tape.value(q).cols();
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = tape.softmax(scores)?;
    tape.matmul(weights, v)
}

/// Attention weights of head `head` for inspection; rows sum to one.
pub fn attention_weights(tape: &mut Tape, h: Var, layer: &LayerIds, head: usize) -> Result<Tensor> {
    let wq = tape.param(layer.query[head]);
    let wk = tape.param(layer.key[head]);
    let q = tape.linear(h, wq, None)?;
    let k = tape.linear(h, wk, None)?;
    let scores = tape.matmul_nt(q, k)?;
    let head_dim = tape.value(q).cols();
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let w = tape.softmax(scores)?;
    Ok(tape.value(w).clone())
}

/// `SA(h) = LN(MH(h) + h)`.
pub fn self_attention(tape: &mut Tape, h: Var, ctx: Var, layer: &LayerIds) -> Result<Var> {
    let mh = multi_head(tape, h, ctx, layer)?;
    let sum = tape.add(mh, h)?;
    let (g, b) = (tape.param(layer.attn_gain), tape.param(layer.attn_bias));
    tape.layer_norm(sum, g, b)
}

/// Position-wise `W_2 f(W_1 h + b_1) + b_2`.
pub fn ffn(tape: &mut Tape, h: Var, layer: &LayerIds) -> Result<Var> {
    let (w1, b1) = (
        tape.param(layer.ffn_in_weight),
        tape.param(layer.ffn_in_bias),
    );
    let hidden = tape.linear(h, w1, Some(b1))?;
    let act = tape.gelu(hidden);
    let (w2, b2) = (
        tape.param(layer.ffn_out_weight),
        tape.param(layer.ffn_out_bias),
    );
    tape.linear(act, w2, Some(b2))
}

/// `LN(FFN(sa) + sa)` where `sa` is the self-attention sub-layer output.
pub fn ffn_block(tape: &mut Tape, sa: Var, layer: &LayerIds) -> Result<Var> {
    let f = ffn(tape, sa, layer)?;
    let sum = tape.add(f, sa)?;
    let (g, b) = (tape.param(layer.ffn_gain), tape.param(layer.ffn_bias));
    tape.layer_norm(sum, g, b)
}

/// The unpatched layer `BL(h) = LN(FFN(SA(h)) + SA(h))`, evaluated at the
/// rows of `h` with attention context `ctx`.
pub fn bert_layer(tape: &mut Tape, h: Var, ctx: Var, layer: &LayerIds) -> Result<Var> {
    let sa = self_attention(tape, h, ctx, layer)?;
    ffn_block(tape, sa, layer)
}

/// A layer with its patches composed per the insertion mode, evaluated at
/// the rows of `h` with attention context `ctx`. With PAL patches the patch
/// itself mixes positions, so `h` and `ctx` must then be the same variable.
pub fn patched_layer(
    tape: &mut Tape,
    h: Var,
    ctx: Var,
    layer: &LayerIds,
    patches: &LayerPatches,
) -> Result<Var> {
    match patches {
        LayerPatches::None => bert_layer(tape, h, ctx, layer),
        LayerPatches::Inner { attn, ffn } => patch::patched_inner(tape, h, ctx, layer, attn, ffn),
        LayerPatches::Outer { attn, ffn } => patch::patched_outer(tape, h, ctx, layer, attn, ffn),
        LayerPatches::Horizontal(p) => patch::patched_horizontal(tape, h, ctx, layer, p),
    }
}

/// Embedding, every (possibly patched) layer, then the vertical patch if any.
pub fn encode(
    tape: &mut Tape,
    model: &Model,
    token_ids: &[usize],
    segment_ids: &[usize],
) -> Result<Var> {
    let mut h = embed(tape, &model.embed, token_ids, segment_ids)?;
    for (layer, patches) in model.layers.iter().zip(&model.patches.layers) {
        h = patched_layer(tape, h, h, layer, patches)?;
    }
    if let Some(p) = &model.patches.vertical {
        h = patch::patched_vertical(tape, h, p)?;
    }
    Ok(h)
}

/// The `[CLS]` row of [`encode`], as a `[1, d]` variable.
///
/// Everything above the last attention is position-wise unless the model
/// carries PAL patches, so the top layer is then evaluated at the `[CLS]`
/// row only, attending over the full sequence. The result equals row 0 of
/// [`encode`] bit for bit.
pub fn encode_cls(
    tape: &mut Tape,
    model: &Model,
    token_ids: &[usize],
    segment_ids: &[usize],
) -> Result<Var> {
    if model.config.patch_kind == PatchKind::Pal
        && model.config.insertion_mode != InsertionMode::None
    {
        let h = encode(tape, model, token_ids, segment_ids)?;
        return tape.select_row(h, 0);
    }
    let mut h = embed(tape, &model.embed, token_ids, segment_ids)?;
    let top = model.layers.len().saturating_sub(1);
    for (i, (layer, patches)) in model.layers.iter().zip(&model.patches.layers).enumerate() {
        let rows = if i == top { tape.select_row(h, 0)? } else { h };
        h = patched_layer(tape, rows, h, layer, patches)?;
    }
    if model.layers.is_empty() {
        h = tape.select_row(h, 0)?;
    }
    if let Some(p) = &model.patches.vertical {
        h = patch::patched_vertical(tape, h, p)?;
    }
    Ok(h)
}

/// `[CLS] q [SEP] a [SEP]` with segment 0 up to the first separator and 1
/// after it. Answers are cut from the right to fit `max_len`; the flag
/// reports whether that happened.
pub fn build_input(
    question: &[usize],
    answer: &[usize],
    max_len: usize,
) -> Result<(Vec<usize>, Vec<usize>, bool)> {
    if question.len() + 3 > max_len {
        return Err(Error::Dimension(format!(
            "question of {} tokens leaves no room within max_seq_len {max_len}",
            question.len()
        )));
    }
    let room = max_len - 3 - question.len();
    let truncated = answer.len() > room;
    let answer = &answer[..answer.len().min(room)];
    let mut tokens = Vec::with_capacity(question.len() + answer.len() + 3);
    tokens.push(CLS_ID);
    tokens.extend_from_slice(question);
    tokens.push(SEP_ID);
    let split = tokens.len();
    tokens.extend_from_slice(answer);
    tokens.push(SEP_ID);
    let mut segments = vec![0; split];
    segments.resize(tokens.len(), 1);
    Ok((tokens, segments, truncated))
}

#[derive(Debug, Clone, Copy)]
pub struct Scored {
    pub score: Var,
    pub truncated: bool,
}

/// Matching score `w · h_CLS + b` of a question/answer pair.
pub fn score(
    tape: &mut Tape,
    model: &Model,
    question: &[usize],
    answer: &[usize],
) -> Result<Scored> {
    let (tokens, segments, truncated) = build_input(question, answer, model.config.max_seq_len)?;
    let cls = encode_cls(tape, model, &tokens, &segments)?;
    let (w, b) = (tape.param(model.head_weight), tape.param(model.head_bias));
    let score = tape.linear(cls, w, Some(b))?;
    Ok(Scored { score, truncated })
}

/// Forward-only score value.
pub fn score_value(
    model: &Model,
    params: &crate::params::ParameterSet,
    question: &[usize],
    answer: &[usize],
) -> Result<(f64, bool)> {
    let mut tape = Tape::new(params);
    let s = score(&mut tape, model, question, answer)?;
    Ok((tape.value(s.score).item(), s.truncated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_parameters, ModelConfig};
    use crate::params::ParameterSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(config: &ModelConfig, seed: u64) -> (ParameterSet, Model) {
        let p = init_parameters(
            config,
            &mut ChaCha8Rng::seed_from_u64(seed),
            &mut ChaCha8Rng::seed_from_u64(seed + 1),
        );
        let m = Model::new(config, &p).unwrap();
        (p, m)
    }

    #[test]
    fn cls_encoding_matches_full_encoding_bitwise() {
        use crate::model::{InsertionMode, PatchKind};
        let modes = [
            InsertionMode::None,
            InsertionMode::Inner,
            InsertionMode::Outer,
            InsertionMode::Vertical,
            InsertionMode::Horizontal,
        ];
        for mode in modes {
            for kind in [PatchKind::LowRank, PatchKind::Pal] {
                let c = ModelConfig::toy(20).with_patches(mode, kind);
                let (p, m) = setup(&c, 7);
                let (tokens, segments, _) =
                    build_input(&[5, 9, 11], &[6, 7, 8, 12, 19], c.max_seq_len).unwrap();
                let mut tape = Tape::new(&p);
                let full = encode(&mut tape, &m, &tokens, &segments).unwrap();
                let cls = encode_cls(&mut tape, &m, &tokens, &segments).unwrap();
                assert_eq!(
                    tape.value(cls).data(),
                    tape.value(full).row(0),
                    "{mode:?} {kind:?}"
                );
            }
        }
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let c = ModelConfig::toy(12);
        let (mut p, m) = setup(&c, 1);
        for name in ["embed.token", "embed.position", "embed.segment"] {
            p.get_mut(name).unwrap().fill(0.0);
        }
        let mut tape = Tape::new(&p);
        let h = embed(&mut tape, &m.embed, &[5, 6, 7], &[0, 0, 1]).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_a_table_sum() {
        let c = ModelConfig::toy(12);
        let (p, m) = setup(&c, 2);
        let mut tape = Tape::new(&p);
        let h = embed(&mut tape, &m.embed, &[9], &[0]).unwrap();
        let tok = p.get("embed.token").unwrap();
        let pos = p.get("embed.position").unwrap();
        let seg = p.get("embed.segment").unwrap();
        for j in 0..c.d_model {
            assert_eq!(
                tape.value(h).data()[j],
                tok.row(9)[j] + pos.row(0)[j] + seg.row(0)[j]
            );
        }
        let ids = [3usize, 11, 4];
        let segs = [0usize, 1, 1];
        let h = embed(&mut tape, &m.embed, &ids, &segs).unwrap();
        for (r, (&t, &s)) in ids.iter().zip(&segs).enumerate() {
            for j in 0..c.d_model {
                let expected = tok.row(t)[j] + pos.row(r)[j] + seg.row(s)[j];
                assert_eq!(tape.value(h).row(r)[j], expected);
            }
        }
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let c = ModelConfig::toy(12);
        let (p, m) = setup(&c, 3);
        let mut tape = Tape::new(&p);
        assert!(matches!(
            embed(&mut tape, &m.embed, &[12], &[0]),
            Err(Error::Vocabulary { id: 12, .. })
        ));
        assert!(embed(&mut tape, &m.embed, &[4; 17], &[0; 17]).is_err());
    }

    #[test]
    fn singleton_attention_has_unit_weight() {
        let c = ModelConfig::toy(12);
        let (p, m) = setup(&c, 4);
        let mut tape = Tape::new(&p);
        let h = embed(&mut tape, &m.embed, &[5], &[0]).unwrap();
        let w = attention_weights(&mut tape, h, &m.layers[0], 0).unwrap();
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn identical_positions_split_attention_evenly() {
        let c = ModelConfig::toy(12);
        let (p, m) = setup(&c, 5);
        let mut tape = Tape::new(&p);
        let row = vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.0, 0.2];
        let h = tape.input(Tensor::from_rows(&[row.clone(), row]).unwrap());
        for head in 0..c.n_heads {
            let w = attention_weights(&mut tape, h, &m.layers[0], head).unwrap();
            assert_eq!(w.data(), &[0.5; 4]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = ModelConfig::toy(12);
        let (p, m) = setup(&c, 6);
        let mut tape = Tape::new(&p);
        let h = embed(
            &mut tape,
            &m.embed,
            &[1, 5, 6, 2, 7, 2],
            &[0, 0, 0, 0, 1, 1],
        )
        .unwrap();
        let w = attention_weights(&mut tape, h, &m.layers[1], 1).unwrap();
        for r in 0..w.rows() {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_ffn_reduces_to_layer_norm() {
        let c = ModelConfig::toy(12);
        let (mut p, m) = setup(&c, 7);
        for name in ["layer.0.ffn.in.weight", "layer.0.ffn.out.weight"] {
            p.get_mut(name).unwrap().fill(0.0);
        }
        let mut tape = Tape::new(&p);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 0.2, 0.1]]).unwrap();
        let h = tape.input(x.clone());
        let out = ffn_block(&mut tape, h, &m.layers[0]).unwrap();
        let expected =
            crate::kernels::layer_norm(&x, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]))
                .unwrap();
        assert_eq!(tape.value(out), &expected);
    }

    #[test]
    fn ffn_block_preserves_shape() {
        let c = ModelConfig::toy(12);
        let (p, m) = setup(&c, 8);
        for seq in 1..5 {
            let mut tape = Tape::new(&p);
            let h = tape.input(Tensor::filled(&[seq, 8], 0.25));
            let out = ffn_block(&mut tape, h, &m.layers[0]).unwrap();
            assert_eq!(tape.value(out).shape(), &[seq, 8]);
        }
    }

    #[test]
    fn input_layout_and_truncation() {
        let (t, s, cut) = build_input(&[7, 8], &[9, 10, 11], 16).unwrap();
        assert_eq!(t, vec![CLS_ID, 7, 8, SEP_ID, 9, 10, 11, SEP_ID]);
        assert_eq!(s, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(!cut);
        let (t, _, cut) = build_input(&[7, 8], &[9, 10, 11], 7).unwrap();
        assert_eq!(t, vec![CLS_ID, 7, 8, SEP_ID, 9, 10, SEP_ID]);
        assert!(cut);
        assert!(build_input(&[7; 6], &[9], 8).is_err());
    }

    #[test]
    fn constant_head_gives_constant_score() {
        let c = ModelConfig::toy(12);
        let (mut p, m) = setup(&c, 9);
        p.get_mut("head.weight").unwrap().fill(0.0);
        p.get_mut("head.bias").unwrap().fill(1.75);
        for (q, a) in [(vec![4, 5], vec![6]), (vec![7], vec![8, 9, 10])] {
            assert_eq!(score_value(&m, &p, &q, &a).unwrap().0, 1.75);
        }
    }

    #[test]
    fn score_is_bitwise_deterministic() {
        let c = ModelConfig::toy(12);
        let (p, m) = setup(&c, 10);
        let a = score_value(&m, &p, &[4, 5, 6], &[7, 8]).unwrap().0;
        let b = score_value(&m, &p, &[4, 5, 6], &[7, 8]).unwrap().0;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
