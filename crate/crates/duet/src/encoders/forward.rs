//! Forward passes over a tape for every architectural piece.
//!
//! Each function takes the tape, one tower's binding and a layout, so query
//! and key towers run through identical code; only the binding decides
//! whether gradients are tracked.

use super::layout::{
    AttentionLayout, CoBranchLayout, EmbeddingLayout, EncoderLayout, HeadsLayout, IntraLayerLayout,
    LayerNormLayout, LinearLayout,
};
use super::{AttnKind, AttnRecord, DropMask, EncoderConfig, LN_EPS};
use crate::numeric::{scaled_dot_attention, NumericError, Result, ValueId};
use crate::params::Bound;
use crate::Tape;

/// Contextual states of one tower plus every attention map that ran.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[T x d_w]` contextual text states; row 0 is the sentence summary.
    pub text_ctx: ValueId,
    /// `[N x d_w]` contextual region states.
    pub vis_ctx: ValueId,
    pub attn: Vec<AttnRecord>,
}

pub fn apply_linear(tape: &mut Tape, bound: &Bound, lin: &LinearLayout, x: ValueId) -> Result<ValueId> {
    let xw = tape.matmul(x, bound.id(lin.w))?;
    tape.add_row_bias(xw, bound.id(lin.b))
}

pub fn apply_layer_norm(
    tape: &mut Tape,
    bound: &Bound,
    ln: &LayerNormLayout,
    x: ValueId,
) -> Result<ValueId> {
    tape.layer_norm(x, bound.id(ln.gain), bound.id(ln.bias), LN_EPS)
}

fn apply_ffn(
    tape: &mut Tape,
    bound: &Bound,
    ffn: &super::layout::FfnLayout,
    x: ValueId,
) -> Result<ValueId> {
    let grown = apply_linear(tape, bound, &ffn.grow, x)?;
    let activated = tape.gelu(grown);
    apply_linear(tape, bound, &ffn.shrink, activated)
}

/// Multi-head attention where `q_in` supplies queries and `kv_in` supplies
/// keys and values. Returns the projected output and one `[n x m]` weight
/// matrix per head.
pub fn multi_head_attention(
    tape: &mut Tape,
    bound: &Bound,
    attn: &AttentionLayout,
    q_in: ValueId,
    kv_in: ValueId,
    heads: usize,
) -> Result<(ValueId, Vec<ValueId>)> {
    let q = apply_linear(tape, bound, &attn.q, q_in)?;
    let k = apply_linear(tape, bound, &attn.k, kv_in)?;
    let v = apply_linear(tape, bound, &attn.v, kv_in)?;
    let width = tape.shape(q)[1];
    if heads == 0 || width % heads != 0 {
        return Err(NumericError::Dimension(format!(
            "width {width} not divisible into {heads} heads"
        )));
    }
    let dh = width / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let (oh, wh) = scaled_dot_attention(tape, qh, kh, vh)?;
        outs.push(oh);
        weights.push(wh);
    }
    let merged = tape.concat_cols(&outs)?;
    let out = apply_linear(tape, bound, &attn.o, merged)?;
    Ok((out, weights))
}

/// Token embedding: table row of each token id plus the position-table row
/// of its index. Position 0 carries the sentence summary token.
pub fn embed_text(
    tape: &mut Tape,
    bound: &Bound,
    embed: &EmbeddingLayout,
    tokens: &[usize],
) -> Result<ValueId> {
    if tokens.is_empty() {
        return Err(NumericError::Contract("cannot embed an empty caption".into()));
    }
    let tok = tape.gather_rows(bound.id(embed.token_table), tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather_rows(bound.id(embed.pos_table), &positions)?;
    tape.add(tok, pos)
}

/// Region embedding: the mean of the projected feature vector and the
/// projected box coordinates.
pub fn embed_regions(
    tape: &mut Tape,
    bound: &Bound,
    embed: &EmbeddingLayout,
    feats: ValueId,
    boxes: ValueId,
) -> Result<ValueId> {
    let pf = apply_linear(tape, bound, &embed.region_proj, feats)?;
    let pb = apply_linear(tape, bound, &embed.box_proj, boxes)?;
    let sum = tape.add(pf, pb)?;
    Ok(tape.scale(sum, 0.5))
}

/// Self-attention layer: attention, residual, norm, feed-forward, residual,
/// norm. Returns the new states and per-head attention weights.
pub fn intra_layer(
    tape: &mut Tape,
    bound: &Bound,
    layer: &IntraLayerLayout,
    x: ValueId,
    heads: usize,
) -> Result<(ValueId, Vec<ValueId>)> {
    let (attn_out, weights) = multi_head_attention(tape, bound, &layer.attn, x, x, heads)?;
    let res1 = tape.add(x, attn_out)?;
    let norm1 = apply_layer_norm(tape, bound, &layer.ln_attn, res1)?;
    let ffn_out = apply_ffn(tape, bound, &layer.ffn, norm1)?;
    let res2 = tape.add(norm1, ffn_out)?;
    let out = apply_layer_norm(tape, bound, &layer.ln_ffn, res2)?;
    Ok((out, weights))
}

/// Attention maps produced by one fusion layer.
#[derive(Debug, Clone)]
pub struct InterAttn {
    pub lang_cross: Vec<ValueId>,
    pub vis_cross: Vec<ValueId>,
    pub lang_self: Vec<ValueId>,
    pub vis_self: Vec<ValueId>,
}

fn co_branch(
    tape: &mut Tape,
    bound: &Bound,
    branch: &CoBranchLayout,
    own: ValueId,
    other: ValueId,
    heads: usize,
) -> Result<(ValueId, Vec<ValueId>, Vec<ValueId>)> {
    let (cross_out, cross_w) = multi_head_attention(tape, bound, &branch.cross, own, other, heads)?;
    let res1 = tape.add(own, cross_out)?;
    let norm1 = apply_layer_norm(tape, bound, &branch.ln_cross, res1)?;
    let ffn_out = apply_ffn(tape, bound, &branch.ffn, norm1)?;
    let res2 = tape.add(norm1, ffn_out)?;
    let norm2 = apply_layer_norm(tape, bound, &branch.ln_ffn, res2)?;
    let (self_out, self_w) =
        multi_head_attention(tape, bound, &branch.self_attn, norm2, norm2, heads)?;
    let res3 = tape.add(norm2, self_out)?;
    let out = apply_layer_norm(tape, bound, &branch.ln_self, res3)?;
    Ok((out, cross_w, self_w))
}

/// Bidirectional fusion layer. Both cross-attention directions read the
/// layer's input states, so neither modality sees the other's update early.
pub fn inter_layer(
    tape: &mut Tape,
    bound: &Bound,
    layer: &super::layout::InterLayerLayout,
    lang_x: ValueId,
    vis_x: ValueId,
    heads: usize,
) -> Result<(ValueId, ValueId, InterAttn)> {
    let (lang_out, lang_cross, lang_self) =
        co_branch(tape, bound, &layer.lang, lang_x, vis_x, heads)?;
    let (vis_out, vis_cross, vis_self) = co_branch(tape, bound, &layer.vis, vis_x, lang_x, heads)?;
    Ok((
        lang_out,
        vis_out,
        InterAttn {
            lang_cross,
            vis_cross,
            lang_self,
            vis_self,
        },
    ))
}

/// Runs the full stack: language layers, vision layers, then fusion layers.
/// A set flag in `drop` skips that layer entirely (identity).
pub fn forward_encoder(
    tape: &mut Tape,
    bound: &Bound,
    enc: &EncoderLayout,
    cfg: &EncoderConfig,
    text_emb: ValueId,
    vis_emb: ValueId,
    drop: Option<&DropMask>,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    if let Some(mask) = drop {
        mask.check(cfg)?;
    }
    let dropped = |stack: fn(&DropMask) -> &Vec<bool>, i: usize| -> bool {
        drop.map(|m| stack(m)[i]).unwrap_or(false)
    };
    let mut attn = Vec::new();
    let mut capture = |tape: &Tape, kind: AttnKind, layer: usize, ids: &[ValueId]| {
        attn.push(AttnRecord {
            kind,
            layer,
            heads: ids.iter().map(|&id| tape.tensor(id)).collect(),
        });
    };

    let mut t = text_emb;
    for (i, layer) in enc.lang.iter().enumerate() {
        if dropped(|m| &m.lang, i) {
            continue;
        }
        let (out, ws) = intra_layer(tape, bound, layer, t, cfg.heads)?;
        t = out;
        capture(tape, AttnKind::LangSelf, i, &ws);
    }
    let mut v = vis_emb;
    for (i, layer) in enc.vis.iter().enumerate() {
        if dropped(|m| &m.vis, i) {
            continue;
        }
        let (out, ws) = intra_layer(tape, bound, layer, v, cfg.heads)?;
        v = out;
        capture(tape, AttnKind::VisSelf, i, &ws);
    }
    for (i, layer) in enc.co.iter().enumerate() {
        if dropped(|m| &m.co, i) {
            continue;
        }
        let (t2, v2, ia) = inter_layer(tape, bound, layer, t, v, cfg.heads)?;
        t = t2;
        v = v2;
        capture(tape, AttnKind::CoLangCross, i, &ia.lang_cross);
        capture(tape, AttnKind::CoVisCross, i, &ia.vis_cross);
        capture(tape, AttnKind::CoLangSelf, i, &ia.lang_self);
        capture(tape, AttnKind::CoVisSelf, i, &ia.vis_self);
    }
    Ok(EncoderOutput {
        text_ctx: t,
        vis_ctx: v,
        attn,
    })
}

/// Token logits for the given text positions: `[len(positions) x vocab]`.
pub fn mlm_logits(
    tape: &mut Tape,
    bound: &Bound,
    heads: &HeadsLayout,
    text_ctx: ValueId,
    positions: &[usize],
) -> Result<ValueId> {
    let states = tape.gather_rows(text_ctx, positions)?;
    apply_linear(tape, bound, &heads.mlm, states)
}

/// Image-sentence matching logit from the sentence summary state: `[1 x 1]`.
pub fn match_logit(
    tape: &mut Tape,
    bound: &Bound,
    heads: &HeadsLayout,
    text_ctx: ValueId,
) -> Result<ValueId> {
    let cls = tape.gather_rows(text_ctx, &[0])?;
    apply_linear(tape, bound, &heads.matcher, cls)
}

/// Reconstructed raw features for the given region positions.
pub fn regress_features(
    tape: &mut Tape,
    bound: &Bound,
    heads: &HeadsLayout,
    vis_ctx: ValueId,
    positions: &[usize],
) -> Result<ValueId> {
    let states = tape.gather_rows(vis_ctx, positions)?;
    apply_linear(tape, bound, &heads.feat_regress, states)
}

/// Pseudo-label logits for the given region positions.
pub fn label_logits(
    tape: &mut Tape,
    bound: &Bound,
    heads: &HeadsLayout,
    vis_ctx: ValueId,
    positions: &[usize],
) -> Result<ValueId> {
    let states = tape.gather_rows(vis_ctx, positions)?;
    apply_linear(tape, bound, &heads.label_classify, states)
}
