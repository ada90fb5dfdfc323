//! Parameter layouts: which named tensors make up each architectural piece.
//!
//! Building a layout registers every tensor in a [`ParamStore`] in a fixed
//! order, so two towers built from the same dims are congruent by
//! construction.

use rand::Rng;

use super::{EncoderConfig, ModelDims};
use crate::numeric::Result;
use crate::params::{ParamId, ParamStore};

const INIT_STD: f64 = 0.02;

/// Affine map `x·w + b` with `w: [in x out]`, `b: [out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayout {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayout {
    fn build(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_normal(&format!("{name}.w"), &[d_in, d_out], INIT_STD, rng)?,
            b: store.add_zeros(&format!("{name}.b"), &[d_out])?,
        })
    }
}

/// Query/key/value/output projections of one attention site.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayout {
    pub q: LinearLayout,
    pub k: LinearLayout,
    pub v: LinearLayout,
    pub o: LinearLayout,
}

impl AttentionLayout {
    fn build(store: &mut ParamStore, name: &str, d_w: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            q: LinearLayout::build(store, &format!("{name}.q"), d_w, d_w, rng)?,
            k: LinearLayout::build(store, &format!("{name}.k"), d_w, d_w, rng)?,
            v: LinearLayout::build(store, &format!("{name}.v"), d_w, d_w, rng)?,
            o: LinearLayout::build(store, &format!("{name}.o"), d_w, d_w, rng)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormLayout {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormLayout {
    fn build(store: &mut ParamStore, name: &str, d_w: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_ones(&format!("{name}.gain"), &[d_w])?,
            bias: store.add_zeros(&format!("{name}.bias"), &[d_w])?,
        })
    }
}

/// Two-layer feed-forward expansion.
#[derive(Debug, Clone, Copy)]
pub struct FfnLayout {
    pub grow: LinearLayout,
    pub shrink: LinearLayout,
}

impl FfnLayout {
    fn build(
        store: &mut ParamStore,
        name: &str,
        d_w: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            grow: LinearLayout::build(store, &format!("{name}.grow"), d_w, d_w * ffn_mult, rng)?,
            shrink: LinearLayout::build(store, &format!("{name}.shrink"), d_w * ffn_mult, d_w, rng)?,
        })
    }
}

/// Self-attention layer: attention, norm, feed-forward, norm.
#[derive(Debug, Clone, Copy)]
pub struct IntraLayerLayout {
    pub attn: AttentionLayout,
    pub ln_attn: LayerNormLayout,
    pub ffn: FfnLayout,
    pub ln_ffn: LayerNormLayout,
}

impl IntraLayerLayout {
    fn build(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: AttentionLayout::build(store, &format!("{name}.attn"), cfg.d_w, rng)?,
            ln_attn: LayerNormLayout::build(store, &format!("{name}.ln_attn"), cfg.d_w)?,
            ffn: FfnLayout::build(store, &format!("{name}.ffn"), cfg.d_w, cfg.ffn_mult, rng)?,
            ln_ffn: LayerNormLayout::build(store, &format!("{name}.ln_ffn"), cfg.d_w)?,
        })
    }
}

/// One modality's half of a fusion layer: cross-attention reading the other
/// modality, feed-forward, then a self-attention sub-layer.
#[derive(Debug, Clone, Copy)]
pub struct CoBranchLayout {
    pub cross: AttentionLayout,
    pub ln_cross: LayerNormLayout,
    pub ffn: FfnLayout,
    pub ln_ffn: LayerNormLayout,
    pub self_attn: AttentionLayout,
    pub ln_self: LayerNormLayout,
}

impl CoBranchLayout {
    fn build(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            cross: AttentionLayout::build(store, &format!("{name}.cross"), cfg.d_w, rng)?,
            ln_cross: LayerNormLayout::build(store, &format!("{name}.ln_cross"), cfg.d_w)?,
            ffn: FfnLayout::build(store, &format!("{name}.ffn"), cfg.d_w, cfg.ffn_mult, rng)?,
            ln_ffn: LayerNormLayout::build(store, &format!("{name}.ln_ffn"), cfg.d_w)?,
            self_attn: AttentionLayout::build(store, &format!("{name}.self"), cfg.d_w, rng)?,
            ln_self: LayerNormLayout::build(store, &format!("{name}.ln_self"), cfg.d_w)?,
        })
    }
}

/// Bidirectional fusion layer; the two directions never share weights.
#[derive(Debug, Clone, Copy)]
pub struct InterLayerLayout {
    pub lang: CoBranchLayout,
    pub vis: CoBranchLayout,
}

/// Token/position tables and the two region input projections.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingLayout {
    /// `[vocab x d_w]` token table.
    pub token_table: ParamId,
    /// `[max_len x d_w]` position table.
    pub pos_table: ParamId,
    /// Region-feature projection, `d_o -> d_w`.
    pub region_proj: LinearLayout,
    /// Bounding-box projection, `4 -> d_w`.
    pub box_proj: LinearLayout,
}

/// All encoder parameters of one tower.
#[derive(Debug, Clone)]
pub struct EncoderLayout {
    pub embed: EmbeddingLayout,
    pub lang: Vec<IntraLayerLayout>,
    pub vis: Vec<IntraLayerLayout>,
    pub co: Vec<InterLayerLayout>,
}

/// Output heads hanging off the encoder.
#[derive(Debug, Clone, Copy)]
pub struct HeadsLayout {
    /// Token prediction over masked positions, `d_w -> vocab`.
    pub mlm: LinearLayout,
    /// Image-sentence matching logit from the CLS state, `d_w -> 1`.
    pub matcher: LinearLayout,
    /// Legacy masked-region feature regression, `d_w -> d_o`.
    pub feat_regress: LinearLayout,
    /// Legacy masked-region label classification, `d_w -> n_labels`.
    pub label_classify: LinearLayout,
}

/// Complete single-tower layout: embeddings, stacks, heads.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub encoder: EncoderLayout,
    pub heads: HeadsLayout,
}

impl ModelLayout {
    /// Registers every parameter of one tower into `store`.
    pub fn build(store: &mut ParamStore, dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let cfg = &dims.enc;
        let embed = EmbeddingLayout {
            token_table: store.add_normal("embed.tok", &[dims.vocab, cfg.d_w], INIT_STD, rng)?,
            pos_table: store.add_normal("embed.pos", &[dims.max_len, cfg.d_w], INIT_STD, rng)?,
            region_proj: LinearLayout::build(store, "embed.region", dims.d_o, cfg.d_w, rng)?,
            box_proj: LinearLayout::build(store, "embed.box", 4, cfg.d_w, rng)?,
        };
        let lang = (0..cfg.n_lang)
            .map(|i| IntraLayerLayout::build(store, &format!("lang{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let vis = (0..cfg.n_vis)
            .map(|i| IntraLayerLayout::build(store, &format!("vis{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let co = (0..cfg.n_co)
            .map(|i| {
                Ok(InterLayerLayout {
                    lang: CoBranchLayout::build(store, &format!("co{i}.lang"), cfg, rng)?,
                    vis: CoBranchLayout::build(store, &format!("co{i}.vis"), cfg, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = HeadsLayout {
            mlm: LinearLayout::build(store, "heads.mlm", cfg.d_w, dims.vocab, rng)?,
            matcher: LinearLayout::build(store, "heads.match", cfg.d_w, 1, rng)?,
            feat_regress: LinearLayout::build(store, "heads.regress", cfg.d_w, dims.d_o, rng)?,
            label_classify: LinearLayout::build(store, "heads.label", cfg.d_w, dims.n_labels, rng)?,
        };
        Ok(Self {
            encoder: EncoderLayout {
                embed,
                lang,
                vis,
                co,
            },
            heads,
        })
    }
}
