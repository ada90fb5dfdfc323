//! Input embeddings and the three encoder stacks: language self-attention,
//! vision self-attention, and bidirectional co-attention fusion.
//!
//! Forward passes are pure functions over a tape, a parameter binding and a
//! layout, so the same code serves the gradient-trained tower and the
//! momentum-averaged tower (whose binding simply tracks nothing).

mod forward;
mod layout;

pub use forward::{
    apply_layer_norm, apply_linear, embed_regions, embed_text, forward_encoder, inter_layer,
    intra_layer, label_logits, match_logit, mlm_logits, multi_head_attention, regress_features,
    EncoderOutput,
};
pub use layout::{
    AttentionLayout, CoBranchLayout, EmbeddingLayout, EncoderLayout, FfnLayout, HeadsLayout,
    InterLayerLayout, IntraLayerLayout, LayerNormLayout, LinearLayout, ModelLayout,
};

use crate::numeric::{NumericError, Result};
use crate::Tensor;

/// Variance floor inside every layer norm.
pub const LN_EPS: f64 = 1e-12;

/// Architecture of the encoder stacks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Model width shared by every stream.
    pub d_w: usize,
    /// Attention heads; must divide `d_w`.
    pub heads: usize,
    /// Language self-attention layers.
    pub n_lang: usize,
    /// Vision self-attention layers.
    pub n_vis: usize,
    /// Co-attention fusion layers.
    pub n_co: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
}

impl EncoderConfig {
    /// Desk-scale default: small enough for finite-difference verification.
    pub fn desk() -> Self {
        Self {
            d_w: 64,
            heads: 4,
            n_lang: 2,
            n_vis: 2,
            n_co: 2,
            ffn_mult: 4,
        }
    }

    /// Full-scale preset: 9 language, 5 vision and 5 fusion layers at width
    /// 768.
    pub fn full_scale() -> Self {
        Self {
            d_w: 768,
            heads: 12,
            n_lang: 9,
            n_vis: 5,
            n_co: 5,
            ffn_mult: 4,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_lang + self.n_vis + self.n_co
    }

    pub fn head_width(&self) -> usize {
        self.d_w / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_w == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(NumericError::Contract(
                "d_w, heads and ffn_mult must be positive".into(),
            ));
        }
        if self.d_w % self.heads != 0 {
            return Err(NumericError::Contract(format!(
                "width {} not divisible by {} heads",
                self.d_w, self.heads
            )));
        }
        if self.n_lang == 0 || self.n_vis == 0 || self.n_co == 0 {
            return Err(NumericError::Contract(
                "every stack needs at least one layer".into(),
            ));
        }
        Ok(())
    }
}

/// Widths of everything around the encoder stacks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub enc: EncoderConfig,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Longest caption the position table supports.
    pub max_len: usize,
    /// Raw region-feature width.
    pub d_o: usize,
    /// Region pseudo-label classes for the legacy classification head.
    pub n_labels: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        self.enc.validate()?;
        if self.vocab < 4 {
            return Err(NumericError::Contract(
                "vocabulary must hold the special tokens".into(),
            ));
        }
        if self.max_len == 0 || self.d_o == 0 || self.n_labels == 0 {
            return Err(NumericError::Contract(
                "max_len, d_o and n_labels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer skip flags, grouped by stack. A set flag replaces that layer
/// with the identity map.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DropMask {
    pub lang: Vec<bool>,
    pub vis: Vec<bool>,
    pub co: Vec<bool>,
}

impl DropMask {
    pub fn none(cfg: &EncoderConfig) -> Self {
        Self {
            lang: vec![false; cfg.n_lang],
            vis: vec![false; cfg.n_vis],
            co: vec![false; cfg.n_co],
        }
    }

    pub fn all(cfg: &EncoderConfig) -> Self {
        Self {
            lang: vec![true; cfg.n_lang],
            vis: vec![true; cfg.n_vis],
            co: vec![true; cfg.n_co],
        }
    }

    pub fn any_dropped(&self) -> bool {
        self.lang.iter().chain(&self.vis).chain(&self.co).any(|&b| b)
    }

    pub fn dropped_count(&self) -> usize {
        self.lang
            .iter()
            .chain(&self.vis)
            .chain(&self.co)
            .filter(|&&b| b)
            .count()
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.lang.len() != cfg.n_lang
            || self.vis.len() != cfg.n_vis
            || self.co.len() != cfg.n_co
        {
            return Err(NumericError::Contract(format!(
                "drop mask sized {}/{}/{} for stacks sized {}/{}/{}",
                self.lang.len(),
                self.vis.len(),
                self.co.len(),
                cfg.n_lang,
                cfg.n_vis,
                cfg.n_co
            )));
        }
        Ok(())
    }
}

/// Which attention site a captured weight matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttnKind {
    /// Self-attention in the language stack.
    LangSelf,
    /// Self-attention in the vision stack.
    VisSelf,
    /// Language positions reading vision positions in a fusion layer.
    CoLangCross,
    /// Vision positions reading language positions in a fusion layer.
    CoVisCross,
    /// Language self-attention inside a fusion layer.
    CoLangSelf,
    /// Vision self-attention inside a fusion layer.
    CoVisSelf,
}

/// One attention site's weights for a single forward pass: one row-stochastic
/// matrix per head.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub kind: AttnKind,
    /// Layer index within its stack.
    pub layer: usize,
    pub heads: Vec<Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_preset_counts() {
        let cfg = EncoderConfig::full_scale();
        assert_eq!(cfg.n_lang, 9);
        assert_eq!(cfg.n_vis, 5);
        assert_eq!(cfg.n_co, 5);
        assert_eq!(cfg.n_layers(), 19);
        assert_eq!(cfg.d_w, 768);
        cfg.validate().unwrap();
    }

    #[test]
    fn width_must_divide_heads() {
        let mut cfg = EncoderConfig::desk();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_stack_rejected() {
        let mut cfg = EncoderConfig::desk();
        cfg.n_co = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn drop_mask_shape_checked() {
        let cfg = EncoderConfig::desk();
        let mut mask = DropMask::none(&cfg);
        mask.co.push(true);
        assert!(mask.check(&cfg).is_err());
        assert!(DropMask::none(&cfg).check(&cfg).is_ok());
    }

    #[test]
    fn drop_mask_counts() {
        let cfg = EncoderConfig::desk();
        assert!(!DropMask::none(&cfg).any_dropped());
        let all = DropMask::all(&cfg);
        assert_eq!(all.dropped_count(), cfg.n_layers());
    }
}
