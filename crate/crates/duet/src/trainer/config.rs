//! Run configuration: a flat key-value file (TOML syntax) in which every
//! field is addressable; unknown keys are rejected. Defaults form the desk
//! preset, so a config file only needs the fields it overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MaskConfig, FIRST_WORD_ID};
use crate::dual::{DropMode, DroplayerSchedule};
use crate::encoders::{EncoderConfig, ModelDims};
use crate::objectives::{ContrastConfig, VisionTask};
use crate::trainer::{AdamConfig, Result, TrainError};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // Model geometry.
    pub d_w: usize,
    pub heads: usize,
    pub n_lang: usize,
    pub n_vis: usize,
    pub n_co: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub d_o: usize,
    pub n_labels: usize,
    pub n_regions: usize,

    // Data source: a dataset file, or synthetic pairs when absent.
    pub dataset: Option<String>,
    pub pairs: usize,
    pub data_seed: u64,

    // Masking and matching.
    pub text_mask_rate: Scalar,
    pub p_mask: Scalar,
    pub region_mask_rate: Scalar,
    pub p_zero: Scalar,
    pub key_text_independent: bool,
    pub swap_prob: Scalar,

    // Objectives.
    pub temperature: Scalar,
    pub normalize: bool,
    pub vision_task: VisionTask,
    pub queue_capacity: usize,

    // Optimization.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub adam_eps: Scalar,
    /// EMA coefficient; derived as 1 - 1/steps_per_epoch when absent.
    pub momentum: Option<Scalar>,

    // Key-tower droplayer schedule.
    pub drop_mode: DropMode,
    pub drop_prob: Scalar,
    pub drop_activation_epoch: usize,

    // Run control.
    pub seed: u64,
    /// Run the key tower before the query tower within a step.
    pub key_first: bool,
    /// Checkpoint every this many steps; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    pub out_dir: String,
    /// Held-out synthetic pairs used by evaluation.
    pub eval_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small preset that overfits 200 synthetic pairs on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_w: 64,
            heads: 4,
            n_lang: 2,
            n_vis: 2,
            n_co: 2,
            ffn_mult: 4,
            vocab: 100,
            max_len: 8,
            d_o: 32,
            n_labels: 12,
            n_regions: 6,
            dataset: None,
            pairs: 200,
            data_seed: 11,
            text_mask_rate: 0.15,
            p_mask: 0.8,
            region_mask_rate: 0.6,
            p_zero: 1.0,
            key_text_independent: true,
            swap_prob: 0.5,
            temperature: 0.07,
            normalize: true,
            vision_task: VisionTask::Contrastive,
            queue_capacity: 512,
            batch_size: 8,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: None,
            drop_mode: DropMode::None,
            drop_prob: 0.5,
            drop_activation_epoch: 20,
            seed: 7,
            key_first: true,
            checkpoint_every: 0,
            out_dir: "runs/desk".into(),
            eval_pairs: 64,
        }
    }

    /// Full-scale preset documenting the original training geometry; shipped
    /// for reference, not meant to run on a desk.
    pub fn full_scale() -> Self {
        Self {
            d_w: 768,
            heads: 12,
            n_lang: 9,
            n_vis: 5,
            n_co: 5,
            ffn_mult: 4,
            vocab: 30522,
            max_len: 20,
            d_o: 2048,
            n_labels: 1600,
            n_regions: 36,
            pairs: 9_000_000,
            region_mask_rate: 0.15,
            p_zero: 0.5,
            temperature: 0.07,
            queue_capacity: 4096,
            batch_size: 256,
            epochs: 40,
            learning_rate: 1e-4,
            momentum: Some(0.99995),
            drop_mode: DropMode::DelayedEven,
            drop_prob: 0.5,
            drop_activation_epoch: 20,
            out_dir: "runs/full".into(),
            ..Self::desk()
        }
    }

    /// Collects every rejected field into one validation error.
    pub fn validate(&self) -> Result<()> {
        let mut faults: Vec<String> = Vec::new();
        let mut fault = |field: &str, why: &str| faults.push(format!("{field}: {why}"));

        if self.d_w == 0 {
            fault("d_w", "must be positive");
        }
        if self.heads == 0 {
            fault("heads", "must be positive");
        } else if self.d_w % self.heads != 0 {
            fault("heads", "must divide d_w");
        }
        for (name, v) in [
            ("n_lang", self.n_lang),
            ("n_vis", self.n_vis),
            ("n_co", self.n_co),
            ("ffn_mult", self.ffn_mult),
            ("d_o", self.d_o),
            ("n_labels", self.n_labels),
            ("n_regions", self.n_regions),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("queue_capacity", self.queue_capacity),
            ("eval_pairs", self.eval_pairs),
        ] {
            if v == 0 {
                fault(name, "must be positive");
            }
        }
        if self.vocab <= FIRST_WORD_ID + 1 {
            fault("vocab", "must hold the special tokens plus ordinary words");
        }
        if self.max_len < 2 {
            fault("max_len", "must cover the summary token plus one word");
        }
        if self.dataset.is_none() && self.pairs == 0 {
            fault("pairs", "must be positive when no dataset file is given");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            fault("learning_rate", "must be positive and finite");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                fault(name, "must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            fault("adam_eps", "must be positive");
        }
        if let Some(m) = self.momentum {
            if !(0.0..=1.0).contains(&m) {
                fault("momentum", "must lie in [0, 1]");
            }
        }
        for (name, p) in [
            ("text_mask_rate", self.text_mask_rate),
            ("p_mask", self.p_mask),
            ("region_mask_rate", self.region_mask_rate),
            ("p_zero", self.p_zero),
            ("swap_prob", self.swap_prob),
            ("drop_prob", self.drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                fault(name, "must lie in [0, 1]");
            }
        }
        if !(self.temperature > 0.0) {
            fault("temperature", "must be positive");
        }
        if self.batch_size == 1 && self.swap_prob > 0.0 {
            fault("batch_size", "caption swapping needs at least two records per batch");
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Validation(faults.join("; ")))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn enc(&self) -> EncoderConfig {
        EncoderConfig {
            d_w: self.d_w,
            heads: self.heads,
            n_lang: self.n_lang,
            n_vis: self.n_vis,
            n_co: self.n_co,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            enc: self.enc(),
            vocab: self.vocab,
            max_len: self.max_len,
            d_o: self.d_o,
            n_labels: self.n_labels,
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            text_rate: self.text_mask_rate,
            p_mask: self.p_mask,
            region_rate: self.region_mask_rate,
            p_zero: self.p_zero,
            key_text_independent: self.key_text_independent,
        }
    }

    pub fn contrast_config(&self) -> ContrastConfig {
        ContrastConfig {
            temperature: self.temperature,
            normalize: self.normalize,
            vision_task: self.vision_task,
        }
    }

    pub fn droplayer(&self) -> DroplayerSchedule {
        DroplayerSchedule {
            mode: self.drop_mode,
            activation_epoch: self.drop_activation_epoch,
            drop_prob: self.drop_prob,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Region masking is pointless when no vision objective consumes it.
    pub fn mask_vision(&self) -> bool {
        self.vision_task != VisionTask::None
    }
}
