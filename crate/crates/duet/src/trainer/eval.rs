//! Evaluation: masked-prediction perplexity, matching accuracy, and the
//! positive-rank probe, computed with gradient tracking off. Held-out
//! synthetic pairs come from a seed offset of the training data seed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_masked_batch, load_dataset, synth_dataset, PairRecord};
use crate::dual::DualNetwork;
use crate::encoders::{match_logit, mlm_logits, DropMask};
use crate::objectives::{positive_rank_accuracy, MemoryQueue};
use crate::trainer::run::{mix, restore_state};
use crate::trainer::{Checkpoint, Result, TrainConfig, TrainError};
use crate::{Scalar, Tape};

/// Offset applied to the data seed so evaluation pairs never overlap the
/// training pairs.
pub const HELD_OUT_SEED_OFFSET: u64 = 0x9E37_79B9;

const EVAL_MASK_SALT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    /// Fraction of query regions whose positive key beats every queued
    /// negative; 1.0 when the queue is empty.
    pub positive_rank_acc: Scalar,
    /// exp of the mean masked-token cross-entropy.
    pub mlm_perplexity: Scalar,
    /// Fraction of pairs whose matching logit agrees with the swap label.
    pub matching_accuracy: Scalar,
}

/// Scores a model over the given records, mirroring the training protocol:
/// masked inputs for the query tower, unmasked regions for the key tower,
/// caption swaps at one half.
pub fn evaluate_records(
    net: &DualNetwork,
    queue: &MemoryQueue,
    records: &[PairRecord],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EvalReport> {
    if records.len() < 2 {
        return Err(TrainError::Validation(
            "evaluation needs at least two pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, EVAL_MASK_SALT));
    let mask_cfg = cfg.mask_config();
    let frozen_query = net.query.detached_copy();
    let drop = DropMask::none(&net.dims.enc);

    let mut match_hits = 0usize;
    let mut match_total = 0usize;
    let mut mlm_loss_sum = 0.0;
    let mut mlm_positions = 0usize;
    let mut rank_sum = 0.0;
    let mut rank_batches = 0usize;

    let batch_size = cfg.batch_size.max(2);
    let mut start = 0usize;
    while start < records.len() {
        let end = (start + batch_size).min(records.len());
        if end - start < 2 {
            break;
        }
        let indices: Vec<usize> = (start..end).collect();
        let batch = build_masked_batch(
            records,
            &indices,
            cfg.vocab,
            &mask_cfg,
            0.5,
            cfg.mask_vision(),
            &mut rng,
        )?;
        let mut tape = Tape::new();
        let qb = frozen_query.bind(&mut tape);
        let kb = net.key.bind(&mut tape);

        let mut query_vis = Vec::new();
        let mut key_vis = Vec::new();
        for pair in &batch.pairs {
            let q_out = net.forward_pair(
                &mut tape,
                &qb,
                &pair.query_tokens,
                &pair.query_feats,
                &pair.boxes,
                None,
            )?;
            let k_out = net.forward_pair(
                &mut tape,
                &kb,
                &pair.key_tokens,
                &pair.key_feats,
                &pair.boxes,
                Some(&drop),
            )?;
            query_vis.push(q_out.vis_ctx);
            key_vis.push(k_out.vis_ctx);

            let logit = match_logit(&mut tape, &qb, &net.layout.heads, q_out.text_ctx)?;
            let predicted_match = tape.scalar_value(logit) > 0.0;
            if predicted_match == (pair.match_label == 1.0) {
                match_hits += 1;
            }
            match_total += 1;

            if !pair.query_mask_positions.is_empty() {
                let logits = mlm_logits(
                    &mut tape,
                    &qb,
                    &net.layout.heads,
                    q_out.text_ctx,
                    &pair.query_mask_positions,
                )?;
                let ce = tape.cross_entropy(logits, &pair.query_mask_targets)?;
                mlm_loss_sum += tape.scalar_value(ce) * pair.query_mask_positions.len() as Scalar;
                mlm_positions += pair.query_mask_positions.len();
            }
        }
        let q_all = tape.concat_rows(&query_vis)?;
        let k_all = tape.concat_rows(&key_vis)?;
        rank_sum += positive_rank_accuracy(
            &tape.tensor(q_all),
            &tape.tensor(k_all),
            queue,
            &cfg.contrast_config(),
        )?;
        rank_batches += 1;
        start = end;
    }

    Ok(EvalReport {
        pairs: match_total,
        positive_rank_acc: if rank_batches > 0 {
            rank_sum / rank_batches as Scalar
        } else {
            0.0
        },
        mlm_perplexity: if mlm_positions > 0 {
            (mlm_loss_sum / mlm_positions as Scalar).exp()
        } else {
            1.0
        },
        matching_accuracy: if match_total > 0 {
            match_hits as Scalar / match_total as Scalar
        } else {
            0.0
        },
    })
}

/// Scores a checkpoint on held-out pairs: fresh synthetic pairs from the
/// offset seed, or the tail of the configured dataset file.
pub fn evaluate(ckpt: &Checkpoint, pairs: usize) -> Result<EvalReport> {
    let cfg = &ckpt.config;
    let records = match &cfg.dataset {
        None => synth_dataset(
            pairs,
            cfg.vocab,
            cfg.n_regions,
            cfg.d_o,
            cfg.data_seed.wrapping_add(HELD_OUT_SEED_OFFSET),
        )?,
        Some(path) => {
            let (_, all) = load_dataset(Path::new(path))?;
            let take = pairs.min(all.len());
            all.into_iter().rev().take(take).collect()
        }
    };
    let (net, _, queue) = restore_state(ckpt)?;
    evaluate_records(&net, &queue, &records, cfg, cfg.data_seed)
}
