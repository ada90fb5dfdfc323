//! One pretraining step over a masked batch, in six phases: key forward,
//! query forward, loss assembly, optimizer update of the query parameters,
//! momentum update of the key parameters, and enqueue of the key region
//! features. The two forwards are independent, so their order is
//! configurable for ablation; key-first keeps the enqueued features ahead
//! of the in-step momentum update.

use crate::data::MaskedBatch;
use crate::dual::DualNetwork;
use crate::encoders::{
    label_logits, match_logit, mlm_logits, regress_features, DropMask, EncoderOutput,
};
use crate::numeric::ValueId;
use crate::objectives::{
    contrastive_loss, legacy_visual_losses, matching_loss, mlm_loss, positive_rank_accuracy,
    ContrastConfig, LossReport, MemoryQueue, VisionTask,
};
use crate::params::Bound;
use crate::trainer::{AdamConfig, AdamState, Result, TrainError};
use crate::{Scalar, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub contrast: ContrastConfig,
    pub adam: AdamConfig,
    /// Run the key tower before the query tower.
    pub key_first: bool,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            contrast: ContrastConfig::default(),
            adam: AdamConfig::default(),
            key_first: true,
        }
    }
}

/// Execution record of one step, for order assertions and logging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTrace {
    /// Phase names in the order they ran.
    pub phases: Vec<&'static str>,
    pub queue_before: usize,
    pub queue_after: usize,
    pub dropped_layers: usize,
}

struct TowerPass {
    text_ctxs: Vec<ValueId>,
    vis_ctxs: Vec<ValueId>,
    /// All region rows of the batch stacked: `[B*N x d_w]`.
    vis_all: ValueId,
}

fn forward_tower(
    tape: &mut Tape,
    bound: &Bound,
    net: &DualNetwork,
    batch: &MaskedBatch,
    query_side: bool,
    drop: Option<&DropMask>,
) -> Result<TowerPass> {
    let mut text_ctxs = Vec::with_capacity(batch.pairs.len());
    let mut vis_ctxs = Vec::with_capacity(batch.pairs.len());
    for pair in &batch.pairs {
        let (tokens, feats) = if query_side {
            (&pair.query_tokens, &pair.query_feats)
        } else {
            (&pair.key_tokens, &pair.key_feats)
        };
        let out: EncoderOutput = net.forward_pair(tape, bound, tokens, feats, &pair.boxes, drop)?;
        text_ctxs.push(out.text_ctx);
        vis_ctxs.push(out.vis_ctx);
    }
    let vis_all = tape.concat_rows(&vis_ctxs)?;
    Ok(TowerPass {
        text_ctxs,
        vis_ctxs,
        vis_all,
    })
}

/// Loss components of one batch as live tape values.
pub(crate) struct ObjectiveParts {
    pub mlm: ValueId,
    pub matching: ValueId,
    pub contrast: ValueId,
    pub regression: ValueId,
    pub label: ValueId,
    pub total: ValueId,
    /// Stacked query-tower region states, `[B*N x d_w]`.
    pub query_vis: ValueId,
    /// Stacked key-tower region states, detached.
    pub key_vis: ValueId,
}

/// Both tower forwards plus the full loss composition. The bindings decide
/// which parameter values each tower reads and whether gradients flow.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_objective(
    tape: &mut Tape,
    net: &DualNetwork,
    query_bound: &Bound,
    key_bound: &Bound,
    batch: &MaskedBatch,
    queue: &MemoryQueue,
    contrast_cfg: &ContrastConfig,
    drop: &DropMask,
    key_first: bool,
    phases: &mut Vec<&'static str>,
) -> Result<ObjectiveParts> {
    let (key_pass, query_pass) = if key_first {
        phases.push("key_forward");
        let k = forward_tower(tape, key_bound, net, batch, false, Some(drop))?;
        phases.push("query_forward");
        let q = forward_tower(tape, query_bound, net, batch, true, None)?;
        (k, q)
    } else {
        phases.push("query_forward");
        let q = forward_tower(tape, query_bound, net, batch, true, None)?;
        phases.push("key_forward");
        let k = forward_tower(tape, key_bound, net, batch, false, Some(drop))?;
        (k, q)
    };

    phases.push("losses");
    let heads = &net.layout.heads;

    // Masked-token prediction over every masked position in the batch.
    let mut mlm_parts = Vec::new();
    let mut mlm_targets = Vec::new();
    for (pair, &text_ctx) in batch.pairs.iter().zip(&query_pass.text_ctxs) {
        if pair.query_mask_positions.is_empty() {
            continue;
        }
        mlm_parts.push(mlm_logits(
            tape,
            query_bound,
            heads,
            text_ctx,
            &pair.query_mask_positions,
        )?);
        mlm_targets.extend_from_slice(&pair.query_mask_targets);
    }
    let mlm = if mlm_parts.is_empty() {
        mlm_loss(tape, None, &[])?
    } else {
        let all = tape.concat_rows(&mlm_parts)?;
        mlm_loss(tape, Some(all), &mlm_targets)?
    };

    // Image-sentence matching from each pair's summary state.
    let mut match_parts = Vec::with_capacity(batch.pairs.len());
    let mut match_labels = Vec::with_capacity(batch.pairs.len());
    for (pair, &text_ctx) in batch.pairs.iter().zip(&query_pass.text_ctxs) {
        match_parts.push(match_logit(tape, query_bound, heads, text_ctx)?);
        match_labels.push(pair.match_label);
    }
    let match_all = tape.concat_rows(&match_parts)?;
    let matching = matching_loss(tape, match_all, &match_labels)?;

    // Vision objective per the configured composition.
    let zero = tape.scalar_constant(0.0);
    let (contrast, regression, label) = match contrast_cfg.vision_task {
        VisionTask::Contrastive => {
            let c = contrastive_loss(
                tape,
                query_pass.vis_all,
                key_pass.vis_all,
                queue,
                contrast_cfg,
            )?;
            (c, zero, zero)
        }
        VisionTask::Regression | VisionTask::RegressionLabel => {
            let mut pred_parts = Vec::new();
            let mut target_rows: Vec<Scalar> = Vec::new();
            let mut label_parts = Vec::new();
            let mut label_ids = Vec::new();
            let d_o = net.dims.d_o;
            for (pair, &vis_ctx) in batch.pairs.iter().zip(&query_pass.vis_ctxs) {
                if pair.masked_region_positions.is_empty() {
                    continue;
                }
                pred_parts.push(regress_features(
                    tape,
                    query_bound,
                    heads,
                    vis_ctx,
                    &pair.masked_region_positions,
                )?);
                for &r in &pair.masked_region_positions {
                    target_rows.extend_from_slice(pair.key_feats.row(r));
                }
                if contrast_cfg.vision_task == VisionTask::RegressionLabel {
                    label_parts.push(label_logits(
                        tape,
                        query_bound,
                        heads,
                        vis_ctx,
                        &pair.masked_region_positions,
                    )?);
                    label_ids.extend(
                        pair.masked_region_positions
                            .iter()
                            .map(|&r| pair.region_labels[r]),
                    );
                }
            }
            let (predicted, targets) = if pred_parts.is_empty() {
                (None, None)
            } else {
                let rows = target_rows.len() / d_o;
                let t = tape.constant(target_rows, vec![rows, d_o])?;
                (Some(tape.concat_rows(&pred_parts)?), Some(t))
            };
            let labels = if label_parts.is_empty() {
                None
            } else {
                let all = tape.concat_rows(&label_parts)?;
                Some((all, label_ids))
            };
            let legacy = legacy_visual_losses(tape, predicted, targets, labels)?;
            (zero, legacy.regression, legacy.label.unwrap_or(zero))
        }
        VisionTask::None => (zero, zero, zero),
    };

    let mut total = tape.add(mlm, matching)?;
    for part in [contrast, regression, label] {
        total = tape.add(total, part)?;
    }

    Ok(ObjectiveParts {
        mlm,
        matching,
        contrast,
        regression,
        label,
        total,
        query_vis: query_pass.vis_all,
        key_vis: key_pass.vis_all,
    })
}

/// Runs one full training step and reports per-component losses along with
/// the execution trace.
pub fn pretrain_step(
    net: &mut DualNetwork,
    adam: &mut AdamState,
    queue: &mut MemoryQueue,
    batch: &MaskedBatch,
    drop: &DropMask,
    settings: &StepSettings,
) -> Result<(LossReport, StepTrace)> {
    if batch.pairs.is_empty() {
        return Err(TrainError::Validation("empty batch".into()));
    }
    let mut phases = Vec::with_capacity(6);
    let queue_before = queue.len();
    let mut tape = Tape::new();
    let query_bound = net.query.bind(&mut tape);
    let key_bound = net.key.bind(&mut tape);

    let parts = batch_objective(
        &mut tape,
        net,
        &query_bound,
        &key_bound,
        batch,
        queue,
        &settings.contrast,
        drop,
        settings.key_first,
        &mut phases,
    )?;

    let query_vis = tape.tensor(parts.query_vis);
    let key_vis = tape.tensor(parts.key_vis);
    let rank_acc = if settings.contrast.vision_task == VisionTask::Contrastive {
        positive_rank_accuracy(&query_vis, &key_vis, queue, &settings.contrast)?
    } else {
        0.0
    };
    let report = LossReport {
        mlm: tape.scalar_value(parts.mlm),
        matching: tape.scalar_value(parts.matching),
        contrast: tape.scalar_value(parts.contrast),
        regression: tape.scalar_value(parts.regression),
        label: tape.scalar_value(parts.label),
        total: tape.scalar_value(parts.total),
        positive_rank_acc: rank_acc,
    };

    phases.push("optimizer");
    tape.backward(parts.total)?;
    let grads: Vec<Option<Vec<Scalar>>> = net
        .query
        .ids()
        .map(|pid| query_bound.grad_of(&tape, pid).map(|g| g.to_vec()))
        .collect();
    adam.step(&mut net.query, &grads, &settings.adam)?;

    phases.push("momentum_update");
    net.momentum_update()?;

    phases.push("enqueue");
    if settings.contrast.vision_task == VisionTask::Contrastive {
        queue.enqueue(&key_vis)?;
    }

    let trace = StepTrace {
        phases,
        queue_before,
        queue_after: queue.len(),
        dropped_layers: drop.dropped_count(),
    };
    Ok((report, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_masked_batch, synth_dataset, MaskConfig};
    use crate::dual::DualNetwork;
    use crate::encoders::{DropMask, EncoderConfig, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            enc: EncoderConfig {
                d_w: 16,
                heads: 2,
                n_lang: 1,
                n_vis: 1,
                n_co: 1,
                ffn_mult: 2,
            },
            vocab: 20,
            max_len: 8,
            d_o: 6,
            n_labels: 12,
        }
    }

    fn tiny_setup(
        vision_task: VisionTask,
    ) -> (DualNetwork, AdamState, MemoryQueue, MaskedBatch, StepSettings) {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DualNetwork::new(dims, 0.9, &mut rng).unwrap();
        let adam = AdamState::new(&net.query);
        let queue = MemoryQueue::new(32, 16);
        let records = synth_dataset(6, 20, 3, 6, 21).unwrap();
        let mask_vision = vision_task != VisionTask::None;
        // Mask every region so the regression and label losses always have
        // positions to score.
        let mask_cfg = MaskConfig {
            region_rate: 1.0,
            ..MaskConfig::default()
        };
        let batch = build_masked_batch(
            &records,
            &[0, 1, 2],
            20,
            &mask_cfg,
            0.5,
            mask_vision,
            &mut rng,
        )
        .unwrap();
        let settings = StepSettings {
            contrast: ContrastConfig {
                vision_task,
                ..ContrastConfig::default()
            },
            adam: AdamConfig::default(),
            key_first: true,
        };
        (net, adam, queue, batch, settings)
    }

    #[test]
    fn phases_run_in_contract_order() {
        let (mut net, mut adam, mut queue, batch, settings) = tiny_setup(VisionTask::Contrastive);
        let drop = DropMask::none(&net.dims.enc);
        let (_, trace) =
            pretrain_step(&mut net, &mut adam, &mut queue, &batch, &drop, &settings).unwrap();
        assert_eq!(
            trace.phases,
            vec![
                "key_forward",
                "query_forward",
                "losses",
                "optimizer",
                "momentum_update",
                "enqueue"
            ]
        );
        let flipped = StepSettings {
            key_first: false,
            ..settings
        };
        let (_, trace) =
            pretrain_step(&mut net, &mut adam, &mut queue, &batch, &drop, &flipped).unwrap();
        assert_eq!(trace.phases[0], "query_forward");
        assert_eq!(trace.phases[1], "key_forward");
    }

    #[test]
    fn key_parameters_follow_the_ema_contract() {
        let (mut net, mut adam, mut queue, batch, settings) = tiny_setup(VisionTask::Contrastive);
        let drop = DropMask::none(&net.dims.enc);
        let key_before = net.key.clone();
        pretrain_step(&mut net, &mut adam, &mut queue, &batch, &drop, &settings).unwrap();
        let m = net.momentum;
        for id in net.query.ids() {
            let q_after = net.query.get(id).values();
            let k_before = key_before.get(id).values();
            let k_after = net.key.get(id).values();
            for i in 0..q_after.len() {
                let want = m * k_before[i] + (1.0 - m) * q_after[i];
                let rel = (k_after[i] - want).abs() / want.abs().max(1.0);
                assert!(rel < 1e-12, "parameter {} coord {i}", net.query.name(id));
            }
        }
    }

    #[test]
    fn queue_grows_by_regions_times_batch_until_capacity() {
        let (mut net, mut adam, mut queue, batch, settings) = tiny_setup(VisionTask::Contrastive);
        let drop = DropMask::none(&net.dims.enc);
        // 3 pairs x 3 regions = 9 rows per step into a capacity-32 queue.
        let mut expected = 0usize;
        for _ in 0..5 {
            let (_, trace) =
                pretrain_step(&mut net, &mut adam, &mut queue, &batch, &drop, &settings).unwrap();
            expected = (expected + 9).min(32);
            assert_eq!(trace.queue_after, expected);
        }
    }

    #[test]
    fn report_total_matches_component_sum() {
        for task in [
            VisionTask::Contrastive,
            VisionTask::Regression,
            VisionTask::RegressionLabel,
            VisionTask::None,
        ] {
            let (mut net, mut adam, mut queue, batch, settings) = tiny_setup(task);
            let drop = DropMask::none(&net.dims.enc);
            let (report, _) =
                pretrain_step(&mut net, &mut adam, &mut queue, &batch, &drop, &settings).unwrap();
            let sum = report.mlm
                + report.matching
                + report.contrast
                + report.regression
                + report.label;
            assert!(
                (report.total - sum).abs() < 1e-12,
                "{task:?}: total {} vs sum {sum}",
                report.total
            );
            assert!(report.mlm > 0.0);
            assert!(report.matching > 0.0);
            match task {
                VisionTask::Contrastive => {
                    assert_eq!(report.regression, 0.0);
                    assert_eq!(report.label, 0.0);
                }
                VisionTask::Regression => {
                    assert!(report.regression > 0.0);
                    assert_eq!(report.contrast, 0.0);
                    assert_eq!(report.label, 0.0);
                }
                VisionTask::RegressionLabel => {
                    assert!(report.regression > 0.0);
                    assert!(report.label > 0.0);
                    assert_eq!(report.contrast, 0.0);
                }
                VisionTask::None => {
                    assert_eq!(report.contrast, 0.0);
                    assert_eq!(report.regression, 0.0);
                    assert_eq!(report.label, 0.0);
                }
            }
        }
    }

    #[test]
    fn non_contrastive_compositions_leave_the_queue_empty() {
        let (mut net, mut adam, mut queue, batch, settings) = tiny_setup(VisionTask::Regression);
        let drop = DropMask::none(&net.dims.enc);
        pretrain_step(&mut net, &mut adam, &mut queue, &batch, &drop, &settings).unwrap();
        assert!(queue.is_empty());
    }

    #[test]
    fn step_is_deterministic_given_identical_inputs() {
        let (mut net_a, mut adam_a, mut queue_a, batch, settings) =
            tiny_setup(VisionTask::Contrastive);
        let (mut net_b, mut adam_b, mut queue_b, _, _) = tiny_setup(VisionTask::Contrastive);
        let drop = DropMask::none(&net_a.dims.enc);
        let (ra, _) =
            pretrain_step(&mut net_a, &mut adam_a, &mut queue_a, &batch, &drop, &settings).unwrap();
        let (rb, _) =
            pretrain_step(&mut net_b, &mut adam_b, &mut queue_b, &batch, &drop, &settings).unwrap();
        assert_eq!(ra, rb);
        for id in net_a.query.ids() {
            assert_eq!(net_a.query.get(id).values(), net_b.query.get(id).values());
            assert_eq!(net_a.key.get(id).values(), net_b.key.get(id).values());
        }
    }

    #[test]
    fn frozen_query_decays_the_key_gap_by_momentum() {
        // Skip the optimizer: apply momentum updates alone and watch the
        // infinity-norm gap contract by exactly m each time.
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DualNetwork::new(dims, 0.9, &mut rng).unwrap();
        // Desynchronize the towers first.
        for id in net.key.ids().collect::<Vec<_>>() {
            for v in net.key.get_mut(id).values_mut() {
                *v += 0.25;
            }
        }
        let gap = |net: &DualNetwork| -> f64 {
            let mut g: f64 = 0.0;
            for id in net.query.ids() {
                for (q, k) in net
                    .query
                    .get(id)
                    .values()
                    .iter()
                    .zip(net.key.get(id).values())
                {
                    g = g.max((q - k).abs());
                }
            }
            g
        };
        let before = gap(&net);
        net.momentum_update().unwrap();
        let after = gap(&net);
        assert!((after - 0.9 * before).abs() < 1e-12 * before.max(1.0));
    }
}
