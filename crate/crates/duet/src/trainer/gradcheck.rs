//! End-to-end gradient audit: replays the full step objective on a forced
//! tiny geometry and compares every query-side parameter group's analytic
//! gradient against central differences. Key-side parameters receive no
//! gradients, so they never appear in the report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{MaskedBatch, MaskedPair, CLS_ID, MASK_ID};
use crate::dual::DualNetwork;
use crate::encoders::{DropMask, EncoderConfig, ModelDims};
use crate::numeric::{finite_diff_check, sample_coords};
use crate::objectives::MemoryQueue;
use crate::params::ParamStore;
use crate::trainer::step::batch_objective;
use crate::trainer::{Result, StepSettings, TrainConfig};
use crate::{Scalar, Tape, Tensor};

pub const GRADCHECK_THRESHOLD: Scalar = 1e-4;
const FD_STEP: Scalar = 1e-5;
const COORDS_PER_GROUP: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: Scalar,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub worst: Scalar,
    pub threshold: Scalar,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

fn probe_dims() -> ModelDims {
    ModelDims {
        enc: EncoderConfig {
            d_w: 8,
            heads: 2,
            n_lang: 1,
            n_vis: 1,
            n_co: 1,
            ffn_mult: 2,
        },
        vocab: 12,
        max_len: 4,
        d_o: 4,
        n_labels: 3,
    }
}

/// Two hand-built pairs: captions of four tokens, three regions apiece, one
/// swapped caption, masked positions on both towers and both modalities.
fn probe_batch(rng: &mut ChaCha8Rng) -> MaskedBatch {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut feats = |n: usize, d: usize| -> Tensor {
        Tensor::new((0..n * d).map(|_| unit.sample(rng)).collect(), vec![n, d]).unwrap()
    };
    let feats_a = feats(3, 4);
    let feats_b = feats(3, 4);
    let mut boxes = |n: usize| -> Tensor {
        Tensor::new((0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect(), vec![n, 4]).unwrap()
    };
    let zero_row = |t: &Tensor, row: usize| -> Tensor {
        let mut v = t.values().to_vec();
        v[row * 4..(row + 1) * 4].fill(0.0);
        Tensor::new(v, vec![3, 4]).unwrap()
    };
    let replace_row = |t: &Tensor, row: usize, donor: &[Scalar]| -> Tensor {
        let mut v = t.values().to_vec();
        v[row * 4..(row + 1) * 4].copy_from_slice(donor);
        Tensor::new(v, vec![3, 4]).unwrap()
    };
    let caption_a = vec![CLS_ID, 4, 5, 6];
    let pair_a = MaskedPair {
        record_idx: 0,
        caption_from: 0,
        query_tokens: vec![CLS_ID, MASK_ID, 5, 10],
        query_mask_positions: vec![1, 3],
        query_mask_targets: vec![caption_a[1], caption_a[3]],
        key_tokens: vec![CLS_ID, 4, MASK_ID, 6],
        query_feats: zero_row(&feats_a, 1),
        masked_region_positions: vec![1],
        key_feats: feats_a.clone(),
        boxes: boxes(3),
        region_labels: vec![0, 1, 2],
        match_label: 1.0,
    };
    // The second pair reads the first pair's caption: a swapped example.
    let pair_b = MaskedPair {
        record_idx: 1,
        caption_from: 0,
        query_tokens: vec![CLS_ID, 4, MASK_ID, 6],
        query_mask_positions: vec![2],
        query_mask_targets: vec![caption_a[2]],
        key_tokens: vec![CLS_ID, MASK_ID, 5, 6],
        query_feats: replace_row(&feats_b, 0, feats_a.row(2)),
        masked_region_positions: vec![0],
        key_feats: feats_b,
        boxes: boxes(3),
        region_labels: vec![1, 2, 0],
        match_label: 0.0,
    };
    MaskedBatch {
        pairs: vec![pair_a, pair_b],
    }
}

/// Checks every query parameter group of the full step objective against
/// central differences on a forced tiny geometry. Objective composition,
/// temperature, normalization, and seed come from the config; the model
/// geometry does not.
pub fn run_gradcheck(cfg: &TrainConfig) -> Result<GradcheckReport> {
    let dims = probe_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = DualNetwork::new(dims, 0.9, &mut rng)?;

    let batch = probe_batch(&mut rng);
    let mut queue = MemoryQueue::new(8, net.dims.enc.d_w);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let negs: Vec<Scalar> = (0..5 * net.dims.enc.d_w).map(|_| unit.sample(&mut rng)).collect();
    queue.enqueue(&Tensor::new(negs, vec![5, net.dims.enc.d_w])?)?;

    let settings = StepSettings {
        contrast: cfg.contrast_config(),
        adam: cfg.adam(),
        key_first: cfg.key_first,
    };
    let drop = DropMask::none(&net.dims.enc);

    let loss_of = |store: &ParamStore| -> crate::numeric::Result<Scalar> {
        let mut tape = Tape::new();
        let qb = store.bind(&mut tape);
        let kb = net.key.bind(&mut tape);
        let mut phases = Vec::new();
        let parts = batch_objective(
            &mut tape,
            &net,
            &qb,
            &kb,
            &batch,
            &queue,
            &settings.contrast,
            &drop,
            settings.key_first,
            &mut phases,
        )
        .map_err(|e| {
            crate::numeric::NumericError::Contract(format!("probe objective failed: {e}"))
        })?;
        Ok(tape.scalar_value(parts.total))
    };

    // One tracked pass collects every analytic gradient.
    let mut tape = Tape::new();
    let qb = net.query.bind(&mut tape);
    let kb = net.key.bind(&mut tape);
    let mut phases = Vec::new();
    let parts = batch_objective(
        &mut tape,
        &net,
        &qb,
        &kb,
        &batch,
        &queue,
        &settings.contrast,
        &drop,
        settings.key_first,
        &mut phases,
    )?;
    tape.backward(parts.total)?;

    let mut groups = Vec::new();
    let mut worst: Scalar = 0.0;
    for pid in net.query.ids() {
        let name = net.query.name(pid).to_string();
        let theta = net.query.get(pid).values().to_vec();
        let analytic = qb
            .grad_of(&tape, pid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; theta.len()]);
        let coords = sample_coords(theta.len(), COORDS_PER_GROUP, pid.0 as u64);
        let base = net.query.clone();
        let f = |vals: &[Scalar]| -> crate::numeric::Result<Scalar> {
            let mut probe = base.clone();
            probe.get_mut(pid).values_mut().copy_from_slice(vals);
            loss_of(&probe)
        };
        let max_rel_err = finite_diff_check(f, &theta, &analytic, FD_STEP, &coords)?;
        worst = worst.max(max_rel_err);
        groups.push(GroupReport {
            name,
            max_rel_err,
            coords_checked: coords.len(),
        });
    }
    Ok(GradcheckReport {
        groups,
        worst,
        threshold: GRADCHECK_THRESHOLD,
    })
}
