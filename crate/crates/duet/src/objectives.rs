//! Training objectives and the FIFO memory of key-tower region features.
//!
//! The contrastive loss scores each query region against its own key-tower
//! feature (positive) and every stored queue entry (negatives). Key features
//! and queue entries are detached by contract: gradients reach the query
//! tower only.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::numeric::{NumericError, Result, ValueId};
use crate::{Scalar, Tape, Tensor};

const NORM_EPS: Scalar = 1e-12;

/// Which objective trains the vision stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionTask {
    /// Region-level InfoNCE against the memory queue.
    Contrastive,
    /// Masked-region feature regression.
    Regression,
    /// Feature regression plus pseudo-label classification.
    RegressionLabel,
    /// No vision-side objective at all.
    None,
}

/// Contrastive-objective settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    /// Softmax temperature for the similarity logits.
    pub temperature: Scalar,
    /// L2-normalize features before dot products.
    pub normalize: bool,
    pub vision_task: VisionTask,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            normalize: true,
            vision_task: VisionTask::Contrastive,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(NumericError::Contract(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Bounded FIFO of detached region features; the oldest entries leave first.
#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    d_w: usize,
    entries: VecDeque<Vec<Scalar>>,
    total_inserted: u64,
}

/// Serializable image of a queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub capacity: usize,
    pub d_w: usize,
    pub entries: Vec<Vec<Scalar>>,
    pub total_inserted: u64,
}

impl MemoryQueue {
    pub fn new(capacity: usize, d_w: usize) -> Self {
        Self {
            capacity,
            d_w,
            entries: VecDeque::new(),
            total_inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.d_w
    }

    pub fn total_inserted(&self) -> u64 {
        self.total_inserted
    }

    /// Appends every row of `feats` in region order, evicting oldest entries
    /// once the capacity is exceeded. The rows are copied: later model or
    /// tensor mutation cannot reach stored entries.
    pub fn enqueue(&mut self, feats: &Tensor) -> Result<()> {
        let shape = feats.shape();
        if shape.len() != 2 || shape[1] != self.d_w {
            return Err(NumericError::Dimension(format!(
                "queue of width {} cannot accept features shaped {:?}",
                self.d_w, shape
            )));
        }
        for r in 0..shape[0] {
            self.entries.push_back(feats.row(r).to_vec());
            self.total_inserted += 1;
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Scalar]> {
        self.entries.iter().map(|e| e.as_slice())
    }

    /// All entries as one `[len x d_w]` tensor, oldest first.
    pub fn as_matrix(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let mut values = Vec::with_capacity(self.entries.len() * self.d_w);
        for e in &self.entries {
            values.extend_from_slice(e);
        }
        Some(Tensor::new(values, vec![self.entries.len(), self.d_w]).expect("queue rows are valid"))
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            capacity: self.capacity,
            d_w: self.d_w,
            entries: self.entries.iter().cloned().collect(),
            total_inserted: self.total_inserted,
        }
    }

    pub fn from_snapshot(snap: &QueueSnapshot) -> Result<Self> {
        if snap.entries.len() > snap.capacity {
            return Err(NumericError::Contract(format!(
                "snapshot holds {} entries over capacity {}",
                snap.entries.len(),
                snap.capacity
            )));
        }
        if snap.entries.iter().any(|e| e.len() != snap.d_w) {
            return Err(NumericError::Dimension(
                "snapshot entry width disagrees with d_w".into(),
            ));
        }
        Ok(Self {
            capacity: snap.capacity,
            d_w: snap.d_w,
            entries: snap.entries.iter().cloned().collect(),
            total_inserted: snap.total_inserted,
        })
    }
}

/// Region-level InfoNCE. Per region i the positive score is q_i·k_i and the
/// negatives are q_i·queue_j; the loss is the mean over regions of
/// -log( exp(s+/t) / (exp(s+/t) + sum_j exp(s-_j/t)) ), via log-sum-exp.
///
/// `key_ctx` must be untracked (detached); queue entries are constants, so
/// gradients flow into `query_ctx` alone.
pub fn contrastive_loss(
    tape: &mut Tape,
    query_ctx: ValueId,
    key_ctx: ValueId,
    queue: &MemoryQueue,
    cfg: &ContrastConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    if tape.is_tracked(key_ctx) {
        return Err(NumericError::Contract(
            "key features must be detached from the gradient path".into(),
        ));
    }
    let qs = tape.shape(query_ctx).to_vec();
    let ks = tape.shape(key_ctx).to_vec();
    if qs.len() != 2 || qs != ks {
        return Err(NumericError::Dimension(format!(
            "query {:?} and key {:?} features must share an [N x d] shape",
            qs, ks
        )));
    }
    if qs[1] != queue.width() {
        return Err(NumericError::Dimension(format!(
            "feature width {} vs queue width {}",
            qs[1],
            queue.width()
        )));
    }
    let n = qs[0];
    let (q, k) = if cfg.normalize {
        (
            tape.normalize_rows(query_ctx, NORM_EPS)?,
            tape.normalize_rows(key_ctx, NORM_EPS)?,
        )
    } else {
        (query_ctx, key_ctx)
    };
    let inv_t = 1.0 / cfg.temperature;
    let prod = tape.mul(q, k)?;
    let pos = tape.row_sum(prod)?;
    let pos = tape.scale(pos, inv_t);
    let logits = match queue.as_matrix() {
        Some(mat) => {
            let stored = tape.constant(mat.values().to_vec(), mat.shape().to_vec())?;
            let stored = if cfg.normalize {
                tape.normalize_rows(stored, NORM_EPS)?
            } else {
                stored
            };
            let stored_t = tape.transpose(stored)?;
            let negs = tape.matmul(q, stored_t)?;
            let negs = tape.scale(negs, inv_t);
            let pos_col = tape.reshape(pos, vec![n, 1])?;
            tape.concat_cols(&[pos_col, negs])?
        }
        None => tape.reshape(pos, vec![n, 1])?,
    };
    let lse = tape.logsumexp_rows(logits)?;
    let diff = tape.sub(lse, pos)?;
    Ok(tape.mean_all(diff))
}

/// Fraction of regions whose positive score beats every queue negative.
/// An empty queue leaves nothing to beat, so the accuracy is 1.
pub fn positive_rank_accuracy(
    query_ctx: &Tensor,
    key_ctx: &Tensor,
    queue: &MemoryQueue,
    cfg: &ContrastConfig,
) -> Result<Scalar> {
    if query_ctx.shape() != key_ctx.shape() || query_ctx.shape().len() != 2 {
        return Err(NumericError::Dimension(
            "query and key features must share an [N x d] shape".into(),
        ));
    }
    let n = query_ctx.shape()[0];
    let d = query_ctx.shape()[1];
    let norm = |row: &[Scalar]| -> Vec<Scalar> {
        if !cfg.normalize {
            return row.to_vec();
        }
        let len = (row.iter().map(|&x| x * x).sum::<Scalar>() + NORM_EPS).sqrt();
        row.iter().map(|&x| x / len).collect()
    };
    let dot = |a: &[Scalar], b: &[Scalar]| -> Scalar { a.iter().zip(b).map(|(&x, &y)| x * y).sum() };
    let negatives: Vec<Vec<Scalar>> = queue.rows().map(norm).collect();
    let mut wins = 0usize;
    for i in 0..n {
        let q = norm(&query_ctx.values()[i * d..(i + 1) * d]);
        let pos = dot(&q, &norm(&key_ctx.values()[i * d..(i + 1) * d]));
        if negatives.iter().all(|neg| pos > dot(&q, neg)) {
            wins += 1;
        }
    }
    Ok(wins as Scalar / n as Scalar)
}

/// Masked-token cross-entropy averaged over masked positions only. A batch
/// with no masked positions contributes zero by convention.
pub fn mlm_loss(tape: &mut Tape, logits: Option<ValueId>, targets: &[usize]) -> Result<ValueId> {
    match logits {
        None if targets.is_empty() => Ok(tape.scalar_constant(0.0)),
        None => Err(NumericError::Contract(
            "masked targets supplied without logits".into(),
        )),
        Some(_) if targets.is_empty() => Err(NumericError::Contract(
            "masked logits supplied without targets".into(),
        )),
        Some(l) => tape.cross_entropy(l, targets),
    }
}

/// Binary cross-entropy of image-sentence matching logits against {0,1}
/// labels, averaged over the batch, computed in log space.
pub fn matching_loss(tape: &mut Tape, cls_logits: ValueId, labels: &[Scalar]) -> Result<ValueId> {
    tape.bce_with_logits(cls_logits, labels)
}

/// Legacy masked-region objectives for loss-composition comparisons.
#[derive(Debug, Clone, Copy)]
pub struct LegacyLosses {
    /// Mean squared error over every entry of the masked-region features.
    pub regression: ValueId,
    /// Pseudo-label cross-entropy, when labels were supplied.
    pub label: Option<ValueId>,
}

/// L2 regression of masked-region reconstructions onto the original raw
/// features, optionally with pseudo-label classification. Empty masks give
/// zero losses, mirroring the MLM convention.
pub fn legacy_visual_losses(
    tape: &mut Tape,
    predicted: Option<ValueId>,
    target_feats: Option<ValueId>,
    labels: Option<(ValueId, Vec<usize>)>,
) -> Result<LegacyLosses> {
    let regression = match (predicted, target_feats) {
        (None, None) => tape.scalar_constant(0.0),
        (Some(p), Some(t)) => {
            let diff = tape.sub(p, t)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean_all(sq)
        }
        _ => {
            return Err(NumericError::Contract(
                "feature regression needs both predictions and targets".into(),
            ))
        }
    };
    let label = match labels {
        None => None,
        Some((logits, ids)) => Some(tape.cross_entropy(logits, &ids)?),
    };
    Ok(LegacyLosses { regression, label })
}

/// Scalar loss components of one training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub mlm: Scalar,
    pub matching: Scalar,
    pub contrast: Scalar,
    pub regression: Scalar,
    pub label: Scalar,
    /// Unit-weight sum of the enabled components.
    pub total: Scalar,
    /// Fraction of query regions whose positive key outscores all negatives.
    pub positive_rank_acc: Scalar,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(values.to_vec(), shape.to_vec()).unwrap()
    }

    fn splitmix(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn filled_queue(entries: &[&[f64]], capacity: usize) -> MemoryQueue {
        let d = entries.first().map(|e| e.len()).unwrap_or(1);
        let mut q = MemoryQueue::new(capacity, d);
        for e in entries {
            q.enqueue(&tensor(e, &[1, e.len()])).unwrap();
        }
        q
    }

    #[test]
    fn queue_fifo_eviction() {
        let mut q = MemoryQueue::new(4, 1);
        q.enqueue(&tensor(&[0.0, 1.0, 2.0], &[3, 1])).unwrap();
        assert_eq!(q.len(), 3);
        q.enqueue(&tensor(&[3.0, 4.0, 5.0], &[3, 1])).unwrap();
        assert_eq!(q.len(), 4);
        let held: Vec<f64> = q.rows().map(|r| r[0]).collect();
        assert_eq!(held, vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(q.total_inserted(), 6);
    }

    #[test]
    fn queue_batch_capacity_retains_last_batches() {
        // Capacity for exactly 3 batches of 36 regions.
        let n = 36;
        let mut q = MemoryQueue::new(3 * n, 2);
        for batch in 0..5 {
            let values: Vec<f64> = (0..n * 2).map(|i| (batch * 1000 + i) as f64).collect();
            q.enqueue(&tensor(&values, &[n, 2])).unwrap();
        }
        assert_eq!(q.len(), 3 * n);
        let firsts: Vec<f64> = q.rows().map(|r| r[0]).collect();
        for (slot, &v) in firsts.iter().enumerate() {
            let batch = 2 + slot / n;
            let region = slot % n;
            assert_eq!(v, (batch * 1000 + region * 2) as f64);
        }
    }

    #[test]
    fn queue_matches_replay_oracle() {
        let mut state = 77u64;
        for capacity in [1usize, 4, 32] {
            let mut q = MemoryQueue::new(capacity, 1);
            let mut log: Vec<f64> = Vec::new();
            for step in 0..200 {
                let n = 1 + (splitmix(&mut state).abs() * 5.0) as usize;
                let values: Vec<f64> = (0..n).map(|i| (step * 10 + i) as f64).collect();
                q.enqueue(&tensor(&values, &[n, 1])).unwrap();
                log.extend(&values);
                let keep = log.len().min(capacity);
                let expect = &log[log.len() - keep..];
                let held: Vec<f64> = q.rows().map(|r| r[0]).collect();
                assert_eq!(held, expect, "capacity {capacity} step {step}");
            }
        }
    }

    #[test]
    fn queue_rejects_wrong_width() {
        let mut q = MemoryQueue::new(4, 3);
        let err = q.enqueue(&tensor(&[1.0, 2.0], &[1, 2])).unwrap_err();
        assert!(matches!(err, NumericError::Dimension(_)));
    }

    #[test]
    fn queue_entries_survive_source_mutation() {
        let mut q = MemoryQueue::new(4, 2);
        let mut src = tensor(&[1.0, 2.0], &[1, 2]);
        q.enqueue(&src).unwrap();
        src.values_mut()[0] = 99.0;
        assert_eq!(q.rows().next().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn queue_snapshot_roundtrip() {
        let q = filled_queue(&[&[1.0, 0.0], &[0.0, 1.0]], 8);
        let snap = q.snapshot();
        let restored = MemoryQueue::from_snapshot(&snap).unwrap();
        assert_eq!(restored.len(), 2);
        assert_eq!(restored.capacity(), 8);
        assert_eq!(restored.total_inserted(), 2);
        assert_eq!(
            restored.rows().collect::<Vec<_>>(),
            q.rows().collect::<Vec<_>>()
        );
    }

    fn equal_similarity_loss(k: usize) -> f64 {
        // Everything is the same unit-ish vector, so every score ties.
        let v = [0.6, 0.8];
        let q = tensor(&[0.6, 0.8, 0.6, 0.8], &[2, 2]);
        let key = tensor(&[0.6, 0.8, 0.6, 0.8], &[2, 2]);
        let mut queue = MemoryQueue::new(k.max(1), 2);
        for _ in 0..k {
            queue.enqueue(&tensor(&v, &[1, 2])).unwrap();
        }
        let cfg = ContrastConfig::default();
        let mut tape = Tape::new();
        let qid = tape.leaf(&q.clone().with_requires_grad(true));
        let kid = tape.constant(key.values().to_vec(), vec![2, 2]).unwrap();
        let loss = contrastive_loss(&mut tape, qid, kid, &queue, &cfg).unwrap();
        tape.scalar_value(loss)
    }

    #[test]
    fn contrastive_total_tie_gives_ln_k_plus_one() {
        for k in [0usize, 1, 7] {
            let loss = equal_similarity_loss(k);
            let expect = ((k + 1) as f64).ln();
            assert!((loss - expect).abs() < 1e-12, "K={k}: {loss} vs {expect}");
        }
    }

    #[test]
    fn contrastive_separation_limit() {
        // Raw scores: positive +40, negative -40 at temperature 1.
        let cfg = ContrastConfig {
            temperature: 1.0,
            normalize: false,
            vision_task: VisionTask::Contrastive,
        };
        let queue = filled_queue(&[&[-1.0]], 4);
        let mut tape = Tape::new();
        let q = tape.leaf(&tensor(&[40.0], &[1, 1]).with_requires_grad(true));
        let k = tape.constant(vec![1.0], vec![1, 1]).unwrap();
        let loss = contrastive_loss(&mut tape, q, k, &queue, &cfg).unwrap();
        assert!(tape.scalar_value(loss) < 1e-12);
        assert!(tape.scalar_value(loss) >= 0.0);
    }

    #[test]
    fn contrastive_matches_brute_force_denominator() {
        let mut state = 5u64;
        let qv: Vec<f64> = (0..4).map(|_| splitmix(&mut state)).collect();
        let kv: Vec<f64> = (0..4).map(|_| splitmix(&mut state)).collect();
        let e1: Vec<f64> = (0..2).map(|_| splitmix(&mut state)).collect();
        let e2: Vec<f64> = (0..2).map(|_| splitmix(&mut state)).collect();
        let e3: Vec<f64> = (0..2).map(|_| splitmix(&mut state)).collect();
        let queue = filled_queue(&[&e1, &e2, &e3], 8);
        let cfg = ContrastConfig::default();

        let mut tape = Tape::new();
        let q = tape.leaf(&tensor(&qv, &[2, 2]).with_requires_grad(true));
        let k = tape.constant(kv.clone(), vec![2, 2]).unwrap();
        let loss = contrastive_loss(&mut tape, q, k, &queue, &cfg).unwrap();

        // Brute force: explicit normalization, exponentials and division.
        let norm = |v: &[f64]| {
            let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let t = cfg.temperature;
        let mut expect = 0.0;
        for i in 0..2 {
            let qi = norm(&qv[i * 2..(i + 1) * 2]);
            let ki = norm(&kv[i * 2..(i + 1) * 2]);
            let pos = (dot(&qi, &ki) / t).exp();
            let mut denom = pos;
            for e in [&e1, &e2, &e3] {
                denom += (dot(&qi, &norm(e)) / t).exp();
            }
            expect += -(pos / denom).ln();
        }
        expect /= 2.0;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-10);
    }

    #[test]
    fn contrastive_invariant_under_queue_permutation() {
        let mut state = 9u64;
        let qv: Vec<f64> = (0..6).map(|_| splitmix(&mut state)).collect();
        let kv: Vec<f64> = (0..6).map(|_| splitmix(&mut state)).collect();
        let entries: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| splitmix(&mut state)).collect())
            .collect();
        let run = |order: &[usize]| {
            let refs: Vec<&[f64]> = order.iter().map(|&i| entries[i].as_slice()).collect();
            let queue = filled_queue(&refs, 16);
            let mut tape = Tape::new();
            let q = tape.leaf(&tensor(&qv, &[2, 3]).with_requires_grad(true));
            let k = tape.constant(kv.clone(), vec![2, 3]).unwrap();
            let loss =
                contrastive_loss(&mut tape, q, k, &queue, &ContrastConfig::default()).unwrap();
            tape.scalar_value(loss)
        };
        let a = run(&[0, 1, 2, 3, 4]);
        let b = run(&[4, 2, 0, 3, 1]);
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn contrastive_gradient_reaches_query_only() {
        let queue = filled_queue(&[&[0.3, -0.2]], 4);
        let mut tape = Tape::new();
        let q = tape.leaf(&tensor(&[0.5, 0.1], &[1, 2]).with_requires_grad(true));
        let k = tape.constant(vec![0.4, 0.9], vec![1, 2]).unwrap();
        let loss = contrastive_loss(&mut tape, q, k, &queue, &ContrastConfig::default()).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(q).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        assert!(tape.grad(k).is_none());
    }

    #[test]
    fn contrastive_rejects_tracked_key() {
        let queue = MemoryQueue::new(4, 2);
        let mut tape = Tape::new();
        let q = tape.leaf(&tensor(&[0.5, 0.1], &[1, 2]).with_requires_grad(true));
        let k = tape.leaf(&tensor(&[0.4, 0.9], &[1, 2]).with_requires_grad(true));
        let err = contrastive_loss(&mut tape, q, k, &queue, &ContrastConfig::default()).unwrap_err();
        assert!(matches!(err, NumericError::Contract(_)));
    }

    #[test]
    fn contrastive_decreases_as_positive_score_rises() {
        let cfg = ContrastConfig {
            temperature: 0.5,
            normalize: false,
            vision_task: VisionTask::Contrastive,
        };
        let queue = filled_queue(&[&[1.0], &[-0.5]], 4);
        let run = |pos: f64| {
            let mut tape = Tape::new();
            let q = tape.leaf(&tensor(&[1.0], &[1, 1]).with_requires_grad(true));
            let k = tape.constant(vec![pos], vec![1, 1]).unwrap();
            let loss = contrastive_loss(&mut tape, q, k, &queue, &cfg).unwrap();
            tape.scalar_value(loss)
        };
        let mut last = f64::INFINITY;
        for pos in [-1.0, 0.0, 1.0, 2.0, 3.0] {
            let l = run(pos);
            assert!(l < last, "loss must fall as the positive score rises");
            assert!(l >= 0.0);
            last = l;
        }
    }

    #[test]
    fn rank_accuracy_counts_wins_and_ignores_scale() {
        let cfg = ContrastConfig::default();
        let queue = filled_queue(&[&[1.0, 0.0]], 4);
        // Region 0 matches its key and not the negative; region 1 matches
        // the negative direction instead.
        let q = tensor(&[0.0, 1.0, 1.0, 0.0], &[2, 2]);
        let k = tensor(&[0.0, 1.0, 0.0, 1.0], &[2, 2]);
        let acc = positive_rank_accuracy(&q, &k, &queue, &cfg).unwrap();
        assert_eq!(acc, 0.5);
        // Positive rescaling of a query row changes nothing under
        // normalization.
        let q2 = tensor(&[0.0, 3.7, 1.0, 0.0], &[2, 2]);
        assert_eq!(positive_rank_accuracy(&q2, &k, &queue, &cfg).unwrap(), 0.5);
        // Empty queue: every region wins by default.
        let empty = MemoryQueue::new(4, 2);
        assert_eq!(positive_rank_accuracy(&q, &k, &empty, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn mlm_empty_mask_is_zero() {
        let mut tape = Tape::new();
        let loss = mlm_loss(&mut tape, None, &[]).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn mlm_uniform_logits_hit_ln_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 2 * 50], vec![2, 50]).unwrap();
        let loss = mlm_loss(&mut tape, Some(logits), &[7, 31]).unwrap();
        assert!((tape.scalar_value(loss) - 3.9120230054281461).abs() < 1e-12);
    }

    #[test]
    fn mlm_matches_direct_log_prob_average() {
        let mut tape = Tape::new();
        let rows = vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.0];
        let logits = tape.constant(rows.clone(), vec![2, 3]).unwrap();
        let loss = mlm_loss(&mut tape, Some(logits), &[2, 0]).unwrap();
        let direct = |row: &[f64], t: usize| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            -((row[t] - m).exp() / z).ln()
        };
        let expect = (direct(&rows[0..3], 2) + direct(&rows[3..6], 0)) / 2.0;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn mlm_mismatched_inputs_rejected() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(mlm_loss(&mut tape, Some(logits), &[]).is_err());
        assert!(mlm_loss(&mut tape, None, &[1]).is_err());
    }

    #[test]
    fn matching_maximum_entropy_point() {
        let mut tape = Tape::new();
        let logit = tape.constant(vec![0.0], vec![1, 1]).unwrap();
        let loss = matching_loss(&mut tape, logit, &[1.0]).unwrap();
        assert!((tape.scalar_value(loss) - 0.69314718055994531).abs() < 1e-15);
    }

    #[test]
    fn matching_confident_correct_vanishes() {
        let mut tape = Tape::new();
        let logit = tape.constant(vec![40.0], vec![1, 1]).unwrap();
        let loss = matching_loss(&mut tape, logit, &[1.0]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn matching_mixed_batch_matches_per_pair_mean() {
        let logits = vec![0.7, -1.3, 2.2, 0.0];
        let labels = vec![1.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone(), vec![4, 1]).unwrap();
        let loss = matching_loss(&mut tape, l, &labels).unwrap();
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&l, &y)| -(y * sigma(l).ln() + (1.0 - y) * (1.0 - sigma(l)).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn regression_zero_when_prediction_matches() {
        let mut tape = Tape::new();
        let p = tape.leaf(&tensor(&[0.4, -0.6], &[1, 2]).with_requires_grad(true));
        let t = tape.constant(vec![0.4, -0.6], vec![1, 2]).unwrap();
        let l = legacy_visual_losses(&mut tape, Some(p), Some(t), None).unwrap();
        assert_eq!(tape.scalar_value(l.regression), 0.0);
        assert!(l.label.is_none());
    }

    #[test]
    fn regression_unit_offset_on_one_of_two_rows() {
        // One of two masked regions off by one in every dimension: mean over
        // all entries is 1/2.
        let mut tape = Tape::new();
        let p = tape.constant(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0], vec![2, 3]).unwrap();
        let t = tape.constant(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![2, 3]).unwrap();
        let l = legacy_visual_losses(&mut tape, Some(p), Some(t), None).unwrap();
        assert!((tape.scalar_value(l.regression) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn regression_matches_sum_of_squares_oracle() {
        let mut state = 31u64;
        let pv: Vec<f64> = (0..6).map(|_| splitmix(&mut state)).collect();
        let tv: Vec<f64> = (0..6).map(|_| splitmix(&mut state)).collect();
        let mut tape = Tape::new();
        let p = tape.constant(pv.clone(), vec![2, 3]).unwrap();
        let t = tape.constant(tv.clone(), vec![2, 3]).unwrap();
        let l = legacy_visual_losses(&mut tape, Some(p), Some(t), None).unwrap();
        let expect: f64 =
            pv.iter().zip(&tv).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / 6.0;
        assert!((tape.scalar_value(l.regression) - expect).abs() < 1e-14);
    }

    #[test]
    fn legacy_losses_empty_mask_and_label_path() {
        let mut tape = Tape::new();
        let l = legacy_visual_losses(&mut tape, None, None, None).unwrap();
        assert_eq!(tape.scalar_value(l.regression), 0.0);

        let logits = tape.constant(vec![5.0, 0.0, 0.0, 5.0], vec![2, 2]).unwrap();
        let l2 = legacy_visual_losses(&mut tape, None, None, Some((logits, vec![0, 1]))).unwrap();
        assert!(tape.scalar_value(l2.label.unwrap()) < 0.01);

        let p = tape.constant(vec![0.0], vec![1, 1]).unwrap();
        assert!(legacy_visual_losses(&mut tape, Some(p), None, None).is_err());
    }
}
