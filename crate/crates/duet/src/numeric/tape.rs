//! Operation recording and reverse-mode differentiation.

use super::{shape_str, NumericError, Result, Scalar, TensorBase};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    AddRowBias { a: usize, bias: usize },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    GatherRows { a: usize, rows: Vec<usize> },
    Softmax { a: usize },
    LogSumExpRows { a: usize },
    RowSum { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Gelu { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: S },
    NormalizeRows { a: usize, eps: S },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    BceWithLogits { logits: usize, labels: Vec<S> },
}

#[derive(Debug, Clone)]
struct Slot<S> {
    values: Vec<S>,
    shape: Vec<usize>,
    track: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

impl<S> Slot<S> {
    fn rows(&self) -> usize {
        self.values.len() / self.shape[self.shape.len() - 1]
    }

    fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }
}

/// A Wengert list: every operation appends one node whose inputs were created
/// earlier, so reverse iteration is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct TapeBase<S: Scalar> {
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> TapeBase<S> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, values: Vec<S>, shape: Vec<usize>, track: bool, op: Op<S>) -> ValueId {
        self.slots.push(Slot {
            values,
            shape,
            track,
            grad: None,
            op,
        });
        ValueId(self.slots.len() - 1)
    }

    fn slot(&self, id: ValueId) -> &Slot<S> {
        &self.slots[id.0]
    }

    /// Inserts a tensor as a leaf; gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &TensorBase<S>) -> ValueId {
        self.push(
            tensor.values().to_vec(),
            tensor.shape().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Inserts raw values as an untracked constant.
    pub fn constant(&mut self, values: Vec<S>, shape: Vec<usize>) -> Result<ValueId> {
        let t = TensorBase::new(values, shape)?;
        Ok(self.push(t.values().to_vec(), t.shape().to_vec(), false, Op::Leaf))
    }

    pub fn scalar_constant(&mut self, value: S) -> ValueId {
        self.push(vec![value], vec![1], false, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &[S] {
        &self.slot(id).values
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.slot(id).shape
    }

    pub fn numel(&self, id: ValueId) -> usize {
        self.slot(id).values.len()
    }

    pub fn is_tracked(&self, id: ValueId) -> bool {
        self.slot(id).track
    }

    /// The scalar held by a `[1]`-shaped value.
    pub fn scalar_value(&self, id: ValueId) -> S {
        debug_assert_eq!(self.numel(id), 1);
        self.slot(id).values[0]
    }

    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.slot(id).grad.as_deref()
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, id: ValueId) -> TensorBase<S> {
        let s = self.slot(id);
        TensorBase::new(s.values.clone(), s.shape.clone()).expect("recorded value is valid")
    }

    // ── shape checks ────────────────────────────────────────────────

    fn want_rank2(&self, id: ValueId, what: &str) -> Result<(usize, usize)> {
        let s = self.slot(id);
        if s.shape.len() != 2 {
            return Err(NumericError::Dimension(format!(
                "{} must be rank-2, got {}",
                what,
                shape_str(&s.shape)
            )));
        }
        Ok((s.shape[0], s.shape[1]))
    }

    fn want_same_shape(&self, a: ValueId, b: ValueId) -> Result<()> {
        if self.slot(a).shape != self.slot(b).shape {
            return Err(NumericError::Dimension(format!(
                "shapes {} and {} differ",
                shape_str(&self.slot(a).shape),
                shape_str(&self.slot(b).shape)
            )));
        }
        Ok(())
    }

    fn track_any(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.slot(*id).track)
    }

    // ── elementwise and affine ──────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.want_same_shape(a, b)?;
        let values: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.slot(a).shape.clone();
        let track = self.track_any(&[a, b]);
        Ok(self.push(values, shape, track, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.want_same_shape(a, b)?;
        let values: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.slot(a).shape.clone();
        let track = self.track_any(&[a, b]);
        Ok(self.push(values, shape, track, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.want_same_shape(a, b)?;
        let values: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.slot(a).shape.clone();
        let track = self.track_any(&[a, b]);
        Ok(self.push(values, shape, track, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: ValueId, c: S) -> ValueId {
        let values: Vec<S> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.slot(a).shape.clone();
        let track = self.slot(a).track;
        self.push(values, shape, track, Op::Scale { a: a.0, c })
    }

    /// Adds a `[cols]` bias vector to every row of a `[rows x cols]` matrix.
    pub fn add_row_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (rows, cols) = self.want_rank2(a, "add_row_bias input")?;
        let bslot = self.slot(bias);
        if bslot.shape != [cols] {
            return Err(NumericError::Dimension(format!(
                "bias {} does not match row width {}",
                shape_str(&bslot.shape),
                cols
            )));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(self.value(a)[r * cols + c] + self.value(bias)[c]);
            }
        }
        let track = self.track_any(&[a, bias]);
        Ok(self.push(
            values,
            vec![rows, cols],
            track,
            Op::AddRowBias {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    // ── matrix ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.want_rank2(a, "matmul lhs")?;
        let (k2, n) = self.want_rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(NumericError::Dimension(format!(
                "matmul inner dimensions disagree: {} vs {}",
                shape_str(&self.slot(a).shape),
                shape_str(&self.slot(b).shape)
            )));
        }
        let values = matmul_raw(self.value(a), self.value(b), m, k, n);
        let track = self.track_any(&[a, b]);
        Ok(self.push(values, vec![m, n], track, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let (rows, cols) = self.want_rank2(a, "transpose input")?;
        let src = self.value(a);
        let mut values = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                values[c * rows + r] = src[r * cols + c];
            }
        }
        let track = self.slot(a).track;
        Ok(self.push(values, vec![cols, rows], track, Op::Transpose { a: a.0 }))
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.numel(a) {
            return Err(NumericError::Dimension(format!(
                "cannot reshape {} into {}",
                shape_str(&self.slot(a).shape),
                shape_str(&shape)
            )));
        }
        let values = self.value(a).to_vec();
        let track = self.slot(a).track;
        Ok(self.push(values, shape, track, Op::Reshape { a: a.0 }))
    }

    /// Columns `[start, start+len)` of a rank-2 value.
    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (rows, cols) = self.want_rank2(a, "slice_cols input")?;
        if len == 0 || start + len > cols {
            return Err(NumericError::Index(format!(
                "column slice [{start}, {}) outside width {cols}",
                start + len
            )));
        }
        let src = self.value(a);
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let track = self.slot(a).track;
        Ok(self.push(
            values,
            vec![rows, len],
            track,
            Op::SliceCols {
                a: a.0,
                start,
                len,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(NumericError::Contract("concat_cols of no parts".into()));
        }
        let (rows, _) = self.want_rank2(parts[0], "concat_cols part")?;
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = self.want_rank2(p, "concat_cols part")?;
            if r != rows {
                return Err(NumericError::Dimension(format!(
                    "concat_cols row counts differ: {rows} vs {r}"
                )));
            }
            total += c;
        }
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.slot(p).cols();
                values.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let track = self.track_any(parts);
        Ok(self.push(
            values,
            vec![rows, total],
            track,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(NumericError::Contract("concat_rows of no parts".into()));
        }
        let (_, cols) = self.want_rank2(parts[0], "concat_rows part")?;
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = self.want_rank2(p, "concat_rows part")?;
            if c != cols {
                return Err(NumericError::Dimension(format!(
                    "concat_rows column counts differ: {cols} vs {c}"
                )));
            }
            total += r;
        }
        let mut values = Vec::with_capacity(total * cols);
        for &p in parts {
            values.extend_from_slice(self.value(p));
        }
        let track = self.track_any(parts);
        Ok(self.push(
            values,
            vec![total, cols],
            track,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Selects rows by index (with repetition allowed), e.g. table lookups.
    pub fn gather_rows(&mut self, a: ValueId, rows: &[usize]) -> Result<ValueId> {
        let (n, cols) = self.want_rank2(a, "gather_rows input")?;
        if rows.is_empty() {
            return Err(NumericError::Contract("gather_rows of no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NumericError::Index(format!(
                "row index {bad} outside height {n}"
            )));
        }
        let src = self.value(a);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            values.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let track = self.slot(a).track;
        Ok(self.push(
            values,
            vec![rows.len(), cols],
            track,
            Op::GatherRows {
                a: a.0,
                rows: rows.to_vec(),
            },
        ))
    }

    // ── nonlinearities and reductions ───────────────────────────────

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let s = self.slot(a);
        let cols = s.cols();
        if cols == 0 {
            return Err(NumericError::Dimension("softmax over empty axis".into()));
        }
        let rows = s.rows();
        let src = &s.values;
        let mut values = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                values[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                values[r * cols + c] = values[r * cols + c] / denom;
            }
        }
        let shape = s.shape.clone();
        let track = s.track;
        Ok(self.push(values, shape, track, Op::Softmax { a: a.0 }))
    }

    /// Row-wise log(sum(exp(x))) for a rank-2 value, stabilized.
    pub fn logsumexp_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (rows, cols) = self.want_rank2(a, "logsumexp input")?;
        let src = self.value(a);
        let mut values = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            values.push(logsumexp_row(row));
        }
        let track = self.slot(a).track;
        Ok(self.push(values, vec![rows], track, Op::LogSumExpRows { a: a.0 }))
    }

    /// Row sums of a rank-2 value: `[r x c] -> [r]`.
    pub fn row_sum(&mut self, a: ValueId) -> Result<ValueId> {
        let (rows, cols) = self.want_rank2(a, "row_sum input")?;
        let src = self.value(a);
        let values: Vec<S> = (0..rows)
            .map(|r| src[r * cols..(r + 1) * cols].iter().cloned().sum())
            .collect();
        let track = self.slot(a).track;
        Ok(self.push(values, vec![rows], track, Op::RowSum { a: a.0 }))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let total: S = self.value(a).iter().cloned().sum();
        let track = self.slot(a).track;
        self.push(vec![total], vec![1], track, Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = S::lit(self.numel(a) as f64);
        let total: S = self.value(a).iter().cloned().sum();
        let track = self.slot(a).track;
        self.push(vec![total / n], vec![1], track, Op::MeanAll { a: a.0 })
    }

    /// GELU with the tanh approximation; smooth everywhere, which keeps
    /// central-difference checks tight.
    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let values: Vec<S> = self.value(a).iter().map(|&x| gelu_value(x)).collect();
        let shape = self.slot(a).shape.clone();
        let track = self.slot(a).track;
        self.push(values, shape, track, Op::Gelu { a: a.0 })
    }

    /// Per-row standardization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: S) -> Result<ValueId> {
        if eps <= S::zero() {
            return Err(NumericError::Contract("layer_norm eps must be positive".into()));
        }
        let s = self.slot(x);
        let d = s.cols();
        let rows = s.rows();
        for (id, what) in [(gain, "gain"), (bias, "bias")] {
            if self.slot(id).shape != [d] {
                return Err(NumericError::Dimension(format!(
                    "layer_norm {what} {} does not match width {d}",
                    shape_str(&self.slot(id).shape)
                )));
            }
        }
        let src = &self.slot(x).values;
        let g = &self.slot(gain).values;
        let b = &self.slot(bias).values;
        let mut values = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let (mean, rstd) = row_moments(row, eps);
            for c in 0..d {
                values[r * d + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let shape = self.slot(x).shape.clone();
        let track = self.track_any(&[x, gain, bias]);
        Ok(self.push(
            values,
            shape,
            track,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    /// L2-normalizes each row; `eps` sits under the square root so the map
    /// stays smooth at the origin.
    pub fn normalize_rows(&mut self, a: ValueId, eps: S) -> Result<ValueId> {
        let (rows, cols) = self.want_rank2(a, "normalize_rows input")?;
        let src = self.value(a);
        let mut values = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row_norm(row, eps);
            for c in 0..cols {
                values[r * cols + c] = row[c] / norm;
            }
        }
        let track = self.slot(a).track;
        Ok(self.push(
            values,
            vec![rows, cols],
            track,
            Op::NormalizeRows { a: a.0, eps },
        ))
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean over rows of −log softmax(logits)[target], via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (rows, cols) = self.want_rank2(logits, "cross_entropy logits")?;
        if targets.len() != rows {
            return Err(NumericError::Dimension(format!(
                "{} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(NumericError::Index(format!(
                "target class {bad} outside {cols} classes"
            )));
        }
        let src = self.value(logits);
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            // logsumexp(row - row[t]): shifting by the target logit keeps the
            // loss accurate even when the correct class dominates.
            let shift = row[t];
            let m = row
                .iter()
                .map(|&x| x - shift)
                .fold(S::neg_infinity(), S::max);
            if m <= S::zero() {
                let rest: S = row
                    .iter()
                    .enumerate()
                    .filter(|&(c, _)| c != t)
                    .map(|(_, &x)| (x - shift).exp())
                    .sum();
                total += rest.ln_1p();
            } else {
                let sum: S = row.iter().map(|&x| (x - shift - m).exp()).sum();
                total += m + sum.ln();
            }
        }
        let mean = total / S::lit(rows as f64);
        let track = self.slot(logits).track;
        Ok(self.push(
            vec![mean],
            vec![1],
            track,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy against {0,1} labels, computed in log space.
    pub fn bce_with_logits(&mut self, logits: ValueId, labels: &[S]) -> Result<ValueId> {
        let n = self.numel(logits);
        if labels.len() != n {
            return Err(NumericError::Dimension(format!(
                "{} labels for {} logits",
                labels.len(),
                n
            )));
        }
        if labels.iter().any(|&y| y != S::zero() && y != S::one()) {
            return Err(NumericError::Contract("labels must be 0 or 1".into()));
        }
        let src = self.value(logits);
        let mut total = S::zero();
        for (&l, &y) in src.iter().zip(labels) {
            // y*softplus(-l) + (1-y)*softplus(l)
            total += y * softplus(-l) + (S::one() - y) * softplus(l);
        }
        let mean = total / S::lit(n as f64);
        let track = self.slot(logits).track;
        Ok(self.push(
            vec![mean],
            vec![1],
            track,
            Op::BceWithLogits {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every tracked slot receives a
    /// gradient buffer; tracked leaves not on the loss path get zeros.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(NumericError::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(&self.slot(loss).shape)
            )));
        }
        for s in &mut self.slots {
            s.grad = None;
        }
        let n = self.slots.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.slots[i].track {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.slots[i].grad = Some(g);
        }
        for s in &mut self.slots {
            if s.track && s.grad.is_none() {
                s.grad = Some(vec![S::zero(); s.values.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let slot = &self.slots[i];
        match &slot.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.add_grad(*a, grads, g.iter().cloned());
                self.add_grad(*b, grads, g.iter().cloned());
            }
            Op::Sub { a, b } => {
                self.add_grad(*a, grads, g.iter().cloned());
                self.add_grad(*b, grads, g.iter().map(|&x| -x));
            }
            Op::Mul { a, b } => {
                let av = &self.slots[*a].values;
                let bv = &self.slots[*b].values;
                self.add_grad(*a, grads, g.iter().zip(bv).map(|(&x, &y)| x * y));
                self.add_grad(*b, grads, g.iter().zip(av).map(|(&x, &y)| x * y));
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.add_grad(*a, grads, g.iter().map(|&x| x * c));
            }
            Op::AddRowBias { a, bias } => {
                self.add_grad(*a, grads, g.iter().cloned());
                let cols = self.slots[*bias].values.len();
                let rows = g.len() / cols;
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                self.add_grad(*bias, grads, db.into_iter());
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.slots[*a].shape[0], self.slots[*a].shape[1]);
                let n = self.slots[*b].shape[1];
                if self.slots[*a].track {
                    // da = g · bᵀ
                    let bv = &self.slots[*b].values;
                    let mut da = vec![S::zero(); m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc += g[r * n + j] * bv[c * n + j];
                            }
                            da[r * k + c] = acc;
                        }
                    }
                    self.add_grad(*a, grads, da.into_iter());
                }
                if self.slots[*b].track {
                    // db = aᵀ · g
                    let av = &self.slots[*a].values;
                    let mut db = vec![S::zero(); k * n];
                    for r in 0..k {
                        for c in 0..n {
                            let mut acc = S::zero();
                            for j in 0..m {
                                acc += av[j * k + r] * g[j * n + c];
                            }
                            db[r * n + c] = acc;
                        }
                    }
                    self.add_grad(*b, grads, db.into_iter());
                }
            }
            Op::Transpose { a } => {
                let (rows, cols) = (self.slots[*a].shape[0], self.slots[*a].shape[1]);
                let mut da = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                self.add_grad(*a, grads, da.into_iter());
            }
            Op::Reshape { a } => {
                self.add_grad(*a, grads, g.iter().cloned());
            }
            Op::SliceCols { a, start, len } => {
                let cols = self.slots[*a].cols();
                let rows = self.slots[*a].rows();
                let mut da = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..*len {
                        da[r * cols + start + c] = g[r * len + c];
                    }
                }
                self.add_grad(*a, grads, da.into_iter());
            }
            Op::ConcatCols { parts } => {
                let rows = slot.rows();
                let total = slot.cols();
                let mut offset = 0usize;
                for &p in parts {
                    let c = self.slots[p].cols();
                    if self.slots[p].track {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.add_grad(p, grads, dp.into_iter());
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = slot.cols();
                let mut offset = 0usize;
                for &p in parts {
                    let r = self.slots[p].rows();
                    if self.slots[p].track {
                        let dp = g[offset * cols..(offset + r) * cols].to_vec();
                        self.add_grad(p, grads, dp.into_iter());
                    }
                    offset += r;
                }
            }
            Op::GatherRows { a, rows } => {
                let cols = self.slots[*a].cols();
                let height = self.slots[*a].rows();
                let mut da = vec![S::zero(); height * cols];
                for (out_r, &src_r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        da[src_r * cols + c] += g[out_r * cols + c];
                    }
                }
                self.add_grad(*a, grads, da.into_iter());
            }
            Op::Softmax { a } => {
                let cols = slot.cols();
                let rows = slot.rows();
                let out = &slot.values;
                let mut da = vec![S::zero(); out.len()];
                for r in 0..rows {
                    let o = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: S = o.iter().zip(gr).map(|(&s, &x)| s * x).sum();
                    for c in 0..cols {
                        da[r * cols + c] = o[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(*a, grads, da.into_iter());
            }
            Op::LogSumExpRows { a } => {
                let cols = self.slots[*a].cols();
                let rows = self.slots[*a].rows();
                let src = &self.slots[*a].values;
                let out = &slot.values;
                let mut da = vec![S::zero(); src.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[r] * (src[r * cols + c] - out[r]).exp();
                    }
                }
                self.add_grad(*a, grads, da.into_iter());
            }
            Op::RowSum { a } => {
                let cols = self.slots[*a].cols();
                let rows = self.slots[*a].rows();
                let mut da = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[r];
                    }
                }
                self.add_grad(*a, grads, da.into_iter());
            }
            Op::SumAll { a } => {
                let n = self.slots[*a].values.len();
                self.add_grad(*a, grads, std::iter::repeat(g[0]).take(n));
            }
            Op::MeanAll { a } => {
                let n = self.slots[*a].values.len();
                let per = g[0] / S::lit(n as f64);
                self.add_grad(*a, grads, std::iter::repeat(per).take(n));
            }
            Op::Gelu { a } => {
                let src = &self.slots[*a].values;
                self.add_grad(
                    *a,
                    grads,
                    g.iter().zip(src).map(|(&gg, &x)| gg * gelu_derivative(x)),
                );
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = self.slots[*x].cols();
                let rows = self.slots[*x].rows();
                let src = &self.slots[*x].values;
                let gv = &self.slots[*gain].values;
                let mut dx = vec![S::zero(); src.len()];
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let inv_d = S::one() / S::lit(d as f64);
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = row_moments(row, *eps);
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = gr[c] * gv[c];
                        dgain[c] += gr[c] * xhat;
                        dbias[c] += gr[c];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = gr[c] * gv[c];
                        dx[r * d + c] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.add_grad(*x, grads, dx.into_iter());
                self.add_grad(*gain, grads, dgain.into_iter());
                self.add_grad(*bias, grads, dbias.into_iter());
            }
            Op::NormalizeRows { a, eps } => {
                let cols = self.slots[*a].cols();
                let rows = self.slots[*a].rows();
                let src = &self.slots[*a].values;
                let mut da = vec![S::zero(); src.len()];
                for r in 0..rows {
                    let row = &src[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let norm = row_norm(row, *eps);
                    let dot: S = gr.iter().zip(row).map(|(&gg, &x)| gg * x).sum();
                    let n3 = norm * norm * norm;
                    for c in 0..cols {
                        da[r * cols + c] = gr[c] / norm - row[c] * dot / n3;
                    }
                }
                self.add_grad(*a, grads, da.into_iter());
            }
            Op::CrossEntropy { logits, targets } => {
                let cols = self.slots[*logits].cols();
                let rows = self.slots[*logits].rows();
                let src = &self.slots[*logits].values;
                let scale = g[0] / S::lit(rows as f64);
                let mut dl = vec![S::zero(); src.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &src[r * cols..(r + 1) * cols];
                    let lse = logsumexp_row(row);
                    for c in 0..cols {
                        let p = (row[c] - lse).exp();
                        let onehot = if c == t { S::one() } else { S::zero() };
                        dl[r * cols + c] = (p - onehot) * scale;
                    }
                }
                self.add_grad(*logits, grads, dl.into_iter());
            }
            Op::BceWithLogits { logits, labels } => {
                let src = &self.slots[*logits].values;
                let scale = g[0] / S::lit(src.len() as f64);
                self.add_grad(
                    *logits,
                    grads,
                    src.iter()
                        .zip(labels)
                        .map(|(&l, &y)| (sigmoid(l) - y) * scale),
                );
            }
        }
    }

    fn add_grad<I: Iterator<Item = S>>(&self, id: usize, grads: &mut [Option<Vec<S>>], contrib: I) {
        if !self.slots[id].track {
            return;
        }
        let entry = grads[id].get_or_insert_with(|| vec![S::zero(); self.slots[id].values.len()]);
        for (e, c) in entry.iter_mut().zip(contrib) {
            *e += c;
        }
    }
}

/// Scaled dot-product attention: softmax(Q·Kᵀ/√d)·V.
///
/// Returns the output and the attention-weight value, whose rows sum to 1.
pub fn scaled_dot_attention<S: Scalar>(
    tape: &mut TapeBase<S>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
) -> Result<(ValueId, ValueId)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(NumericError::Dimension(
            "attention inputs must be rank-2".into(),
        ));
    }
    if ks[0] == 0 {
        return Err(NumericError::Contract("attention with no keys".into()));
    }
    if qs[1] != ks[1] {
        return Err(NumericError::Dimension(format!(
            "query width {} differs from key width {}",
            qs[1], ks[1]
        )));
    }
    if ks[0] != vs[0] {
        return Err(NumericError::Dimension(format!(
            "{} keys but {} value rows",
            ks[0], vs[0]
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, S::one() / S::lit(qs[1] as f64).sqrt());
    let weights = tape.softmax(scaled)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == S::zero() {
                continue;
            }
            for c in 0..n {
                out[r * n + c] += av * b[p * n + c];
            }
        }
    }
    out
}

fn logsumexp_row<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let d = S::lit(row.len() as f64);
    let mean = row.iter().cloned().sum::<S>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / d;
    (mean, S::one() / (var + eps).sqrt())
}

fn row_norm<S: Scalar>(row: &[S], eps: S) -> S {
    (row.iter().map(|&x| x * x).sum::<S>() + eps).sqrt()
}

fn gelu_value<S: Scalar>(x: S) -> S {
    let k0 = S::lit(0.7978845608028654); // sqrt(2/pi)
    let k1 = S::lit(0.044715);
    let half = S::lit(0.5);
    half * x * (S::one() + (k0 * (x + k1 * x * x * x)).tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let k0 = S::lit(0.7978845608028654);
    let k1 = S::lit(0.044715);
    let half = S::lit(0.5);
    let three = S::lit(3.0);
    let u = k0 * (x + k1 * x * x * x);
    let t = u.tanh();
    let du = k0 * (S::one() + three * k1 * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

fn softplus<S: Scalar>(x: S) -> S {
    // max(x,0) + ln(1 + exp(-|x|))
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
