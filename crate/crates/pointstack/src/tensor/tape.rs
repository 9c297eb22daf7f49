use rand::Rng;

use super::{DenseMatrix, Parameter, Scalar};
use crate::error::{shape_mismatch, Error, Result};

/// Batch-norm momentum for the running-statistics update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
/// Batch-norm variance guard.
pub const BATCH_NORM_EPSILON: f64 = 1e-5;

/// Whether a forward pass records training-time behaviour (dropout masks,
/// batch statistics) or inference behaviour (identity dropout, running stats).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Running statistics for one batch-norm layer.
///
/// Stored as frozen parameters so they ride along in checkpoints.
pub struct BatchNormState<S> {
    pub running_mean: Parameter<S>,
    pub running_var: Parameter<S>,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Parameter::frozen(DenseMatrix::zeros(1, channels)),
            running_var: Parameter::frozen(DenseMatrix::filled(1, channels, S::one())),
        }
    }
}

struct Node<S> {
    value: DenseMatrix<S>,
    op: Op<S>,
}

enum Op<S> {
    Input,
    Param(Parameter<S>),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, S),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Dropout(NodeId, Vec<S>),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: DenseMatrix<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    GatherRows(NodeId, Vec<usize>),
    InterpolateRows {
        x: NodeId,
        indices: Vec<[usize; 3]>,
        weights: Vec<[S; 3]>,
    },
    MaxPoolRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    RepeatRows(NodeId),
    RepeatInterleaveRows(NodeId, usize),
    NormalizeGlobalStd {
        x: NodeId,
        mean: S,
        std: S,
        eps: S,
    },
    ChannelAffine {
        x: NodeId,
        alpha: NodeId,
        beta: NodeId,
    },
    SmoothedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: DenseMatrix<S>,
        smoothing: S,
    },
    SumAll(NodeId),
}

/// The computation record: every differentiable op performed during a forward
/// pass, with enough captured state to replay the chain rule in reverse.
///
/// Ops may only reference earlier nodes, so creation order is a topological
/// order and [`Tape::backward`] is a single reverse sweep. A tape and the
/// parameters it touches form one training context; use it from one thread.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseMatrix<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient flows past it).
    pub fn input(&mut self, value: DenseMatrix<S>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Record a parameter leaf; backward accumulates into its grad slot.
    pub fn param(&mut self, p: &Parameter<S>) -> NodeId {
        let value = p.value().clone();
        self.push(value, Op::Param(p.clone()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_mismatch(
                "sub",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut value = self.value(a).clone();
        for (v, &o) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v -= o;
        }
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Broadcast-add a `1 x C` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (bx, bc) = self.value(bias).shape();
        if bx != 1 || bc != self.value(x).cols() {
            return Err(shape_mismatch(
                "add_bias",
                self.value(x).shape(),
                (bx, bc),
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).clone();
        for r in 0..value.rows() {
            for (v, &bv) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// `x * W (+ bias)`, the channel-matching affine transform.
    pub fn linear(
        &mut self,
        x: NodeId,
        weight: &Parameter<S>,
        bias: Option<&Parameter<S>>,
    ) -> Result<NodeId> {
        if self.value(x).cols() != weight.rows() {
            return Err(shape_mismatch(
                "linear",
                self.value(x).shape(),
                (weight.rows(), weight.cols()),
            ));
        }
        let w = self.param(weight);
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => {
                let bn = self.param(b);
                self.add_bias(y, bn)
            }
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut().iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        self.push(value, Op::Relu(x))
    }

    /// Row softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).softmax_rows();
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Train mode zeroes entries with probability `p` and rescales survivors
    /// by `1/(1-p)`; eval mode (or `p == 0`) is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        p: f64,
        phase: Phase,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if phase == Phase::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let mut value = self.value(x).clone();
        let mut mask = Vec::with_capacity(value.data().len());
        for v in value.data_mut().iter_mut() {
            let m = if rng.gen_range(0.0..1.0) < p {
                S::zero()
            } else {
                keep_scale
            };
            *v *= m;
            mask.push(m);
        }
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Column-wise batch normalization over the rows of `x`.
    ///
    /// Train mode normalizes by batch statistics (population variance) and
    /// updates the running statistics with momentum; eval mode normalizes by
    /// the running statistics. Training requires at least two rows.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: &Parameter<S>,
        beta: &Parameter<S>,
        state: &BatchNormState<S>,
        phase: Phase,
    ) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if gamma.cols() != c || beta.cols() != c || gamma.rows() != 1 || beta.rows() != 1 {
            return Err(shape_mismatch("batch_norm", (n, c), (1, gamma.cols())));
        }
        if phase == Phase::Train && n < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm in train mode needs a batch of at least 2 (variance undefined)"
                    .into(),
            ));
        }
        let eps = S::from_f64(BATCH_NORM_EPSILON);
        let xv = self.value(x).clone();

        let (mean, var): (Vec<S>, Vec<S>) = if phase == Phase::Train {
            let inv_n = S::from_f64(1.0 / n as f64);
            let mut mean = vec![S::zero(); c];
            for r in 0..n {
                for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_n;
            }
            let mut var = vec![S::zero(); c];
            for r in 0..n {
                for ((vv, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                    let d = v - m;
                    *vv += d * d;
                }
            }
            for vv in var.iter_mut() {
                *vv *= inv_n;
            }
            // Update running statistics.
            let mom = S::from_f64(BATCH_NORM_MOMENTUM);
            let keep = S::one() - mom;
            state.running_mean.apply_update(|value, _| {
                for (rv, &m) in value.data_mut().iter_mut().zip(&mean) {
                    *rv = keep * *rv + mom * m;
                }
            });
            state.running_var.apply_update(|value, _| {
                for (rv, &v) in value.data_mut().iter_mut().zip(&var) {
                    *rv = keep * *rv + mom * v;
                }
            });
            (mean, var)
        } else {
            (
                state.running_mean.value().data().to_vec(),
                state.running_var.value().data().to_vec(),
            )
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut x_hat = xv.clone();
        for r in 0..n {
            for ((v, &m), &istd) in x_hat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * istd;
            }
        }

        let g = self.param(gamma);
        let b = self.param(beta);
        let gv = self.value(g).clone();
        let bv = self.value(b).clone();
        let mut out = x_hat.clone();
        for r in 0..n {
            for ((v, &gg), &bb) in out.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *v = *v * gg + bb;
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: g,
                beta: b,
                x_hat,
                inv_std,
                train: phase == Phase::Train,
            },
        ))
    }

    /// Output row `r` is input row `indices[r]`.
    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(x);
        let mut value = DenseMatrix::zeros(indices.len(), c);
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(src.row(i));
        }
        Ok(self.push(value, Op::GatherRows(x, indices)))
    }

    /// Output row `r` is the weighted sum of up to three input rows; used for
    /// inverse-distance feature propagation.
    pub fn interpolate_rows(
        &mut self,
        x: NodeId,
        indices: Vec<[usize; 3]>,
        weights: Vec<[S; 3]>,
    ) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if indices.len() != weights.len() || indices.is_empty() {
            return Err(Error::InvalidArgument(
                "interpolate_rows: indices/weights length mismatch or empty".into(),
            ));
        }
        if indices.iter().flatten().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "interpolate_rows: index out of range for {n} rows"
            )));
        }
        let src = self.value(x);
        let mut value = DenseMatrix::zeros(indices.len(), c);
        for (r, (idx, w)) in indices.iter().zip(&weights).enumerate() {
            let out_row = value.row_mut(r);
            for t in 0..3 {
                let src_row = src.row(idx[t]);
                let wt = w[t];
                for (o, &v) in out_row.iter_mut().zip(src_row) {
                    *o += wt * v;
                }
            }
        }
        Ok(self.push(value, Op::InterpolateRows { x, indices, weights }))
    }

    /// Column-wise max over contiguous row chunks: `x.rows` must be a
    /// multiple of `out_rows`. Gradient routes to the argmax entry, lowest
    /// row index on ties.
    pub fn max_pool_rows(&mut self, x: NodeId, out_rows: usize) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if out_rows == 0 || n % out_rows != 0 {
            return Err(Error::InvalidArgument(format!(
                "max_pool_rows: {n} rows cannot be pooled into {out_rows} chunks"
            )));
        }
        let chunk = n / out_rows;
        let src = self.value(x);
        let mut value = DenseMatrix::zeros(out_rows, c);
        let mut argmax = vec![0usize; out_rows * c];
        for o in 0..out_rows {
            let base = o * chunk;
            let out_row = value.row_mut(o);
            out_row.copy_from_slice(src.row(base));
            for t in 0..c {
                argmax[o * c + t] = base;
            }
            for r in base + 1..base + chunk {
                let row = src.row(r);
                for t in 0..c {
                    if row[t] > out_row[t] {
                        out_row[t] = row[t];
                        argmax[o * c + t] = r;
                    }
                }
            }
        }
        Ok(self.push(value, Op::MaxPoolRows { x, argmax }))
    }

    /// Stack matrices of equal width top to bottom.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat_rows: empty list".into()));
        }
        let c = self.value(xs[0]).cols();
        let mut rows = 0;
        for &x in xs {
            if self.value(x).cols() != c {
                return Err(shape_mismatch(
                    "concat_rows",
                    (self.value(xs[0]).rows(), c),
                    self.value(x).shape(),
                ));
            }
            rows += self.value(x).rows();
        }
        let mut value = DenseMatrix::zeros(rows, c);
        let mut at = 0;
        for &x in xs {
            let src = self.value(x);
            for r in 0..src.rows() {
                value.row_mut(at).copy_from_slice(src.row(r));
                at += 1;
            }
        }
        Ok(self.push(value, Op::ConcatRows(xs.to_vec())))
    }

    /// Stack matrices of equal height left to right.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat_cols: empty list".into()));
        }
        let n = self.value(xs[0]).rows();
        let mut cols = 0;
        for &x in xs {
            if self.value(x).rows() != n {
                return Err(shape_mismatch(
                    "concat_cols",
                    (n, self.value(xs[0]).cols()),
                    self.value(x).shape(),
                ));
            }
            cols += self.value(x).cols();
        }
        let mut value = DenseMatrix::zeros(n, cols);
        let mut at = 0;
        for &x in xs {
            let src = self.value(x);
            let w = src.cols();
            for r in 0..n {
                value.row_mut(r)[at..at + w].copy_from_slice(src.row(r));
            }
            at += w;
        }
        Ok(self.push(value, Op::ConcatCols(xs.to_vec())))
    }

    /// Columns `start..start + width` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if width == 0 || start + width > c {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: range {start}..{} out of {c} columns",
                start + width
            )));
        }
        let src = self.value(x);
        let mut value = DenseMatrix::zeros(n, width);
        for r in 0..n {
            value
                .row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + width]);
        }
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Broadcast a `1 x C` row to `n` identical rows.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).shape();
        if r != 1 {
            return Err(Error::InvalidArgument(format!(
                "repeat_rows expects a single-row input, got {r}x{c}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("repeat_rows: n must be positive".into()));
        }
        let src_row = self.value(x).row(0).to_vec();
        let mut value = DenseMatrix::zeros(n, c);
        for i in 0..n {
            value.row_mut(i).copy_from_slice(&src_row);
        }
        Ok(self.push(value, Op::RepeatRows(x)))
    }

    /// Repeat each row `k` times in place: `(S x C) -> (S*k x C)`.
    pub fn repeat_interleave_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "repeat_interleave_rows: k must be positive".into(),
            ));
        }
        let (n, c) = self.value(x).shape();
        let src = self.value(x);
        let mut value = DenseMatrix::zeros(n * k, c);
        for r in 0..n {
            for j in 0..k {
                value.row_mut(r * k + j).copy_from_slice(src.row(r));
            }
        }
        Ok(self.push(value, Op::RepeatInterleaveRows(x, k)))
    }

    /// Divide every entry by the population standard deviation of all
    /// entries plus `eps`. The spread is measured around the global mean.
    pub fn normalize_global_std(&mut self, x: NodeId, eps: S) -> NodeId {
        let src = self.value(x);
        let n = src.data().len();
        let inv_n = S::from_f64(1.0 / n as f64);
        let mut mean = S::zero();
        for &v in src.data() {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::zero();
        for &v in src.data() {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let std = var.sqrt();
        let denom = S::one() / (std + eps);
        let value = src.scale(denom);
        self.push(
            value,
            Op::NormalizeGlobalStd {
                x,
                mean,
                std,
                eps,
            },
        )
    }

    /// Per-channel scale and shift: `y[r][c] = alpha[c] * x[r][c] + beta[c]`.
    pub fn channel_affine(
        &mut self,
        x: NodeId,
        alpha: &Parameter<S>,
        beta: &Parameter<S>,
    ) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if alpha.cols() != c || beta.cols() != c || alpha.rows() != 1 || beta.rows() != 1 {
            return Err(shape_mismatch("channel_affine", (n, c), (1, alpha.cols())));
        }
        let a = self.param(alpha);
        let b = self.param(beta);
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut value = self.value(x).clone();
        for r in 0..n {
            for ((v, &aa), &bb) in value.row_mut(r).iter_mut().zip(av.data()).zip(bv.data()) {
                *v = *v * aa + bb;
            }
        }
        Ok(self.push(value, Op::ChannelAffine { x, alpha: a, beta: b }))
    }

    /// Mean over the batch of cross entropy against the smoothed target
    /// distribution `(1-eps) * one_hot + eps / C`. Returns a `1 x 1` node.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<NodeId> {
        let (n, c) = self.value(logits).shape();
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!(
                "smoothed_cross_entropy: {} targets for {n} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let eps = S::from_f64(smoothing);
        let off = eps / S::from_usize(c);
        let on = (S::one() - eps) + off;
        let src = self.value(logits);
        let mut probs = DenseMatrix::zeros(n, c);
        let mut loss = S::zero();
        for r in 0..n {
            let row = src.row(r);
            let mut max = row[0];
            for &v in row {
                max = max.max(v);
            }
            let mut sum = S::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            let p_row = probs.row_mut(r);
            for (t, (&v, p)) in row.iter().zip(p_row.iter_mut()).enumerate() {
                let logp = v - lse;
                *p = logp.exp();
                let q = if t == targets[r] { on } else { off };
                loss -= q * logp;
            }
        }
        loss *= S::from_f64(1.0 / n as f64);
        let value = DenseMatrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(
            value,
            Op::SmoothedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                smoothing: eps,
            },
        ))
    }

    /// Sum of all entries as a `1 x 1` node; the scalarizer for checks.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let value = DenseMatrix::from_vec(1, 1, vec![acc]).expect("1x1");
        self.push(value, Op::SumAll(x))
    }

    /// Scalar value of a `1 x 1` node, as f64.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "expected a scalar node, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v.get(0, 0).to_f64())
    }

    /// Reverse sweep from a scalar loss node. Gradients of trainable
    /// parameters accumulate (`+=`) into their grad slots.
    pub fn backward(&self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyRecord);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, S::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(p) => {
                    if p.trainable() {
                        p.accumulate_grad(&g)?;
                    }
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads[x.0], g.transpose())?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone())?;
                    accumulate(&mut grads[b.0], g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone())?;
                    accumulate(&mut grads[b.0], g.scale(-S::one()))?;
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads[x.0], g.scale(*factor))?;
                }
                Op::AddBias(x, bias) => {
                    let mut db = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], db)?;
                    accumulate(&mut grads[x.0], g)?;
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[id].value;
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        let y_row = y.row(r);
                        let d_row = dx.row_mut(r);
                        let mut dot = S::zero();
                        for (&d, &yv) in d_row.iter().zip(y_row) {
                            dot += d * yv;
                        }
                        for (d, &yv) in d_row.iter_mut().zip(y_row) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::Dropout(x, mask) => {
                    let mut dx = g;
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    train,
                } => {
                    let (n, c) = g.shape();
                    let gv = self.value(*gamma);
                    let mut dgamma = DenseMatrix::zeros(1, c);
                    let mut dbeta = DenseMatrix::zeros(1, c);
                    for r in 0..n {
                        let g_row = g.row(r);
                        let xh_row = x_hat.row(r);
                        for t in 0..c {
                            dgamma.row_mut(0)[t] += g_row[t] * xh_row[t];
                            dbeta.row_mut(0)[t] += g_row[t];
                        }
                    }
                    let mut dx = DenseMatrix::zeros(n, c);
                    if *train {
                        let inv_n = S::from_f64(1.0 / n as f64);
                        for t in 0..c {
                            let mean_dy = dbeta.get(0, t) * inv_n;
                            let mean_dyxh = dgamma.get(0, t) * inv_n;
                            let k = gv.get(0, t) * inv_std[t];
                            for r in 0..n {
                                let v = g.get(r, t) - mean_dy - x_hat.get(r, t) * mean_dyxh;
                                dx.set(r, t, k * v);
                            }
                        }
                    } else {
                        for t in 0..c {
                            let k = gv.get(0, t) * inv_std[t];
                            for r in 0..n {
                                dx.set(r, t, g.get(r, t) * k);
                            }
                        }
                    }
                    accumulate(&mut grads[gamma.0], dgamma)?;
                    accumulate(&mut grads[beta.0], dbeta)?;
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::GatherRows(x, indices) => {
                    let (n, c) = self.value(*x).shape();
                    let mut dx = DenseMatrix::zeros(n, c);
                    for (r, &i) in indices.iter().enumerate() {
                        let g_row = g.row(r);
                        let d_row = dx.row_mut(i);
                        for (d, &v) in d_row.iter_mut().zip(g_row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::InterpolateRows {
                    x,
                    indices,
                    weights,
                } => {
                    let (n, c) = self.value(*x).shape();
                    let mut dx = DenseMatrix::zeros(n, c);
                    for (r, (idx, w)) in indices.iter().zip(weights).enumerate() {
                        let g_row = g.row(r);
                        for t in 0..3 {
                            let wt = w[t];
                            if wt == S::zero() {
                                continue;
                            }
                            let d_row = dx.row_mut(idx[t]);
                            for (d, &v) in d_row.iter_mut().zip(g_row) {
                                *d += wt * v;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::MaxPoolRows { x, argmax } => {
                    let (n, c) = self.value(*x).shape();
                    let mut dx = DenseMatrix::zeros(n, c);
                    for o in 0..g.rows() {
                        for t in 0..c {
                            let r = argmax[o * c + t];
                            let cur = dx.get(r, t);
                            dx.set(r, t, cur + g.get(o, t));
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::ConcatRows(xs) => {
                    let mut at = 0;
                    for &x in xs {
                        let (n, c) = self.value(x).shape();
                        let mut dx = DenseMatrix::zeros(n, c);
                        for r in 0..n {
                            dx.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        at += n;
                        accumulate(&mut grads[x.0], dx)?;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut at = 0;
                    for &x in xs {
                        let (n, c) = self.value(x).shape();
                        let mut dx = DenseMatrix::zeros(n, c);
                        for r in 0..n {
                            dx.row_mut(r).copy_from_slice(&g.row(r)[at..at + c]);
                        }
                        at += c;
                        accumulate(&mut grads[x.0], dx)?;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (n, c) = self.value(*x).shape();
                    let mut dx = DenseMatrix::zeros(n, c);
                    for r in 0..n {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::RepeatRows(x) => {
                    let mut dx = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in dx.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::RepeatInterleaveRows(x, k) => {
                    let (n, c) = self.value(*x).shape();
                    let mut dx = DenseMatrix::zeros(n, c);
                    for r in 0..n {
                        let d_row = dx.row_mut(r);
                        for j in 0..*k {
                            for (d, &v) in d_row.iter_mut().zip(g.row(r * k + j)) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::NormalizeGlobalStd { x, mean, std, eps } => {
                    let xv = self.value(*x);
                    let n = S::from_usize(xv.data().len());
                    let denom = S::one() / (*std + *eps);
                    let mut dx = g.scale(denom);
                    if *std > S::zero() {
                        // d sigma / d x_j = (x_j - mean) / (n * sigma)
                        let mut weighted = S::zero();
                        for (&gv, &xval) in g.data().iter().zip(xv.data()) {
                            weighted += gv * xval;
                        }
                        let k = weighted * denom * denom / (n * *std);
                        for (d, &xval) in dx.data_mut().iter_mut().zip(xv.data()) {
                            *d -= k * (xval - *mean);
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::ChannelAffine { x, alpha, beta } => {
                    let (n, c) = g.shape();
                    let xv = self.value(*x);
                    let av = self.value(*alpha);
                    let mut dalpha = DenseMatrix::zeros(1, c);
                    let mut dbeta = DenseMatrix::zeros(1, c);
                    let mut dx = DenseMatrix::zeros(n, c);
                    for r in 0..n {
                        let g_row = g.row(r);
                        let x_row = xv.row(r);
                        let dx_row = dx.row_mut(r);
                        for t in 0..c {
                            dalpha.row_mut(0)[t] += g_row[t] * x_row[t];
                            dbeta.row_mut(0)[t] += g_row[t];
                            dx_row[t] = g_row[t] * av.get(0, t);
                        }
                    }
                    accumulate(&mut grads[alpha.0], dalpha)?;
                    accumulate(&mut grads[beta.0], dbeta)?;
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::SmoothedCrossEntropy {
                    logits,
                    targets,
                    probs,
                    smoothing,
                } => {
                    let (n, c) = probs.shape();
                    let gs = g.get(0, 0);
                    let off = *smoothing / S::from_usize(c);
                    let on = (S::one() - *smoothing) + off;
                    let inv_n = S::from_f64(1.0 / n as f64);
                    let mut dl = probs.clone();
                    for r in 0..n {
                        let row = dl.row_mut(r);
                        for (t, v) in row.iter_mut().enumerate() {
                            let q = if t == targets[r] { on } else { off };
                            *v = gs * (*v - q) * inv_n;
                        }
                    }
                    accumulate(&mut grads[logits.0], dl)?;
                }
                Op::SumAll(x) => {
                    let (n, c) = self.value(*x).shape();
                    accumulate(&mut grads[x.0], DenseMatrix::filled(n, c, g.get(0, 0)))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<DenseMatrix<S>>, g: DenseMatrix<S>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_of_linear_map_has_outer_product_structure() {
        // loss = sum(W x) with x fixed: dW[i][j] = x[j].
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Parameter::new(DenseMatrix::<f64>::randn(3, 4, 1.0, &mut rng));
        let x = DenseMatrix::<f64>::randn(4, 2, 1.0, &mut rng);

        let mut tape = Tape::new();
        let wn = tape.param(&w);
        let xn = tape.input(x.clone());
        let y = tape.matmul(wn, xn).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();

        for i in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..2).map(|c| x.get(j, c)).sum();
                assert!((w.grad().get(i, j) - expect).abs() < 1e-12);
            }
        }

        // And the same thing against finite differences.
        let err = grad_check(
            |t| {
                let wn = t.param(&w);
                let xn = t.input(x.clone());
                let y = t.matmul(wn, xn)?;
                Ok(t.sum_all(y))
            },
            &[&w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn unused_parameter_keeps_exactly_zero_grad() {
        let used = Parameter::new(DenseMatrix::<f64>::filled(2, 2, 1.0));
        let unused = Parameter::new(DenseMatrix::<f64>::filled(2, 2, 1.0));
        let mut tape = Tape::new();
        let un = tape.param(&used);
        let loss = tape.sum_all(un);
        tape.backward(loss).unwrap();
        assert!(used.grad().data().iter().all(|&v| v == 1.0));
        assert!(unused.grad().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let p = Parameter::new(DenseMatrix::<f64>::filled(2, 2, 3.0));
        let mut tape = Tape::new();
        let pn = tape.param(&p);
        let loss = tape.sum_all(pn);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert!(p.grad().data().iter().all(|&v| v == 2.0), "doubled");
        p.zero_grad();
        assert!(p.grad().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_guards_empty_record_and_non_scalar_loss() {
        let tape = Tape::<f64>::new();
        assert!(matches!(
            tape.backward(NodeId(0)),
            Err(crate::error::Error::EmptyRecord)
        ));

        let mut tape = Tape::<f64>::new();
        let x = tape.input(DenseMatrix::filled(2, 2, 1.0));
        assert!(tape.backward(x).is_err(), "non-scalar loss rejected");
    }

    #[test]
    fn dropout_validates_probability_and_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(DenseMatrix::filled(3, 3, 2.0));
        assert!(tape.dropout(x, 1.0, Phase::Train, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, Phase::Train, &mut rng).is_err());

        let same = tape.dropout(x, 0.0, Phase::Train, &mut rng).unwrap();
        assert_eq!(same, x, "p = 0 in train mode is the identity node");
        let same = tape.dropout(x, 0.5, Phase::Eval, &mut rng).unwrap();
        assert_eq!(same, x, "eval mode is the identity node");

        // Train-mode survivors are rescaled by 1/(1-p).
        let dropped = tape.dropout(x, 0.5, Phase::Train, &mut rng).unwrap();
        for &v in tape.value(dropped).data() {
            assert!(v == 0.0 || (v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(DenseMatrix::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).row(0), &[0.0, 2.0]);
    }

    #[test]
    fn batch_norm_matches_population_statistics() {
        // Column [1, 3]: mean 2, population variance 1 -> [-1, 1] (up to eps).
        let gamma = Parameter::new(DenseMatrix::<f64>::filled(1, 1, 1.0));
        let beta = Parameter::new(DenseMatrix::<f64>::zeros(1, 1));
        let state = BatchNormState::new(1);
        let mut tape = Tape::new();
        let x = tape.input(DenseMatrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
        let y = tape
            .batch_norm(x, &gamma, &beta, &state, Phase::Train)
            .unwrap();
        assert!((tape.value(y).get(0, 0) + 1.0).abs() < 1e-4);
        assert!((tape.value(y).get(1, 0) - 1.0).abs() < 1e-4);

        // Running stats moved toward the batch stats with momentum 0.1.
        assert!((state.running_mean.value().get(0, 0) - 0.2).abs() < 1e-12);
        assert!((state.running_var.value().get(0, 0) - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_zero_gamma_yields_beta() {
        let gamma = Parameter::new(DenseMatrix::<f64>::zeros(1, 2));
        let beta = Parameter::new(DenseMatrix::<f64>::filled(1, 2, 5.0));
        let state = BatchNormState::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.input(DenseMatrix::randn(4, 2, 1.0, &mut rng));
        let y = tape
            .batch_norm(x, &gamma, &beta, &state, Phase::Train)
            .unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_running_stats_is_affine_identity() {
        let gamma = Parameter::new(DenseMatrix::<f64>::filled(1, 2, 1.0));
        let beta = Parameter::new(DenseMatrix::<f64>::zeros(1, 2));
        let state = BatchNormState::new(2); // mean 0, var 1
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = DenseMatrix::<f64>::randn(3, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let y = tape
            .batch_norm(x, &gamma, &beta, &state, Phase::Eval)
            .unwrap();
        assert!(tape.value(y).max_abs_diff(&input).unwrap() < 1e-4);
    }

    #[test]
    fn batch_norm_rejects_single_row_training_batches() {
        let gamma = Parameter::new(DenseMatrix::<f64>::filled(1, 2, 1.0));
        let beta = Parameter::new(DenseMatrix::<f64>::zeros(1, 2));
        let state = BatchNormState::new(2);
        let mut tape = Tape::new();
        let x = tape.input(DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let err = tape.batch_norm(x, &gamma, &beta, &state, Phase::Train);
        assert!(err.is_err(), "variance of a single row is undefined");
        // Eval mode is fine with one row.
        assert!(tape
            .batch_norm(x, &gamma, &beta, &state, Phase::Eval)
            .is_ok());
    }

    #[test]
    fn eval_ops_do_not_mutate_their_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = DenseMatrix::<f64>::randn(4, 3, 1.0, &mut rng);
        let gamma = Parameter::new(DenseMatrix::<f64>::filled(1, 3, 1.0));
        let beta = Parameter::new(DenseMatrix::<f64>::zeros(1, 3));
        let state = BatchNormState::new(3);

        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let _ = tape.dropout(x, 0.5, Phase::Eval, &mut rng).unwrap();
        let _ = tape
            .batch_norm(x, &gamma, &beta, &state, Phase::Eval)
            .unwrap();
        let _ = tape
            .batch_norm(x, &gamma, &beta, &state, Phase::Train)
            .unwrap();
        assert_eq!(*tape.value(x), input, "input node untouched");
    }

    /// Every differentiable op against central finite differences on ten
    /// random small instances each.
    #[test]
    fn per_op_gradients_match_finite_differences_over_random_instances() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let a = Parameter::new(DenseMatrix::<f64>::randn(3, 4, 1.0, &mut rng));
            let b = Parameter::new(DenseMatrix::<f64>::randn(4, 3, 1.0, &mut rng));
            let mix = DenseMatrix::<f64>::randn(4, 2, 1.0, &mut rng);
            let gamma = Parameter::new(DenseMatrix::<f64>::randn(1, 3, 1.0, &mut rng));
            let beta = Parameter::new(DenseMatrix::<f64>::randn(1, 3, 1.0, &mut rng));

            type Rec<'a> = Box<dyn Fn(&mut Tape<f64>) -> crate::error::Result<NodeId> + 'a>;
            let cases: Vec<(&str, Rec)> = vec![
                ("matmul", {
                    let (a, b) = (a.clone(), b.clone());
                    Box::new(move |t: &mut Tape<f64>| {
                        let an = t.param(&a);
                        let bn = t.param(&b);
                        let y = t.matmul(an, bn)?;
                        Ok(t.sum_all(y))
                    })
                }),
                ("softmax_then_mix", {
                    let (a, mix) = (a.clone(), mix.clone());
                    Box::new(move |t: &mut Tape<f64>| {
                        let an = t.param(&a);
                        let s = t.softmax_rows(an);
                        let m = t.input(mix.clone());
                        let y = t.matmul(s, m)?;
                        Ok(t.sum_all(y))
                    })
                }),
                ("relu_chain", {
                    let (a, b) = (a.clone(), b.clone());
                    Box::new(move |t: &mut Tape<f64>| {
                        let an = t.param(&a);
                        let bn = t.param(&b);
                        let y = t.matmul(an, bn)?;
                        let r = t.relu(y);
                        Ok(t.sum_all(r))
                    })
                }),
                ("batch_norm_train", {
                    let (a, gamma, beta) = (a.clone(), gamma.clone(), beta.clone());
                    Box::new(move |t: &mut Tape<f64>| {
                        let state = BatchNormState::new(3);
                        let an = t.param(&a); // 3x4
                        let tr = t.transpose(an); // 4x3
                        let y = t.batch_norm(tr, &gamma, &beta, &state, Phase::Train)?;
                        let yt = t.transpose(y);
                        let sq = t.matmul(y, yt)?;
                        Ok(t.sum_all(sq))
                    })
                }),
                ("normalize_channel_affine", {
                    let (a, gamma, beta) = (a.clone(), gamma.clone(), beta.clone());
                    Box::new(move |t: &mut Tape<f64>| {
                        let an = t.param(&a);
                        let tr = t.transpose(an); // 4x3
                        let n = t.normalize_global_std(tr, 1e-5);
                        let y = t.channel_affine(n, &gamma, &beta)?;
                        let yt = t.transpose(y);
                        let sq = t.matmul(y, yt)?;
                        Ok(t.sum_all(sq))
                    })
                }),
                ("max_pool_gather_concat", {
                    let a = a.clone();
                    Box::new(move |t: &mut Tape<f64>| {
                        let an = t.param(&a); // 3x4
                        let g = t.gather_rows(an, vec![0, 1, 2, 1])?; // 4x4
                        let m = t.max_pool_rows(g, 2)?; // 2x4
                        let c = t.concat_rows(&[m, m])?; // 4x4
                        let s = t.slice_cols(c, 1, 2)?; // 4x2
                        Ok(t.sum_all(s))
                    })
                }),
                ("cross_entropy", {
                    let a = a.clone();
                    Box::new(move |t: &mut Tape<f64>| {
                        let an = t.param(&a); // 3x4
                        t.smoothed_cross_entropy(an, &[0, 3, 1], 0.1)
                    })
                }),
            ];

            for (name, record) in cases {
                let inputs: Vec<&Parameter<f64>> = vec![&a, &b, &gamma, &beta];
                let err = grad_check(&record, &inputs, 1e-5).unwrap();
                assert!(err <= 1e-4, "seed {seed} op {name}: rel err {err}");
            }
        }
    }
}
