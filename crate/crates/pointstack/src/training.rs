//! Optimization machinery: label-smoothed cross entropy, SGD with momentum
//! and weight decay, cosine-annealed learning rate without warm restarts,
//! point-cloud augmentations, the epoch loop, and the finite-difference
//! gradient checker.
//!
//! All randomness is derived from the one configured seed. Shuffling,
//! augmentation, and dropout streams are keyed by `(seed, epoch, index)`, so
//! a run is reproducible bit for bit and training can resume at any epoch
//! with the scheduler and data order intact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{argmax_rows, PointStackModel};
use crate::tensor::{DenseMatrix, NodeId, Parameter, Scalar, Tape};
use crate::tensor::Phase;

/// Optimizer, scheduler, and augmentation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub translate: bool,
    pub translate_range: f64,
    pub rotate: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.01,
            lr_min: 0.0001,
            epochs: 200,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 2e-4,
            label_smoothing: 0.1,
            translate: true,
            translate_range: 0.2,
            rotate: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidArgument(
                "label smoothing must be in [0, 1)".into(),
            ));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::InvalidArgument("lr_min must not exceed lr_max".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate, stepped per epoch, no warm restarts:
/// `lr(t) = lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2`.
/// Hits `lr_max` at `t = 0` and `lr_min` at `t = T` exactly; `t > T` clamps.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    if t == 0 {
        return cfg.lr_max;
    }
    if t >= cfg.epochs {
        return cfg.lr_min;
    }
    let frac = t as f64 / cfg.epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Label-smoothed cross entropy over a batch of logits; see
/// [`Tape::smoothed_cross_entropy`] for the target-distribution convention.
pub fn smoothed_cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    targets: &[usize],
    epsilon: f64,
) -> Result<NodeId> {
    tape.smoothed_cross_entropy(logits, targets, epsilon)
}

/// SGD with momentum and weight decay:
/// `v = momentum * v + grad + weight_decay * value; value -= lr * v`.
///
/// Velocity slots line up with the registration order of the parameter set.
pub struct SgdOptimizer<S> {
    momentum: S,
    weight_decay: S,
    velocity: Vec<DenseMatrix<S>>,
}

impl<S: Scalar> SgdOptimizer<S> {
    pub fn new(params: &crate::tensor::Parameters<S>, momentum: f64, weight_decay: f64) -> Self {
        SgdOptimizer {
            momentum: S::from_f64(momentum),
            weight_decay: S::from_f64(weight_decay),
            velocity: params
                .iter()
                .map(|(_, p)| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    /// Apply one update. Emits a stale-gradient warning if every trainable
    /// gradient is exactly zero (step before backward).
    pub fn step(&mut self, params: &crate::tensor::Parameters<S>, lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(
                "optimizer was built for a different parameter set".into(),
            ));
        }
        let lr = S::from_f64(lr);
        let mut any_nonzero = false;
        for ((_, p), v) in params.iter().zip(self.velocity.iter_mut()) {
            if !p.trainable() {
                continue;
            }
            p.apply_update(|value, grad| {
                for ((vel, &g), val) in v
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(value.data().iter())
                {
                    if g != S::zero() {
                        any_nonzero = true;
                    }
                    *vel = self.momentum * *vel + g + self.weight_decay * *val;
                }
                for (val, &vel) in value.data_mut().iter_mut().zip(v.data()) {
                    *val -= lr * vel;
                }
            });
        }
        if !any_nonzero {
            eprintln!("warning: sgd step with all-zero gradients (step before backward?)");
        }
        Ok(())
    }
}

/// Add one uniform offset in `[-range, range]^3` to every point.
pub fn augment_translate<R: Rng>(cloud: &PointCloud, rng: &mut R, range: f64) -> PointCloud {
    let offset = [
        rng.gen_range(-range..=range),
        rng.gen_range(-range..=range),
        rng.gen_range(-range..=range),
    ];
    cloud.translated(offset)
}

/// Rotate by a uniform random angle about the up (z) axis.
pub fn augment_rotate<R: Rng>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    cloud.rotated_z(angle)
}

/// Mutable training progress: epoch counter, running loss, best metric seen,
/// and the optimizer (whose velocity is the only non-derivable state).
/// Everything random is re-derived from `(seed, epoch, index)`, so resuming
/// at epoch `t` continues with `cosine_lr(t)` and the original data order.
pub struct TrainState<S> {
    pub epoch: usize,
    pub step: usize,
    pub running_loss: f64,
    pub best_metric: f64,
    pub optimizer: SgdOptimizer<S>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: &PointStackModel<S>, cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            running_loss: 0.0,
            best_metric: 0.0,
            optimizer: SgdOptimizer::new(&model.params, cfg.momentum, cfg.weight_decay),
        }
    }
}

/// Loss and train-mode accuracy of one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream derivation: one root seed, one stream per tag list.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut out = splitmix(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xff51afd7ed558ccd);
        out ^= splitmix(&mut state);
    }
    ChaCha8Rng::seed_from_u64(out)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn augment_sample(cloud: &PointCloud, cfg: &TrainConfig, epoch: usize, index: usize) -> PointCloud {
    if !cfg.translate && !cfg.rotate {
        return cloud.clone();
    }
    // Keyed by (epoch, sample index): augmentation does not depend on batch
    // assembly order.
    let mut rng = derive_rng(cfg.seed, &[STREAM_AUGMENT, epoch as u64, index as u64]);
    let mut out = cloud.clone();
    if cfg.translate {
        out = augment_translate(&out, &mut rng, cfg.translate_range);
    }
    if cfg.rotate {
        out = augment_rotate(&out, &mut rng);
    }
    out
}

/// One pass over the training split: shuffled mini-batches, forward, loss,
/// backward, SGD step with `cosine_lr(state.epoch)`. A trailing batch of one
/// is folded into its predecessor so batch statistics stay defined.
pub fn train_epoch<S: Scalar>(
    model: &PointStackModel<S>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState<S>,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let lr = cosine_lr(state.epoch, cfg);
    let n = dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = derive_rng(cfg.seed, &[STREAM_SHUFFLE, state.epoch as u64]);
    for i in (1..n).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
    if batches.len() >= 2 && batches.last().map(|b| b.len()) == Some(1) {
        // Merge the singleton tail into the previous batch.
        let merged_start = (batches.len() - 2) * cfg.batch_size;
        batches.pop();
        batches.pop();
        batches.push(&order[merged_start..]);
    }

    let segmentation = model.config.is_segmentation();
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;

    for (batch_idx, batch) in batches.into_iter().enumerate() {
        let mut dropout_rng = derive_rng(
            cfg.seed,
            &[STREAM_DROPOUT, state.epoch as u64, batch_idx as u64],
        );
        let augmented: Vec<PointCloud> = batch
            .iter()
            .map(|&i| augment_sample(&dataset.train[i], cfg, state.epoch, i))
            .collect();

        let mut tape = Tape::new();
        let (logits, targets): (NodeId, Vec<usize>) = if segmentation {
            let refs: Vec<&PointCloud> = augmented.iter().collect();
            let logits = model.segment_batch(&mut tape, &refs, Phase::Train, &mut dropout_rng)?;
            let mut targets = Vec::new();
            for cloud in &augmented {
                let labels = cloud.point_labels.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("segmentation sample without point labels".into())
                })?;
                targets.extend(labels.iter().map(|&l| l as usize));
            }
            (logits, targets)
        } else {
            let refs: Vec<&PointCloud> = augmented.iter().collect();
            let logits = model.classify_batch(&mut tape, &refs, Phase::Train, &mut dropout_rng)?;
            let targets = augmented
                .iter()
                .map(|c| {
                    c.class_label.map(|l| l as usize).ok_or_else(|| {
                        Error::InvalidArgument("classification sample without class label".into())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (logits, targets)
        };

        let loss = tape.smoothed_cross_entropy(logits, &targets, cfg.label_smoothing)?;
        model.params.zero_grads();
        tape.backward(loss)?;
        state.optimizer.step(&model.params, lr)?;

        let predictions = argmax_rows(tape.value(logits));
        correct += predictions
            .iter()
            .zip(&targets)
            .filter(|(p, t)| p == t)
            .count();
        total += targets.len();
        total_loss += tape.scalar(loss)? * targets.len() as f64;
        state.step += 1;
    }

    let metrics = EpochMetrics {
        epoch: state.epoch,
        lr,
        mean_loss: total_loss / total as f64,
        train_accuracy: correct as f64 / total as f64,
    };
    state.running_loss = metrics.mean_loss;
    state.epoch += 1;
    Ok(metrics)
}

/// Maximum relative error between analytic and central finite-difference
/// gradients of a recorded scalar loss.
///
/// `record` must rebuild the loss from scratch on the supplied tape each
/// call, reading the current values of `inputs`. Relative error uses a
/// `1e-8` denominator floor. Entries where the two estimates agree within
/// `1e-7` absolutely are treated as matching: at `h = 1e-5` the central
/// difference of an O(1) loss carries roundoff of that order, so smaller
/// disagreements are below the method's resolution (this is what zero-valued
/// true gradients look like through finite differences). Meant for 64-bit
/// runs.
pub fn grad_check<S, F>(record: F, inputs: &[&Parameter<S>], h: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = record(&mut tape)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::InvalidArgument(
            "grad_check requires a scalar loss".into(),
        ));
    }
    for p in inputs {
        p.zero_grad();
    }
    tape.backward(loss)?;
    let analytic: Vec<DenseMatrix<S>> = inputs.iter().map(|p| p.grad().clone()).collect();

    let mut worst = 0.0f64;
    let half = S::from_f64(h);
    for (p, grads) in inputs.iter().zip(&analytic) {
        for r in 0..p.rows() {
            for c in 0..p.cols() {
                p.perturb(r, c, half);
                let mut t_plus = Tape::new();
                let plus = record(&mut t_plus)?;
                let f_plus = t_plus.scalar(plus)?;

                p.perturb(r, c, -(half + half));
                let mut t_minus = Tape::new();
                let minus = record(&mut t_minus)?;
                let f_minus = t_minus.scalar(minus)?;

                p.perturb(r, c, half);

                let numeric = (f_plus - f_minus) / (2.0 * h);
                let a = grads.get(r, c).to_f64();
                let diff = (a - numeric).abs();
                if diff <= 1e-7 {
                    continue;
                }
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(diff / denom);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameters;

    #[test]
    fn cosine_endpoints_are_exact() {
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &cfg), 0.01);
        assert_eq!(cosine_lr(200, &cfg), 0.0001);
        assert_eq!(cosine_lr(500, &cfg), 0.0001, "clamps past T");
        let mid = cosine_lr(100, &cfg);
        assert!((mid - 0.00505).abs() < 1e-12, "midpoint {mid}");
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for t in 0..=200 {
            let lr = cosine_lr(t, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn smoothed_ce_matches_hand_values() {
        // Uniform logits: loss is ln 2 regardless of smoothing.
        for eps in [0.0, 0.1] {
            let mut tape = Tape::<f64>::new();
            let logits = tape.input(DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
            let loss = tape.smoothed_cross_entropy(logits, &[0], eps).unwrap();
            assert!((tape.scalar(loss).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        }

        // Confident and correct: softplus(-20) = ln(1 + e^-20).
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(DenseMatrix::from_rows(&[vec![10.0, -10.0]]).unwrap());
        let loss = tape.smoothed_cross_entropy(logits, &[0], 0.0).unwrap();
        let expect = (1.0 + (-20.0f64).exp()).ln();
        assert!((tape.scalar(loss).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 2.0611536181902037e-9).abs() < 1e-16);
    }

    #[test]
    fn smoothed_ce_rejects_bad_targets() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert!(tape.smoothed_cross_entropy(logits, &[2], 0.0).is_err());
    }

    #[test]
    fn smoothed_loss_is_bounded_below_by_target_entropy() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 0.2f64;
        let c = 5;
        // Entropy of the smoothed target distribution.
        let off = eps / c as f64;
        let on = 1.0 - eps + off;
        let entropy = -(on * on.ln() + (c as f64 - 1.0) * off * off.ln());
        for _ in 0..50 {
            let logits_m = DenseMatrix::<f64>::randn(1, c, 3.0, &mut rng);
            let mut tape = Tape::new();
            let logits = tape.input(logits_m);
            let loss = tape.smoothed_cross_entropy(logits, &[1], eps).unwrap();
            assert!(tape.scalar(loss).unwrap() >= entropy - 1e-12);
        }
    }

    #[test]
    fn sgd_plain_step_is_exact() {
        let p = Parameter::new(DenseMatrix::from_rows(&[vec![1.0f64, 2.0]]).unwrap());
        let mut params = Parameters::new();
        params.register("w", &p);
        p.accumulate_grad(&DenseMatrix::from_rows(&[vec![0.5, -1.0]]).unwrap())
            .unwrap();
        let mut opt = SgdOptimizer::new(&params, 0.0, 0.0);
        opt.step(&params, 0.1).unwrap();
        assert_eq!(p.value().row(0), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn sgd_zero_grad_leaves_values() {
        let p = Parameter::new(DenseMatrix::from_rows(&[vec![1.0f64, 2.0]]).unwrap());
        let mut params = Parameters::new();
        params.register("w", &p);
        let mut opt = SgdOptimizer::new(&params, 0.0, 0.0);
        opt.step(&params, 0.1).unwrap();
        assert_eq!(p.value().row(0), &[1.0, 2.0]);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        // Two steps with constant gradient g: total displacement lr*g*(1 + 1.9).
        let g = 0.4f64;
        let p = Parameter::new(DenseMatrix::from_rows(&[vec![0.0f64]]).unwrap());
        let mut params = Parameters::new();
        params.register("w", &p);
        let mut opt = SgdOptimizer::new(&params, 0.9, 0.0);
        for _ in 0..2 {
            p.zero_grad();
            p.accumulate_grad(&DenseMatrix::from_rows(&[vec![g]]).unwrap())
                .unwrap();
            opt.step(&params, 0.1).unwrap();
        }
        let expect = -0.1 * g * (1.0 + 1.9);
        assert!((p.value().get(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn translation_preserves_centroid_relative_coordinates() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = PointCloud::new(
            (0..16)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap();

        let zero = augment_translate(&cloud, &mut rng, 0.0);
        assert_eq!(zero, cloud, "range 0 is the identity");

        let moved = augment_translate(&cloud, &mut rng, 0.2);
        let c0 = cloud.centroid();
        let c1 = moved.centroid();
        for (a, b) in cloud.points().iter().zip(moved.points()) {
            for d in 0..3 {
                assert!(((a[d] - c0[d]) - (b[d] - c1[d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = PointCloud::new(
            (0..12)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let rotated = augment_rotate(&cloud, &mut rng);
        for i in 0..cloud.len() {
            for j in i + 1..cloud.len() {
                let d0: f64 = (0..3)
                    .map(|d| (cloud.points()[i][d] - cloud.points()[j][d]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let d1: f64 = (0..3)
                    .map(|d| (rotated.points()[i][d] - rotated.points()[j][d]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grad_check_linear_layer_is_tight() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Parameter::new(DenseMatrix::<f64>::randn(3, 2, 1.0, &mut rng));
        let b = Parameter::new(DenseMatrix::<f64>::randn(1, 2, 1.0, &mut rng));
        let x = DenseMatrix::<f64>::randn(4, 3, 1.0, &mut rng);
        let err = grad_check(
            |tape| {
                let xn = tape.input(x.clone());
                let y = tape.linear(xn, &w, Some(&b))?;
                Ok(tape.sum_all(y))
            },
            &[&w, &b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_learnable_pool() {
        use crate::pooling::{learnable_pool, LearnablePoolingParams};
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp = LearnablePoolingParams::<f64>::new(2, 4, 8, 2, &mut rng).unwrap();
        let f = DenseMatrix::<f64>::randn(6, 4, 1.0, &mut rng);
        let err = grad_check(
            |tape| {
                let fn_ = tape.input(f.clone());
                let pooled = learnable_pool(tape, fn_, &lp)?;
                Ok(tape.sum_all(pooled))
            },
            &[&lp.queries, &lp.w_q, &lp.w_k, &lp.w_v],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }
}
