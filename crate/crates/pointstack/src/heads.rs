//! Task heads. Classification consumes the global feature vector through a
//! stack of MLP blocks (affine, batch norm, ReLU, dropout). Segmentation
//! first propagates every resolution level back to the full input points by
//! inverse-distance interpolation over the three nearest anchors, broadcasts
//! the global vector (and optionally the object-class one-hot) to every
//! point, then runs per-point MLP blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BatchLevel, LinearBn, PointFeatureMatrix};
use crate::error::{Error, Result};
use crate::geometry::k_nearest;
use crate::tensor::{DenseMatrix, NodeId, Parameter, Parameters, Phase, Scalar, Tape};

/// Distance floor in the inverse-distance interpolation weights.
pub const INTERPOLATION_EPSILON: f64 = 1e-8;

/// Layout of a task head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Hidden block widths; must be non-empty.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Output class count: shape classes for classification, part classes
    /// for segmentation.
    pub classes: usize,
    /// Present for segmentation heads.
    pub segmentation: Option<SegmentationHeadConfig>,
    /// Batch norm inside the hidden blocks. Training a classification head
    /// with batches of one requires turning this off, since batch statistics
    /// need at least two rows.
    pub batch_norm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentationHeadConfig {
    /// Number of object categories for the one-hot conditioning vector.
    pub object_classes: usize,
    /// Whether the one-hot is appended to the per-point features.
    pub condition_on_class: bool,
}

impl HeadConfig {
    pub fn classification(hidden: Vec<usize>, classes: usize) -> Self {
        HeadConfig {
            hidden,
            dropout: 0.5,
            classes,
            segmentation: None,
            batch_norm: true,
        }
    }

    pub fn segmentation(hidden: Vec<usize>, part_classes: usize, object_classes: usize) -> Self {
        HeadConfig {
            hidden,
            dropout: 0.4,
            classes: part_classes,
            segmentation: Some(SegmentationHeadConfig {
                object_classes,
                condition_on_class: true,
            }),
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "head needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(
                "head hidden sizes must be non-empty and positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "head dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

enum Block<S> {
    WithBn(LinearBn<S>),
    Plain { weight: Parameter<S>, bias: Parameter<S> },
}

/// Hidden MLP blocks plus the final affine layer.
pub struct HeadParams<S> {
    pub config: HeadConfig,
    blocks: Vec<Block<S>>,
    out_weight: Parameter<S>,
    out_bias: Parameter<S>,
}

impl<S: Scalar> HeadParams<S> {
    pub fn new<R: Rng>(input_dim: usize, config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.hidden.len());
        let mut in_dim = input_dim;
        for &h in &config.hidden {
            if config.batch_norm {
                blocks.push(Block::WithBn(LinearBn::new(in_dim, h, rng)));
            } else {
                let limit = (6.0 / (in_dim + h) as f64).sqrt();
                blocks.push(Block::Plain {
                    weight: Parameter::new(DenseMatrix::rand_uniform(in_dim, h, limit, rng)),
                    bias: Parameter::new(DenseMatrix::zeros(1, h)),
                });
            }
            in_dim = h;
        }
        let limit = (6.0 / (in_dim + config.classes) as f64).sqrt();
        let out_weight = Parameter::new(DenseMatrix::rand_uniform(in_dim, config.classes, limit, rng));
        let out_bias = Parameter::new(DenseMatrix::zeros(1, config.classes));
        Ok(HeadParams {
            config,
            blocks,
            out_weight,
            out_bias,
        })
    }

    pub fn register_into(&self, params: &mut Parameters<S>, prefix: &str) {
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::WithBn(lb) => lb.register_into(params, &format!("{prefix}.block{i}")),
                Block::Plain { weight, bias } => {
                    params.register(format!("{prefix}.block{i}.weight"), weight);
                    params.register(format!("{prefix}.block{i}.bias"), bias);
                }
            }
        }
        params.register(format!("{prefix}.out.weight"), &self.out_weight);
        params.register(format!("{prefix}.out.bias"), &self.out_bias);
    }

    /// Zero the final affine layer; handy for tests that want uniform logits.
    pub fn zero_output_layer(&self) {
        let (r, c) = (self.out_weight.rows(), self.out_weight.cols());
        self.out_weight.set_value(DenseMatrix::zeros(r, c)).expect("same shape");
        self.out_bias
            .set_value(DenseMatrix::zeros(1, c))
            .expect("same shape");
    }

    fn mlp(
        &self,
        tape: &mut Tape<S>,
        mut x: NodeId,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        for b in &self.blocks {
            x = match b {
                Block::WithBn(lb) => lb.forward(tape, x, phase)?,
                Block::Plain { weight, bias } => {
                    let y = tape.linear(x, weight, Some(bias))?;
                    tape.relu(y)
                }
            };
            x = tape.dropout(x, self.config.dropout, phase, rng)?;
        }
        tape.linear(x, &self.out_weight, Some(&self.out_bias))
    }
}

/// Class logits for a batch of global feature vectors (`batch x D` in,
/// `batch x classes` out).
pub fn classify<S: Scalar>(
    tape: &mut Tape<S>,
    global_batch: NodeId,
    head: &HeadParams<S>,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if head.config.segmentation.is_some() {
        return Err(Error::InvalidArgument(
            "classify called on a segmentation head".into(),
        ));
    }
    head.mlp(tape, global_batch, phase, rng)
}

/// Inverse-distance weights over the three nearest anchors for every query
/// point. A query coincident with an anchor degenerates to weight one on
/// that anchor exactly.
pub fn interpolation_weights<S: Scalar>(
    anchors: &[[f64; 3]],
    queries: &[[f64; 3]],
) -> (Vec<[usize; 3]>, Vec<[S; 3]>) {
    let take = anchors.len().min(3);
    let mut indices = Vec::with_capacity(queries.len());
    let mut weights = Vec::with_capacity(queries.len());
    for &q in queries {
        let near = k_nearest(anchors, q, take);
        let mut idx = [near[0].0; 3];
        let mut w = [0.0f64; 3];
        if near[0].1 == 0.0 {
            w[0] = 1.0;
        } else {
            let mut total = 0.0;
            for (t, &(_, d2)) in near.iter().enumerate() {
                w[t] = 1.0 / (d2.sqrt() + INTERPOLATION_EPSILON);
                total += w[t];
            }
            for v in w.iter_mut() {
                *v /= total;
            }
        }
        for (t, &(i, _)) in near.iter().enumerate() {
            idx[t] = i;
        }
        indices.push(idx);
        weights.push([
            S::from_f64(w[0]),
            S::from_f64(w[1]),
            S::from_f64(w[2]),
        ]);
    }
    (indices, weights)
}

/// Per-point part logits for a whole mini-batch of clouds, stacked in cloud
/// order (`sum(N_b) x part_classes`).
///
/// Each level of the batched backbone output is propagated to every sample's
/// input points, the per-sample global vector and (when configured) the
/// object one-hot are broadcast per point, and the union goes through the
/// per-point MLP blocks, so batch statistics cover the whole mini-batch.
pub fn segment_batch<S: Scalar>(
    tape: &mut Tape<S>,
    levels: &[BatchLevel],
    globals: NodeId,
    clouds: &[&crate::geometry::PointCloud],
    head: &HeadParams<S>,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let seg_cfg = head.config.segmentation.ok_or_else(|| {
        Error::InvalidArgument("segment called on a classification head".into())
    })?;
    if levels.is_empty() {
        return Err(Error::InvalidArgument("segment needs per-level features".into()));
    }
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("segment needs at least one cloud".into()));
    }
    if tape.value(globals).rows() != clouds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} global rows for {} clouds",
            tape.value(globals).rows(),
            clouds.len()
        )));
    }
    let total_points: usize = clouds.iter().map(|c| c.len()).sum();

    let mut columns = Vec::with_capacity(levels.len() + 2);
    for level in levels {
        if level.anchors.len() != clouds.len() {
            return Err(Error::InvalidArgument(format!(
                "level {} anchors missing for some samples",
                level.level
            )));
        }
        for (b, a) in level.anchors.iter().enumerate() {
            let span = level.sample_rows(b);
            if span.len() != a.len() || span.end > tape.value(level.features).rows() {
                return Err(Error::InvalidArgument(format!(
                    "level {} anchors do not line up with its feature rows",
                    level.level
                )));
            }
        }
        // Per-sample 3-NN interpolation, with indices offset into the
        // batched level matrix.
        let mut indices = Vec::with_capacity(total_points);
        let mut weights = Vec::with_capacity(total_points);
        for (b, cloud) in clouds.iter().enumerate() {
            let base = level.sample_rows(b).start;
            let (idx, w) = interpolation_weights::<S>(&level.anchors[b], cloud.points());
            indices.extend(idx.into_iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
            weights.extend(w);
        }
        columns.push(tape.interpolate_rows(level.features, indices, weights)?);
    }

    // Broadcast each sample's global vector to its points.
    let mut global_rows = Vec::with_capacity(total_points);
    for (b, cloud) in clouds.iter().enumerate() {
        global_rows.extend(std::iter::repeat(b).take(cloud.len()));
    }
    columns.push(tape.gather_rows(globals, global_rows)?);

    if seg_cfg.condition_on_class {
        let mut onehot = DenseMatrix::zeros(total_points, seg_cfg.object_classes);
        let mut at = 0;
        for cloud in clouds {
            let class = cloud.class_label.ok_or_else(|| {
                Error::InvalidArgument("segmentation head expects an object class".into())
            })? as usize;
            if class >= seg_cfg.object_classes {
                return Err(Error::InvalidArgument(format!(
                    "object class {class} out of range for {} categories",
                    seg_cfg.object_classes
                )));
            }
            for _ in 0..cloud.len() {
                onehot.set(at, class, S::one());
                at += 1;
            }
        }
        columns.push(tape.input(onehot));
    }

    let x = tape.concat_cols(&columns)?;
    head.mlp(tape, x, phase, rng)
}

/// Per-point part logits (`N x part_classes`) for one cloud.
///
/// `per_level` comes straight from the backbone; each level is propagated to
/// the `query_coords` resolution, concatenated with the broadcast global
/// vector and (when configured) the object one-hot, and pushed through the
/// per-point MLP blocks.
pub fn segment<S: Scalar>(
    tape: &mut Tape<S>,
    per_level: &[PointFeatureMatrix],
    global: NodeId,
    query_coords: &[[f64; 3]],
    object_class: Option<usize>,
    head: &HeadParams<S>,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let levels: Vec<BatchLevel> = per_level
        .iter()
        .map(|l| BatchLevel {
            features: l.features,
            spans: vec![(0, l.anchors.len())],
            anchors: vec![l.anchors.clone()],
            level: l.level,
        })
        .collect();
    let mut cloud = crate::geometry::PointCloud::new(query_coords.to_vec())?;
    if let Some(c) = object_class {
        cloud = cloud.with_class(c as u32);
    }
    segment_batch(tape, &levels, global, &[&cloud], head, phase, rng)
}
