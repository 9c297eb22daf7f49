//! The feature-learning pipeline: a stem lifts raw coordinates to features,
//! `m` residual blocks each sample keypoints, group neighbors, normalize the
//! grouped offsets, and run shared MLPs with residual connections, producing
//! point features of a reduced length per level. Each level is pooled to a
//! fixed number of rows, the pooled levels are stacked, and a final pooling
//! over the stack yields one global feature vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, geometric_affine, knn_group, PointCloud, GEOMETRIC_AFFINE_EPSILON};
use crate::pooling::{learnable_pool, max_pool, LearnablePoolingParams};
use crate::tensor::{
    BatchNormState, DenseMatrix, NodeId, Parameter, Parameters, Phase, Scalar, Tape,
};

/// The ablation toggles. All three on is the full architecture.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AblationFlags {
    /// Stack features from every resolution level; off means the head sees
    /// only the pooled deepest level.
    pub multi_resolution: bool,
    /// Pool each level with learnable pooling instead of max pooling.
    pub single_res_lp: bool,
    /// Pool the stacked levels with learnable pooling instead of max pooling.
    pub multi_res_lp: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            multi_resolution: true,
            single_res_lp: true,
            multi_res_lp: true,
        }
    }
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!(
            "multi-res={} single-lp={} multi-lp={}",
            mark(self.multi_resolution),
            mark(self.single_res_lp),
            mark(self.multi_res_lp)
        )
    }
}

/// Point count, channel width, and neighborhood size of one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub points: usize,
    pub channels: usize,
    pub neighbors: usize,
}

/// Shape schedule and pooling layout of the whole backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Fixed row count of every single-resolution pool.
    pub single_res_queries: usize,
    /// Channel width the single-resolution pools project to.
    pub single_res_dim: usize,
    /// Width of the global feature vector under learnable multi-resolution
    /// pooling (the multi-res query is `1 x multi_res_dim`).
    pub multi_res_dim: usize,
    pub attention_heads: usize,
    pub flags: AblationFlags,
}

impl BackboneConfig {
    /// The reference classification layout: 1024 input points, four blocks,
    /// single-resolution queries `64 x 1024`, multi-resolution query
    /// `1 x 4096`.
    pub fn full_scale_classification() -> Self {
        BackboneConfig {
            stem_channels: 64,
            stages: vec![
                StageConfig { points: 512, channels: 128, neighbors: 24 },
                StageConfig { points: 256, channels: 256, neighbors: 24 },
                StageConfig { points: 128, channels: 512, neighbors: 24 },
                StageConfig { points: 64, channels: 1024, neighbors: 24 },
            ],
            single_res_queries: 64,
            single_res_dim: 1024,
            multi_res_dim: 4096,
            attention_heads: 4,
            flags: AblationFlags::default(),
        }
    }

    /// A small schedule that trains in seconds on one CPU core; used by the
    /// synthetic benchmarks and most tests.
    pub fn desk_scale(input_points: usize) -> Self {
        let p = input_points;
        BackboneConfig {
            stem_channels: 8,
            stages: vec![
                StageConfig { points: p / 2, channels: 16, neighbors: 8 },
                StageConfig { points: p / 4, channels: 32, neighbors: 8 },
                StageConfig { points: p / 8, channels: 64, neighbors: 8 },
                StageConfig { points: p / 16, channels: 128, neighbors: 8 },
            ],
            single_res_queries: 8,
            single_res_dim: 128,
            multi_res_dim: 128,
            attention_heads: 4,
            flags: AblationFlags::default(),
        }
    }

    pub fn block_count(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one stage".into()));
        }
        let mut prev_points = usize::MAX;
        let mut prev_channels = 0usize;
        for (i, s) in self.stages.iter().enumerate() {
            if s.points == 0 || s.channels == 0 || s.neighbors == 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage {i} has a zero entry in its schedule"
                )));
            }
            if s.points >= prev_points {
                return Err(Error::InvalidArgument(
                    "stage point counts must be strictly decreasing".into(),
                ));
            }
            if s.channels < prev_channels {
                return Err(Error::InvalidArgument(
                    "stage channel widths must be non-decreasing".into(),
                ));
            }
            prev_points = s.points;
            prev_channels = s.channels;
        }
        if self.single_res_queries == 0 {
            return Err(Error::InvalidArgument("single_res_queries must be positive".into()));
        }
        if self.attention_heads == 0
            || self.single_res_dim % self.attention_heads != 0
            || self.multi_res_dim % self.attention_heads != 0
        {
            return Err(Error::InvalidArgument(
                "pooling widths must be divisible by the attention head count".into(),
            ));
        }
        let f = self.flags;
        if !f.multi_resolution && (f.single_res_lp || f.multi_res_lp) {
            return Err(Error::InvalidArgument(
                "per-level and stacked pooling choices require multi-resolution features".into(),
            ));
        }
        Ok(())
    }

    /// Width of the global feature vector the head consumes.
    pub fn head_input_dim(&self) -> usize {
        if !self.flags.multi_resolution {
            self.stages.last().expect("validated").channels
        } else if self.flags.multi_res_lp {
            self.multi_res_dim
        } else {
            self.single_res_dim
        }
    }
}

/// Linear projection (no bias) into batch norm; the shared MLP unit.
pub struct LinearBn<S> {
    pub weight: Parameter<S>,
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
    pub bn_state: BatchNormState<S>,
}

impl<S: Scalar> LinearBn<S> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        LinearBn {
            weight: Parameter::new(DenseMatrix::rand_uniform(in_dim, out_dim, limit, rng)),
            gamma: Parameter::new(DenseMatrix::filled(1, out_dim, S::one())),
            beta: Parameter::new(DenseMatrix::zeros(1, out_dim)),
            bn_state: BatchNormState::new(out_dim),
        }
    }

    pub fn register_into(&self, params: &mut Parameters<S>, prefix: &str) {
        params.register(format!("{prefix}.weight"), &self.weight);
        params.register(format!("{prefix}.bn.gamma"), &self.gamma);
        params.register(format!("{prefix}.bn.beta"), &self.beta);
        params.register(format!("{prefix}.bn.running_mean"), &self.bn_state.running_mean);
        params.register(format!("{prefix}.bn.running_var"), &self.bn_state.running_var);
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: NodeId, phase: Phase) -> Result<NodeId> {
        let y = tape.linear(x, &self.weight, None)?;
        let y = tape.batch_norm(y, &self.gamma, &self.beta, &self.bn_state, phase)?;
        Ok(tape.relu(y))
    }

    fn forward_no_relu(&self, tape: &mut Tape<S>, x: NodeId, phase: Phase) -> Result<NodeId> {
        let y = tape.linear(x, &self.weight, None)?;
        tape.batch_norm(y, &self.gamma, &self.beta, &self.bn_state, phase)
    }
}

/// Two shared-MLP units with a skip connection:
/// `relu(x + bn2(w2 relu(bn1(w1 x))))`.
pub struct ResidualMlp<S> {
    pub first: LinearBn<S>,
    pub second: LinearBn<S>,
}

impl<S: Scalar> ResidualMlp<S> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        ResidualMlp {
            first: LinearBn::new(dim, dim, rng),
            second: LinearBn::new(dim, dim, rng),
        }
    }

    pub fn register_into(&self, params: &mut Parameters<S>, prefix: &str) {
        self.first.register_into(params, &format!("{prefix}.mlp1"));
        self.second.register_into(params, &format!("{prefix}.mlp2"));
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: NodeId, phase: Phase) -> Result<NodeId> {
        let h = self.first.forward(tape, x, phase)?;
        let h = self.second.forward_no_relu(tape, h, phase)?;
        let sum = tape.add(x, h)?;
        Ok(tape.relu(sum))
    }
}

/// Parameters of one residual block.
pub struct ResidualStageParams<S> {
    pub affine_alpha: Parameter<S>,
    pub affine_beta: Parameter<S>,
    pub embed: LinearBn<S>,
    pub pre: ResidualMlp<S>,
    pub post: ResidualMlp<S>,
}

impl<S: Scalar> ResidualStageParams<S> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        ResidualStageParams {
            affine_alpha: Parameter::new(DenseMatrix::filled(1, in_channels, S::one())),
            affine_beta: Parameter::new(DenseMatrix::zeros(1, in_channels)),
            embed: LinearBn::new(in_channels, out_channels, rng),
            pre: ResidualMlp::new(out_channels, rng),
            post: ResidualMlp::new(out_channels, rng),
        }
    }

    pub fn register_into(&self, params: &mut Parameters<S>, prefix: &str) {
        params.register(format!("{prefix}.affine_alpha"), &self.affine_alpha);
        params.register(format!("{prefix}.affine_beta"), &self.affine_beta);
        self.embed.register_into(params, &format!("{prefix}.embed"));
        self.pre.register_into(params, &format!("{prefix}.pre"));
        self.post.register_into(params, &format!("{prefix}.post"));
    }
}

/// All backbone parameters. The `single_max_proj` projections exist only in
/// the max-pool ablation variant, where levels still need a common width
/// before their global vectors can be stacked.
pub struct BackboneParams<S> {
    pub stem: LinearBn<S>,
    pub stages: Vec<ResidualStageParams<S>>,
    pub single_lp: Vec<LearnablePoolingParams<S>>,
    pub single_max_proj: Vec<Parameter<S>>,
    pub multi_lp: Option<LearnablePoolingParams<S>>,
}

impl<S: Scalar> BackboneParams<S> {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stem = LinearBn::new(3, cfg.stem_channels, rng);
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut in_ch = cfg.stem_channels;
        for s in &cfg.stages {
            stages.push(ResidualStageParams::new(in_ch, s.channels, rng));
            in_ch = s.channels;
        }

        let mut single_lp = Vec::new();
        let mut single_max_proj = Vec::new();
        if cfg.flags.multi_resolution {
            for s in &cfg.stages {
                if cfg.flags.single_res_lp {
                    single_lp.push(LearnablePoolingParams::new(
                        cfg.single_res_queries,
                        s.channels,
                        cfg.single_res_dim,
                        cfg.attention_heads,
                        rng,
                    )?);
                } else {
                    let limit = (6.0 / (s.channels + cfg.single_res_dim) as f64).sqrt();
                    single_max_proj.push(Parameter::new(DenseMatrix::rand_uniform(
                        s.channels,
                        cfg.single_res_dim,
                        limit,
                        rng,
                    )));
                }
            }
        }
        let multi_lp = if cfg.flags.multi_resolution && cfg.flags.multi_res_lp {
            Some(LearnablePoolingParams::new(
                1,
                cfg.single_res_dim,
                cfg.multi_res_dim,
                cfg.attention_heads,
                rng,
            )?)
        } else {
            None
        };
        Ok(BackboneParams {
            stem,
            stages,
            single_lp,
            single_max_proj,
            multi_lp,
        })
    }

    pub fn register_into(&self, params: &mut Parameters<S>, prefix: &str) {
        self.stem.register_into(params, &format!("{prefix}.stem"));
        for (i, s) in self.stages.iter().enumerate() {
            s.register_into(params, &format!("{prefix}.stage{i}"));
        }
        for (i, lp) in self.single_lp.iter().enumerate() {
            lp.register_into(params, &format!("{prefix}.single_lp{i}"));
        }
        for (i, p) in self.single_max_proj.iter().enumerate() {
            params.register(format!("{prefix}.single_max_proj{i}"), p);
        }
        if let Some(lp) = &self.multi_lp {
            lp.register_into(params, &format!("{prefix}.multi_lp"));
        }
    }
}

/// Features of one resolution level: an `N_i x C_i` node on the tape plus
/// the coordinates the rows are anchored at.
#[derive(Clone, Debug)]
pub struct PointFeatureMatrix {
    pub features: NodeId,
    pub anchors: Vec<[f64; 3]>,
    pub level: usize,
}

/// Everything the heads need: the global vector, the per-level features with
/// anchors, and (when stacking is enabled) the per-level pooled summaries.
pub struct BackboneOutput {
    pub global: NodeId,
    pub per_level: Vec<PointFeatureMatrix>,
    pub pooled_per_level: Vec<NodeId>,
}

/// One resolution level of a whole mini-batch: the row-concatenated feature
/// blocks of every sample plus each sample's anchor coordinates.
///
/// Sample `b` occupies rows `spans[b].0 .. spans[b].0 + spans[b].1`.
#[derive(Clone, Debug)]
pub struct BatchLevel {
    pub features: NodeId,
    pub spans: Vec<(usize, usize)>,
    pub anchors: Vec<Vec<[f64; 3]>>,
    pub level: usize,
}

impl BatchLevel {
    pub fn sample_rows(&self, b: usize) -> std::ops::Range<usize> {
        let (start, rows) = self.spans[b];
        start..start + rows
    }
}

/// Batched backbone result: one global feature row per sample, plus every
/// level's batched features.
pub struct BatchBackboneOutput {
    /// `B x head_input_dim`.
    pub globals: NodeId,
    pub levels: Vec<BatchLevel>,
    /// Per sample, per level pooled summaries (empty when stacking is off).
    pub pooled: Vec<Vec<NodeId>>,
}

/// One residual block: FPS keypoints, kNN grouping, geometric affine
/// normalization, shared pre-MLP, per-group max aggregation, shared post-MLP.
pub fn residual_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    coords: &[[f64; 3]],
    stage_cfg: &StageConfig,
    stage: &ResidualStageParams<S>,
    phase: Phase,
) -> Result<(NodeId, Vec<[f64; 3]>)> {
    if stage_cfg.points > coords.len() {
        return Err(Error::InvalidArgument(format!(
            "stage asks for {} points but only {} are available",
            stage_cfg.points,
            coords.len()
        )));
    }
    let cloud = PointCloud::new(coords.to_vec())?;
    let keypoints = farthest_point_sample(&cloud, stage_cfg.points)?;
    let groups = knn_group(&cloud, &keypoints, stage_cfg.neighbors)?;

    let kp_feats = tape.gather_rows(features, keypoints.clone())?;
    let grouped = tape.gather_rows(features, groups.flat_neighbor_indices().to_vec())?;
    let normalized = geometric_affine(
        tape,
        grouped,
        kp_feats,
        &stage.affine_alpha,
        &stage.affine_beta,
        stage_cfg.neighbors,
    )?;

    let x = stage.embed.forward(tape, normalized, phase)?;
    let x = stage.pre.forward(tape, x, phase)?;
    let aggregated = tape.max_pool_rows(x, stage_cfg.points)?;
    let out = stage.post.forward(tape, aggregated, phase)?;

    let anchors = keypoints.iter().map(|&i| coords[i]).collect();
    Ok((out, anchors))
}

/// Pool one resolution level to a fixed `n_queries x d_model` summary.
pub fn single_resolution_pool<S: Scalar>(
    tape: &mut Tape<S>,
    level: &PointFeatureMatrix,
    lp: &LearnablePoolingParams<S>,
) -> Result<NodeId> {
    learnable_pool(tape, level.features, lp)
}

/// Stack the per-level summaries (level order) and pool them into the global
/// feature vector.
pub fn stack_and_pool<S: Scalar>(
    tape: &mut Tape<S>,
    pooled: &[NodeId],
    multi_lp: &LearnablePoolingParams<S>,
) -> Result<NodeId> {
    if pooled.is_empty() {
        return Err(Error::InvalidArgument("no pooled levels to stack".into()));
    }
    let stacked = tape.concat_rows(pooled)?;
    learnable_pool(tape, stacked, multi_lp)
}

/// Run the backbone on a whole mini-batch at once.
///
/// Every stage operates on the row-concatenated blocks of all samples, so
/// train-mode batch statistics (batch norm, the geometric affine spread) are
/// taken over the batch union, and the running statistics used at eval time
/// describe the same distribution. Keypoint sampling and grouping stay
/// strictly within each sample.
pub fn backbone_forward_batch<S: Scalar>(
    tape: &mut Tape<S>,
    clouds: &[&PointCloud],
    cfg: &BackboneConfig,
    params: &BackboneParams<S>,
    phase: Phase,
) -> Result<BatchBackboneOutput> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for cloud in clouds {
        if cloud.len() < cfg.stages[0].points {
            return Err(Error::InvalidArgument(format!(
                "cloud of {} points is smaller than the first stage output {}",
                cloud.len(),
                cfg.stages[0].points
            )));
        }
    }
    let batch = clouds.len();

    // Stem over the union of all points.
    let total: usize = clouds.iter().map(|c| c.len()).sum();
    let mut coords_matrix = DenseMatrix::<S>::zeros(total, 3);
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(batch);
    let mut at = 0;
    for cloud in clouds {
        for (r, p) in cloud.points().iter().enumerate() {
            for (c, &v) in p.iter().enumerate() {
                coords_matrix.set(at + r, c, S::from_f64(v));
            }
        }
        spans.push((at, cloud.len()));
        at += cloud.len();
    }
    let coords_node = tape.input(coords_matrix);
    let mut features = params.stem.forward(tape, coords_node, phase)?;
    let mut sample_coords: Vec<Vec<[f64; 3]>> =
        clouds.iter().map(|c| c.points().to_vec()).collect();

    let mut levels: Vec<BatchLevel> = Vec::with_capacity(cfg.stages.len());
    for (i, (stage_cfg, stage)) in cfg.stages.iter().zip(&params.stages).enumerate() {
        let s = stage_cfg.points;
        let k = stage_cfg.neighbors;
        // The geometric affine spread is per sample (each sample's group
        // tensor is its own normalization scope), so a cloud is normalized
        // the same way alone at inference and inside a training batch.
        let mut normalized_blocks = Vec::with_capacity(batch);
        let mut next_coords = Vec::with_capacity(batch);
        for (b, coords) in sample_coords.iter().enumerate() {
            let cloud = PointCloud::new(coords.clone())?;
            let keypoints = farthest_point_sample(&cloud, s)?;
            let groups = knn_group(&cloud, &keypoints, k)?;
            let base = spans[b].0;
            let kp_gather: Vec<usize> = keypoints.iter().map(|&idx| base + idx).collect();
            let group_gather: Vec<usize> = groups
                .flat_neighbor_indices()
                .iter()
                .map(|&idx| base + idx)
                .collect();
            let kp_feats = tape.gather_rows(features, kp_gather)?;
            let grouped = tape.gather_rows(features, group_gather)?;
            let expanded = tape.repeat_interleave_rows(kp_feats, k)?;
            let offsets = tape.sub(grouped, expanded)?;
            normalized_blocks.push(
                tape.normalize_global_std(offsets, S::from_f64(GEOMETRIC_AFFINE_EPSILON)),
            );
            next_coords.push(keypoints.iter().map(|&idx| coords[idx]).collect::<Vec<_>>());
        }

        let normalized_union = tape.concat_rows(&normalized_blocks)?;
        let rescaled =
            tape.channel_affine(normalized_union, &stage.affine_alpha, &stage.affine_beta)?;
        let x = stage.embed.forward(tape, rescaled, phase)?;
        let x = stage.pre.forward(tape, x, phase)?;
        let aggregated = tape.max_pool_rows(x, batch * s)?;
        features = stage.post.forward(tape, aggregated, phase)?;

        sample_coords = next_coords;
        spans = (0..batch).map(|b| (b * s, s)).collect();
        levels.push(BatchLevel {
            features,
            spans: spans.clone(),
            anchors: sample_coords.clone(),
            level: i + 1,
        });
    }

    // Pool each sample's blocks to the per-sample global vector.
    let mut pooled: Vec<Vec<NodeId>> = vec![Vec::new(); batch];
    let mut globals = Vec::with_capacity(batch);
    if !cfg.flags.multi_resolution {
        let deepest = levels.last().expect("at least one stage");
        for b in 0..batch {
            let rows = tape.gather_rows(deepest.features, deepest.sample_rows(b).collect())?;
            globals.push(max_pool(tape, rows, 1)?);
        }
    } else {
        for b in 0..batch {
            let mut sample_pooled = Vec::with_capacity(levels.len());
            for (i, level) in levels.iter().enumerate() {
                let rows = tape.gather_rows(level.features, level.sample_rows(b).collect())?;
                let p = if cfg.flags.single_res_lp {
                    learnable_pool(tape, rows, &params.single_lp[i])?
                } else {
                    let projected = tape.linear(rows, &params.single_max_proj[i], None)?;
                    let global = max_pool(tape, projected, 1)?;
                    tape.repeat_rows(global, cfg.single_res_queries)?
                };
                sample_pooled.push(p);
            }
            let global = if cfg.flags.multi_res_lp {
                stack_and_pool(
                    tape,
                    &sample_pooled,
                    params.multi_lp.as_ref().expect("validated"),
                )?
            } else {
                let stacked = tape.concat_rows(&sample_pooled)?;
                max_pool(tape, stacked, 1)?
            };
            pooled[b] = sample_pooled;
            globals.push(global);
        }
    }

    Ok(BatchBackboneOutput {
        globals: tape.concat_rows(&globals)?,
        levels,
        pooled,
    })
}

/// Run the full backbone on one cloud.
pub fn backbone_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cloud: &PointCloud,
    cfg: &BackboneConfig,
    params: &BackboneParams<S>,
    phase: Phase,
) -> Result<BackboneOutput> {
    let batch = backbone_forward_batch(tape, &[cloud], cfg, params, phase)?;
    let per_level = batch
        .levels
        .into_iter()
        .map(|l| PointFeatureMatrix {
            features: l.features,
            anchors: l.anchors.into_iter().next().expect("one sample"),
            level: l.level,
        })
        .collect();
    Ok(BackboneOutput {
        global: batch.globals,
        per_level,
        pooled_per_level: batch.pooled.into_iter().next().expect("one sample"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 4,
            stages: vec![
                StageConfig { points: 16, channels: 8, neighbors: 4 },
                StageConfig { points: 8, channels: 12, neighbors: 4 },
            ],
            single_res_queries: 3,
            single_res_dim: 8,
            multi_res_dim: 16,
            attention_heads: 2,
            flags: AblationFlags::default(),
        }
    }

    #[test]
    fn config_validation_catches_bad_schedules() {
        let mut cfg = tiny_config();
        cfg.stages[1].points = 16;
        assert!(cfg.validate().is_err(), "non-decreasing points");

        let mut cfg = tiny_config();
        cfg.stages[1].channels = 4;
        assert!(cfg.validate().is_err(), "shrinking channels");

        let mut cfg = tiny_config();
        cfg.flags = AblationFlags {
            multi_resolution: false,
            single_res_lp: true,
            multi_res_lp: false,
        };
        assert!(cfg.validate().is_err(), "LP without stacking");
    }

    #[test]
    fn forward_shapes_follow_the_schedule() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = BackboneParams::<f32>::new(&cfg, &mut rng).unwrap();
        let cloud = random_cloud(32, 1);
        let mut tape = Tape::new();
        let out = backbone_forward(&mut tape, &cloud, &cfg, &params, Phase::Eval).unwrap();

        assert_eq!(out.per_level.len(), 2);
        assert_eq!(tape.value(out.per_level[0].features).shape(), (16, 8));
        assert_eq!(tape.value(out.per_level[1].features).shape(), (8, 12));
        assert_eq!(out.per_level[0].anchors.len(), 16);
        for p in &out.pooled_per_level {
            assert_eq!(tape.value(*p).shape(), (3, 8));
        }
        assert_eq!(tape.value(out.global).shape(), (1, 16));

        // Resolution monotonicity along the returned levels.
        let mut prev = usize::MAX;
        for l in &out.per_level {
            let n = tape.value(l.features).rows();
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn forward_rejects_undersized_clouds() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = BackboneParams::<f32>::new(&cfg, &mut rng).unwrap();
        let cloud = random_cloud(8, 1);
        let mut tape = Tape::new();
        assert!(backbone_forward(&mut tape, &cloud, &cfg, &params, Phase::Eval).is_err());
    }

    #[test]
    fn degenerate_cloud_of_identical_points_stays_finite() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = BackboneParams::<f32>::new(&cfg, &mut rng).unwrap();
        let cloud = PointCloud::new(vec![[0.25, -0.5, 1.0]; 32]).unwrap();
        let mut tape = Tape::new();
        let out = backbone_forward(&mut tape, &cloud, &cfg, &params, Phase::Eval).unwrap();
        assert!(tape.value(out.global).all_finite());
        for l in &out.per_level {
            assert!(tape.value(l.features).all_finite());
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = BackboneParams::<f32>::new(&cfg, &mut rng).unwrap();
        let cloud = random_cloud(32, 2);

        let mut t1 = Tape::new();
        let o1 = backbone_forward(&mut t1, &cloud, &cfg, &params, Phase::Eval).unwrap();
        let mut t2 = Tape::new();
        let o2 = backbone_forward(&mut t2, &cloud, &cfg, &params, Phase::Eval).unwrap();
        assert_eq!(t1.value(o1.global), t2.value(o2.global), "bit-identical");
    }

    #[test]
    fn single_resolution_pool_fixes_the_row_count() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = LearnablePoolingParams::<f64>::new(
            cfg.single_res_queries,
            5,
            cfg.single_res_dim,
            cfg.attention_heads,
            &mut rng,
        )
        .unwrap();
        for rows in [1usize, 7, 64, 512] {
            let mut tape = Tape::new();
            let f = tape.input(DenseMatrix::randn(rows, 5, 1.0, &mut rng));
            let level = PointFeatureMatrix {
                features: f,
                anchors: vec![[0.0; 3]; rows],
                level: 1,
            };
            let out = single_resolution_pool(&mut tape, &level, &lp).unwrap();
            assert_eq!(tape.value(out).shape(), (cfg.single_res_queries, cfg.single_res_dim));
        }
    }

    #[test]
    fn multi_res_off_equals_deepest_level_max() {
        let mut cfg = tiny_config();
        cfg.flags = AblationFlags {
            multi_resolution: false,
            single_res_lp: false,
            multi_res_lp: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BackboneParams::<f32>::new(&cfg, &mut rng).unwrap();
        let cloud = random_cloud(32, 5);
        let mut tape = Tape::new();
        let out = backbone_forward(&mut tape, &cloud, &cfg, &params, Phase::Eval).unwrap();
        assert_eq!(tape.value(out.global).shape(), (1, 12));
        assert!(out.pooled_per_level.is_empty());

        // The head input is the column max of the deepest level, exactly.
        let deepest = tape.value(out.per_level.last().unwrap().features).clone();
        let global = tape.value(out.global);
        for c in 0..deepest.cols() {
            let expect = (0..deepest.rows())
                .map(|r| deepest.get(r, c))
                .fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(global.get(0, c), expect);
        }
    }

    #[test]
    fn max_pool_variant_stacks_repeated_global_vectors() {
        let mut cfg = tiny_config();
        cfg.flags = AblationFlags {
            multi_resolution: true,
            single_res_lp: false,
            multi_res_lp: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = BackboneParams::<f32>::new(&cfg, &mut rng).unwrap();
        assert_eq!(params.single_max_proj.len(), 2);
        let cloud = random_cloud(32, 7);
        let mut tape = Tape::new();
        let out = backbone_forward(&mut tape, &cloud, &cfg, &params, Phase::Eval).unwrap();
        assert_eq!(tape.value(out.global).shape(), (1, cfg.single_res_dim));

        // Each pooled level is one global vector repeated to the fixed length,
        // and the final global is the column max of those vectors.
        for p in &out.pooled_per_level {
            let m = tape.value(*p);
            assert_eq!(m.shape(), (cfg.single_res_queries, cfg.single_res_dim));
            for r in 1..m.rows() {
                assert_eq!(m.row(r), m.row(0));
            }
        }
        let global = tape.value(out.global);
        for c in 0..cfg.single_res_dim {
            let expect = out
                .pooled_per_level
                .iter()
                .map(|&p| tape.value(p).get(0, c))
                .fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(global.get(0, c), expect);
        }
    }

    #[test]
    fn permuted_input_pools_to_the_same_summary() {
        use crate::geometry::{apply_permutation, Permutation};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lp = LearnablePoolingParams::<f32>::new(4, 6, 8, 2, &mut rng).unwrap();
        let f = DenseMatrix::<f32>::randn(30, 6, 1.0, &mut rng);
        let p = Permutation::random(30, &mut rng);

        let mut t1 = Tape::new();
        let a = t1.input(f.clone());
        let l1 = PointFeatureMatrix { features: a, anchors: vec![[0.0; 3]; 30], level: 1 };
        let o1 = single_resolution_pool(&mut t1, &l1, &lp).unwrap();

        let mut t2 = Tape::new();
        let b = t2.input(apply_permutation(&f, &p).unwrap());
        let l2 = PointFeatureMatrix { features: b, anchors: vec![[0.0; 3]; 30], level: 1 };
        let o2 = single_resolution_pool(&mut t2, &l2, &lp).unwrap();

        assert!(t1.value(o1).max_abs_diff(t2.value(o2)).unwrap() <= 1e-5);
    }
}
