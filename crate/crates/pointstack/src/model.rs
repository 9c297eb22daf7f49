//! The assembled network: backbone, task head, and the parameter registry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backbone_forward, backbone_forward_batch, BackboneConfig, BackboneOutput, BackboneParams,
    BatchBackboneOutput,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::heads::{classify, segment_batch, HeadConfig, HeadParams};
use crate::tensor::{DenseMatrix, NodeId, Parameters, Phase, Scalar, Tape};

/// Complete architecture description; everything needed to rebuild the
/// parameter tensors from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()
    }

    pub fn is_segmentation(&self) -> bool {
        self.head.segmentation.is_some()
    }
}

/// Backbone plus head with a name-addressed registry of every tensor.
pub struct PointStackModel<S: Scalar> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<S>,
    pub head: HeadParams<S>,
    pub params: Parameters<S>,
    /// Seed the parameters were initialized from; echoed into checkpoints.
    pub init_seed: u64,
}

impl<S: Scalar> PointStackModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneParams::new(&config.backbone, &mut rng)?;
        let mut head_input = config.backbone.head_input_dim();
        if config.is_segmentation() {
            // Per-point input: every propagated level + broadcast global +
            // optional object one-hot.
            let level_channels: usize = config.backbone.stages.iter().map(|s| s.channels).sum();
            head_input = level_channels + config.backbone.head_input_dim();
            if let Some(seg) = &config.head.segmentation {
                if seg.condition_on_class {
                    head_input += seg.object_classes;
                }
            }
        }
        let head = HeadParams::new(head_input, config.head.clone(), &mut rng)?;

        let mut params = Parameters::new();
        backbone.register_into(&mut params, "backbone");
        head.register_into(&mut params, "head");

        Ok(PointStackModel {
            config,
            backbone,
            head,
            params,
            init_seed: seed,
        })
    }

    pub fn backbone_forward(
        &self,
        tape: &mut Tape<S>,
        cloud: &PointCloud,
        phase: Phase,
    ) -> Result<BackboneOutput> {
        backbone_forward(tape, cloud, &self.config.backbone, &self.backbone, phase)
    }

    pub fn backbone_forward_batch(
        &self,
        tape: &mut Tape<S>,
        clouds: &[&PointCloud],
        phase: Phase,
    ) -> Result<BatchBackboneOutput> {
        backbone_forward_batch(tape, clouds, &self.config.backbone, &self.backbone, phase)
    }

    /// Class logits for a mini-batch (`batch x classes`). The whole batch
    /// runs jointly, so train-mode batch statistics cover every sample.
    pub fn classify_batch(
        &self,
        tape: &mut Tape<S>,
        clouds: &[&PointCloud],
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if clouds.is_empty() {
            return Err(Error::InvalidArgument("empty classification batch".into()));
        }
        let out = self.backbone_forward_batch(tape, clouds, phase)?;
        classify(tape, out.globals, &self.head, phase, rng)
    }

    /// Per-point part logits for a mini-batch, rows stacked in cloud order
    /// (`sum(N_b) x part_classes`).
    pub fn segment_batch(
        &self,
        tape: &mut Tape<S>,
        clouds: &[&PointCloud],
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let out = self.backbone_forward_batch(tape, clouds, phase)?;
        segment_batch(tape, &out.levels, out.globals, clouds, &self.head, phase, rng)
    }

    /// Per-point part logits for one cloud (`N x part_classes`).
    pub fn segment_cloud(
        &self,
        tape: &mut Tape<S>,
        cloud: &PointCloud,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        self.segment_batch(tape, &[cloud], phase, rng)
    }

    /// Eval-mode class logits, one row per cloud.
    pub fn predict_logits(&self, clouds: &[&PointCloud]) -> Result<DenseMatrix<S>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.classify_batch(&mut tape, clouds, Phase::Eval, &mut rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode per-point part logits for one cloud.
    pub fn predict_segment_logits(&self, cloud: &PointCloud) -> Result<DenseMatrix<S>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.segment_cloud(&mut tape, cloud, Phase::Eval, &mut rng)?;
        Ok(tape.value(logits).clone())
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<S: Scalar>(logits: &DenseMatrix<S>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AblationFlags, StageConfig};
    use crate::geometry::Permutation;
    use rand::Rng;

    pub(crate) fn tiny_cls_config(classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
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
            },
            head: HeadConfig::classification(vec![8], classes),
        }
    }

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

    #[test]
    fn registry_names_are_unique_and_cover_the_model() {
        let model = PointStackModel::<f32>::new(tiny_cls_config(4), 7).unwrap();
        let mut names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(before, names.len(), "duplicate parameter names");
        assert!(model.params.get("backbone.stem.weight").is_some());
        assert!(model.params.get("head.out.bias").is_some());
        assert!(model.params.trainable_count() > 0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = PointStackModel::<f32>::new(tiny_cls_config(4), 3).unwrap();
        let b = PointStackModel::<f32>::new(tiny_cls_config(4), 3).unwrap();
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(*pa.value(), *pb.value());
        }
    }

    #[test]
    fn classification_logit_shape() {
        let model = PointStackModel::<f32>::new(tiny_cls_config(15), 1).unwrap();
        let clouds: Vec<PointCloud> = (0..3).map(|i| random_cloud(32, i)).collect();
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let logits = model.predict_logits(&refs).unwrap();
        assert_eq!(logits.shape(), (3, 15));
    }

    #[test]
    fn permuted_points_give_identical_logits() {
        let model = PointStackModel::<f32>::new(tiny_cls_config(4), 5).unwrap();
        let cloud = random_cloud(32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let perm = Permutation::random(32, &mut rng);
        let shuffled = cloud.permuted(&perm).unwrap();

        let a = model.predict_logits(&[&cloud]).unwrap();
        let b = model.predict_logits(&[&shuffled]).unwrap();
        assert!(
            a.max_abs_diff(&b).unwrap() <= 1e-5,
            "diff {}",
            a.max_abs_diff(&b).unwrap()
        );
    }
}
