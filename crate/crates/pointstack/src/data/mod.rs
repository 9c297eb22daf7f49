//! Datasets, metrics, and the experiment protocols (permutation test,
//! ablation table). Synthetic shape generation lives in [`synthetic`],
//! on-disk formats in [`io`].

pub mod experiments;
pub mod io;
pub mod synthetic;

pub use experiments::{run_ablation, run_permutation_test, AblationRow, AblationTable, PermutationTestReport};
pub use synthetic::{generate_synthetic_dataset, ShapeKind, SyntheticSpec};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{argmax_rows, PointStackModel};
use crate::tensor::Scalar;

/// Task a dataset (and the model consuming it) is meant for.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TaskKind {
    Classification,
    PartSegmentation,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::PartSegmentation => "part-segmentation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "part-segmentation" | "segmentation" => Ok(TaskKind::PartSegmentation),
            other => Err(Error::InvalidArgument(format!("unknown task kind `{other}`"))),
        }
    }
}

/// A train/test split of point clouds with class names and, for
/// segmentation, the part classes valid for each object category.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: TaskKind,
    pub class_names: Vec<String>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    /// For each object category, the part-class ids it may contain.
    pub parts_per_class: Option<Vec<Vec<u32>>>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Total number of part classes across all categories.
    pub fn part_class_count(&self) -> usize {
        self.parts_per_class
            .as_ref()
            .map(|ps| {
                ps.iter()
                    .flat_map(|p| p.iter())
                    .map(|&p| p as usize + 1)
                    .max()
                    .unwrap_or(0)
            })
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument("dataset has no classes".into()));
        }
        let classes = self.class_names.len() as u32;
        for (split, clouds) in [("train", &self.train), ("test", &self.test)] {
            for (i, c) in clouds.iter().enumerate() {
                let class = c.class_label.ok_or_else(|| {
                    Error::InvalidArgument(format!("{split} sample {i} has no class label"))
                })?;
                if class >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "{split} sample {i} has class {class}, but there are {classes} classes"
                    )));
                }
                match self.task {
                    TaskKind::Classification => {
                        if c.point_labels.is_some() {
                            return Err(Error::InvalidArgument(format!(
                                "{split} sample {i} carries part labels in a classification set"
                            )));
                        }
                    }
                    TaskKind::PartSegmentation => {
                        if c.point_labels.is_none() {
                            return Err(Error::InvalidArgument(format!(
                                "{split} sample {i} is missing part labels"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Evaluation summary; `instance_miou` is present for segmentation.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub overall_accuracy: f64,
    pub mean_class_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub instance_miou: Option<f64>,
    pub samples: usize,
}

impl MetricReport {
    pub fn record_line(&self, prefix: &str) -> String {
        let mut line = format!(
            "record kind={prefix} samples={} oa={:.6} macc={:.6}",
            self.samples, self.overall_accuracy, self.mean_class_accuracy
        );
        if let Some(miou) = self.instance_miou {
            line.push_str(&format!(" miou={miou:.6}"));
        }
        line
    }
}

/// Overall and per-class accuracy from prediction/target pairs.
pub fn accuracy_metrics(predictions: &[usize], targets: &[usize], classes: usize) -> MetricReport {
    let mut correct_per_class = vec![0usize; classes];
    let mut total_per_class = vec![0usize; classes];
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(targets) {
        total_per_class[t] += 1;
        if p == t {
            correct += 1;
            correct_per_class[t] += 1;
        }
    }
    let per_class_accuracy: Vec<f64> = correct_per_class
        .iter()
        .zip(&total_per_class)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    let present: Vec<f64> = per_class_accuracy
        .iter()
        .zip(&total_per_class)
        .filter(|(_, &t)| t > 0)
        .map(|(&a, _)| a)
        .collect();
    let mean_class_accuracy = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MetricReport {
        overall_accuracy: correct as f64 / predictions.len().max(1) as f64,
        mean_class_accuracy,
        per_class_accuracy,
        instance_miou: None,
        samples: predictions.len(),
    }
}

/// Mean intersection-over-union of one sample, averaged over the part
/// classes of its category. A part absent from both the ground truth and the
/// prediction counts as IoU 1.
pub fn sample_miou(predicted: &[usize], truth: &[u32], category_parts: &[u32]) -> f64 {
    let mut total = 0.0;
    for &part in category_parts {
        let part = part as usize;
        let mut intersection = 0usize;
        let mut union = 0usize;
        for (&p, &t) in predicted.iter().zip(truth) {
            let in_pred = p == part;
            let in_truth = t as usize == part;
            if in_pred && in_truth {
                intersection += 1;
            }
            if in_pred || in_truth {
                union += 1;
            }
        }
        total += if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        };
    }
    total / category_parts.len().max(1) as f64
}

/// Evaluate a model on a list of clouds.
///
/// Classification reports OA and mAcc over instance labels. Segmentation
/// additionally reports instance mIoU; predictions are restricted to the
/// part classes valid for each sample's category when the dataset carries
/// that table (the standard protocol), and point-level OA/mAcc are computed
/// over part labels.
pub fn evaluate_clouds<S: Scalar>(
    model: &PointStackModel<S>,
    clouds: &[PointCloud],
    dataset: &Dataset,
) -> Result<MetricReport> {
    evaluate_clouds_masked(model, clouds, dataset, true)
}

/// Same as [`evaluate_clouds`] with control over category masking.
pub fn evaluate_clouds_masked<S: Scalar>(
    model: &PointStackModel<S>,
    clouds: &[PointCloud],
    dataset: &Dataset,
    mask_to_category: bool,
) -> Result<MetricReport> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    match dataset.task {
        TaskKind::Classification => {
            if model.config.is_segmentation() {
                return Err(Error::InvalidArgument(
                    "segmentation model evaluated on a classification set".into(),
                ));
            }
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let mut predictions = Vec::with_capacity(refs.len());
            // One cloud at a time keeps memory flat; eval has no batch effects.
            for c in &refs {
                let logits = model.predict_logits(&[c])?;
                predictions.extend(argmax_rows(&logits));
            }
            let targets: Vec<usize> = refs
                .iter()
                .map(|c| c.class_label.unwrap_or(0) as usize)
                .collect();
            Ok(accuracy_metrics(&predictions, &targets, dataset.class_count()))
        }
        TaskKind::PartSegmentation => {
            if !model.config.is_segmentation() {
                return Err(Error::InvalidArgument(
                    "classification model evaluated on a segmentation set".into(),
                ));
            }
            let parts = dataset.part_class_count();
            let mut point_preds = Vec::new();
            let mut point_truth = Vec::new();
            let mut miou_total = 0.0;
            for cloud in clouds {
                let logits = model.predict_segment_logits(cloud)?;
                let truth = cloud
                    .point_labels
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("sample without part labels".into()))?;
                let category = cloud.class_label.unwrap_or(0) as usize;
                let valid: Option<&Vec<u32>> = if mask_to_category {
                    dataset.parts_per_class.as_ref().and_then(|p| p.get(category))
                } else {
                    None
                };
                let preds: Vec<usize> = (0..logits.rows())
                    .map(|r| {
                        let row = logits.row(r);
                        let candidates: Vec<usize> = match valid {
                            Some(v) => v.iter().map(|&p| p as usize).collect(),
                            None => (0..row.len()).collect(),
                        };
                        let mut best = candidates[0];
                        for &c in &candidates[1..] {
                            if row[c] > row[best] {
                                best = c;
                            }
                        }
                        best
                    })
                    .collect();
                let category_parts: Vec<u32> = match dataset
                    .parts_per_class
                    .as_ref()
                    .and_then(|p| p.get(category))
                {
                    Some(v) => v.clone(),
                    None => (0..parts as u32).collect(),
                };
                miou_total += sample_miou(&preds, truth, &category_parts);
                point_preds.extend(preds);
                point_truth.extend(truth.iter().map(|&t| t as usize));
            }
            let mut report = accuracy_metrics(&point_preds, &point_truth, parts);
            report.instance_miou = Some(miou_total / clouds.len() as f64);
            report.samples = clouds.len();
            Ok(report)
        }
    }
}

/// Evaluate the test split.
pub fn evaluate<S: Scalar>(model: &PointStackModel<S>, dataset: &Dataset) -> Result<MetricReport> {
    evaluate_clouds(model, &dataset.test, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_identities() {
        // 3 of 4 correct.
        let r = accuracy_metrics(&[0, 1, 2, 2], &[0, 1, 2, 3], 4);
        assert!((r.overall_accuracy - 0.75).abs() < 1e-12);

        // Per-class accuracies (1.0, 0.5) average to 0.75.
        let r = accuracy_metrics(&[0, 1, 0], &[0, 1, 1], 2);
        assert!((r.per_class_accuracy[0] - 1.0).abs() < 1e-12);
        assert!((r.per_class_accuracy[1] - 0.5).abs() < 1e-12);
        assert!((r.mean_class_accuracy - 0.75).abs() < 1e-12);

        // All predictions class 0 on a balanced set: OA == mAcc == 1/C.
        let preds = vec![0usize; 12];
        let targets: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let r = accuracy_metrics(&preds, &targets, 4);
        assert!((r.overall_accuracy - 0.25).abs() < 1e-12);
        assert!((r.mean_class_accuracy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn miou_perfect_prediction_is_one() {
        let truth = vec![0u32, 0, 1, 1];
        let preds = vec![0usize, 0, 1, 1];
        assert_eq!(sample_miou(&preds, &truth, &[0, 1]), 1.0);
    }

    #[test]
    fn miou_counts_absent_parts_as_one() {
        // Category has parts {0, 1, 2}; part 2 appears in neither truth nor
        // prediction: IoU 1 for it; part 0 perfect; part 1 perfect.
        let truth = vec![0u32, 1];
        let preds = vec![0usize, 1];
        assert_eq!(sample_miou(&preds, &truth, &[0, 1, 2]), 1.0);

        // Predicting part 1 for everything: part 0 IoU 0, part 1 IoU 1/2.
        let preds = vec![1usize, 1];
        let got = sample_miou(&preds, &truth, &[0, 1]);
        assert!((got - 0.25).abs() < 1e-12);
    }
}
