//! The workflows behind the CLI subcommands (`train`, `eval`, `ablate`,
//! `permtest`, `gradcheck`), reusable from examples and tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, restore_params, save_checkpoint};
use crate::config::{Config, DataSettings};
use crate::data::io::load_dataset_dir;
use crate::data::{
    evaluate, evaluate_clouds, generate_synthetic_dataset, run_ablation, run_permutation_test,
    AblationTable, Dataset, MetricReport, PermutationTestReport, TaskKind,
};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, SegmentationHeadConfig};
use crate::model::{ModelConfig, PointStackModel};
use crate::training::{derive_rng, train_epoch, TrainConfig, TrainState};

const STREAM_DATA: u64 = 101;
const STREAM_PERMTEST: u64 = 102;

/// Materialize the dataset a config points at. Synthetic data is derived
/// from the training seed, so the same config text always yields the same
/// samples.
pub fn build_dataset(cfg: &Config) -> Result<Dataset> {
    match &cfg.data {
        DataSettings::Synthetic { .. } => {
            let spec = cfg
                .data
                .synthetic_spec(cfg.model.task)
                .expect("synthetic settings");
            let mut rng = derive_rng(cfg.train.seed, &[STREAM_DATA]);
            generate_synthetic_dataset(&spec, &mut rng)
        }
        DataSettings::Dir(path) => {
            let ds = load_dataset_dir(path)?;
            if ds.task != cfg.model.task {
                return Err(Error::InvalidArgument(format!(
                    "config task `{}` does not match dataset task `{}`",
                    cfg.model.task.as_str(),
                    ds.task.as_str()
                )));
            }
            Ok(ds)
        }
    }
}

/// Finish the model description with the class counts the dataset dictates.
pub fn model_config(cfg: &Config, dataset: &Dataset) -> Result<ModelConfig> {
    let head = match cfg.model.task {
        TaskKind::Classification => HeadConfig {
            hidden: cfg.model.head_hidden.clone(),
            dropout: cfg.model.head_dropout,
            classes: dataset.class_count(),
            segmentation: None,
            batch_norm: cfg.model.head_batch_norm,
        },
        TaskKind::PartSegmentation => {
            let parts = dataset.part_class_count();
            if parts < 2 {
                return Err(Error::InvalidArgument(
                    "segmentation dataset exposes fewer than 2 part classes".into(),
                ));
            }
            HeadConfig {
                hidden: cfg.model.head_hidden.clone(),
                dropout: cfg.model.head_dropout,
                classes: parts,
                segmentation: Some(SegmentationHeadConfig {
                    object_classes: dataset.class_count(),
                    condition_on_class: cfg.model.condition_on_class,
                }),
                batch_norm: cfg.model.head_batch_norm,
            }
        }
    };
    Ok(ModelConfig {
        backbone: cfg.model.backbone.clone(),
        head,
    })
}

/// Knobs of the in-process training loop.
#[derive(Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop once eval-mode accuracy on the training split reaches this.
    pub early_stop_train_oa: Option<f64>,
    /// Also evaluate the test split every `n` epochs (0 = only at the end).
    pub eval_test_every: usize,
}

/// Outcome of a training run, including the metrics-log lines.
pub struct TrainRun {
    pub log_lines: Vec<String>,
    pub epochs_run: usize,
    pub final_train_oa: f64,
    pub final_test: MetricReport,
    pub wall_seconds: f64,
}

/// The epoch loop: train, log one line per epoch
/// (`epoch= lr= loss= train_oa=` plus test metrics when evaluated).
pub fn run_training<SObserver>(
    model: &PointStackModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opts: TrainOptions,
    mut observer: SObserver,
) -> Result<TrainRun>
where
    SObserver: FnMut(&str),
{
    let start = Instant::now();
    let mut state = TrainState::new(model, cfg);
    let mut log_lines = Vec::with_capacity(cfg.epochs);
    let mut final_train_oa = 0.0;
    let segmentation = dataset.task == TaskKind::PartSegmentation;

    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let metrics = train_epoch(model, dataset, cfg, &mut state)?;
        epochs_run = epoch + 1;
        let mut line = format!(
            "epoch={} lr={} loss={:.6} train_oa={:.6}",
            metrics.epoch, metrics.lr, metrics.mean_loss, metrics.train_accuracy
        );

        let mut stop = false;
        if let Some(target) = opts.early_stop_train_oa {
            // Cheap trigger on the train-mode accuracy, then confirm in eval
            // mode so dropout noise cannot end the run early.
            if metrics.train_accuracy >= target {
                let r = evaluate_clouds(model, &dataset.train, dataset)?;
                final_train_oa = r.overall_accuracy;
                line.push_str(&format!(" eval_train_oa={:.6}", r.overall_accuracy));
                if r.overall_accuracy >= target {
                    stop = true;
                }
            }
        }
        if opts.eval_test_every > 0 && (epoch + 1) % opts.eval_test_every == 0 {
            let r = evaluate(model, dataset)?;
            if segmentation {
                line.push_str(&format!(
                    " test_miou={:.6}",
                    r.instance_miou.unwrap_or(0.0)
                ));
            } else {
                line.push_str(&format!(
                    " test_oa={:.6} test_macc={:.6}",
                    r.overall_accuracy, r.mean_class_accuracy
                ));
            }
        }
        observer(&line);
        log_lines.push(line);
        if stop {
            break;
        }
    }

    if opts.early_stop_train_oa.is_none() {
        let r = evaluate_clouds(model, &dataset.train, dataset)?;
        final_train_oa = r.overall_accuracy;
    }
    let final_test = evaluate(model, dataset)?;
    log_lines.push(final_test.record_line("final-test"));
    Ok(TrainRun {
        log_lines,
        epochs_run,
        final_train_oa,
        final_test,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Result of `cmd_train`: where the artifacts landed plus the run report.
pub struct TrainSummary {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub run: TrainRun,
}

/// `train --config <file> [--seed N] [--out <dir>]`.
///
/// Writes `metrics.log` (one line per epoch, then the final-test record) and
/// `model.ckpt` into the output directory.
pub fn cmd_train(
    config_path: &Path,
    seed_override: Option<u64>,
    out_dir: &Path,
    quiet: bool,
) -> Result<TrainSummary> {
    let text = fs::read_to_string(config_path)?;
    let mut cfg = Config::parse(&text)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    let dataset = build_dataset(&cfg)?;
    let mc = model_config(&cfg, &dataset)?;
    let model = PointStackModel::<f32>::new(mc, cfg.train.seed)?;

    let run = run_training(
        &model,
        &dataset,
        &cfg.train,
        TrainOptions::default(),
        |line| {
            if !quiet {
                println!("{line}");
            }
        },
    )?;

    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("metrics.log");
    fs::write(&log_path, run.log_lines.join("\n") + "\n")?;
    let checkpoint_path = out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint_path, &cfg, cfg.train.seed, &model.params)?;

    Ok(TrainSummary {
        checkpoint_path,
        log_path,
        run,
    })
}

/// Rebuild a model from a checkpoint, sizing the head for `dataset`.
/// Restoring fails if the dataset's class layout does not match the tensors.
pub fn load_model(
    checkpoint_path: &Path,
    dataset: &Dataset,
) -> Result<(Config, PointStackModel<f32>)> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let cfg = ckpt.config()?;
    let mc = model_config(&cfg, dataset)?;
    let model = PointStackModel::<f32>::new(mc, ckpt.seed)?;
    restore_params(&ckpt, &model.params)?;
    Ok((cfg, model))
}

/// `eval --checkpoint <file> --data <dir>`.
pub fn cmd_eval(checkpoint_path: &Path, data_dir: &Path) -> Result<MetricReport> {
    let dataset = load_dataset_dir(data_dir)?;
    let (_, model) = load_model(checkpoint_path, &dataset)?;
    evaluate(&model, &dataset)
}

/// `permtest --checkpoint <file> --n 10 [--data <dir>]`.
///
/// Without `--data`, the evaluation set is re-derived from the config echoed
/// in the checkpoint (synthetic sets regenerate from the training seed).
pub fn cmd_permtest(
    checkpoint_path: &Path,
    n_perms: usize,
    data_dir: Option<&Path>,
) -> Result<PermutationTestReport> {
    let dataset = match data_dir {
        Some(dir) => load_dataset_dir(dir)?,
        None => {
            let ckpt = load_checkpoint(checkpoint_path)?;
            build_dataset(&ckpt.config()?)?
        }
    };
    let (cfg, model) = load_model(checkpoint_path, &dataset)?;
    let mut rng = derive_rng(cfg.train.seed, &[STREAM_PERMTEST]);
    run_permutation_test(&model, &dataset, n_perms, &mut rng)
}

/// `ablate --config <file> --seeds N`: N training seeds starting at the
/// config's seed, five flag rows each.
pub fn cmd_ablate(config_path: &Path, n_seeds: usize) -> Result<AblationTable> {
    let text = fs::read_to_string(config_path)?;
    let cfg = Config::parse(&text)?;
    if cfg.model.task != TaskKind::Classification {
        return Err(Error::InvalidArgument(
            "the ablation protocol runs on a classification config".into(),
        ));
    }
    let dataset = build_dataset(&cfg)?;
    let mc = model_config(&cfg, &dataset)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.train.seed + i).collect();
    run_ablation(&dataset, &mc, &cfg.train, &seeds)
}

/// Which op families `gradcheck` exercises.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GradCheckModule {
    All,
    Tensor,
    Pooling,
    Backbone,
}

impl GradCheckModule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(GradCheckModule::All),
            "tensor" => Ok(GradCheckModule::Tensor),
            "pooling" => Ok(GradCheckModule::Pooling),
            "backbone" => Ok(GradCheckModule::Backbone),
            other => Err(Error::InvalidArgument(format!(
                "unknown gradcheck module `{other}` (use all|tensor|pooling|backbone)"
            ))),
        }
    }
}

/// One finite-difference comparison.
pub struct GradCheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "gradcheck {} max_rel_err={:.3e} tol={:.0e} {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `gradcheck [--module all|tensor|pooling|backbone]`: central finite
/// differences at 64-bit, `h = 1e-5`, against the recorded gradients.
pub fn cmd_gradcheck(module: GradCheckModule) -> Result<Vec<GradCheckOutcome>> {
    gradcheck::run_suite(module)
}

pub mod gradcheck {
    //! The finite-difference suite behind `cmd_gradcheck`.

    use super::*;
    use crate::geometry::geometric_affine;
    use crate::pooling::{learnable_pool, scaled_dot_product_attention, LearnablePoolingParams};
    use crate::tensor::{BatchNormState, DenseMatrix, NodeId, Parameter, Phase, Tape};
    use crate::training::grad_check;

    const H: f64 = 1e-5;
    const TIGHT: f64 = 1e-6;
    const STANDARD: f64 = 1e-4;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Parameter<f64> {
        Parameter::new(DenseMatrix::randn(rows, cols, 1.0, rng))
    }

    struct Suite {
        outcomes: Vec<GradCheckOutcome>,
    }

    impl Suite {
        fn check<F>(&mut self, name: &str, tol: f64, inputs: &[&Parameter<f64>], record: F) -> Result<()>
        where
            F: Fn(&mut Tape<f64>) -> Result<NodeId>,
        {
            let max_rel_err = grad_check(record, inputs, H)?;
            self.outcomes.push(GradCheckOutcome {
                name: name.to_string(),
                max_rel_err,
                tolerance: tol,
            });
            Ok(())
        }
    }

    fn tensor_checks(suite: &mut Suite) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(90);

        let a = randn(3, 4, &mut rng);
        let b = randn(4, 2, &mut rng);
        suite.check("tensor.matmul", TIGHT, &[&a, &b], |t| {
            let an = t.param(&a);
            let bn = t.param(&b);
            let y = t.matmul(an, bn)?;
            Ok(t.sum_all(y))
        })?;

        let w = randn(4, 3, &mut rng);
        let bias = randn(1, 3, &mut rng);
        let x = DenseMatrix::<f64>::randn(5, 4, 1.0, &mut rng);
        suite.check("tensor.linear", TIGHT, &[&w, &bias], |t| {
            let xn = t.input(x.clone());
            let y = t.linear(xn, &w, Some(&bias))?;
            Ok(t.sum_all(y))
        })?;

        let a2 = randn(3, 3, &mut rng);
        let b2 = randn(3, 3, &mut rng);
        suite.check("tensor.add_sub_scale", TIGHT, &[&a2, &b2], |t| {
            let an = t.param(&a2);
            let bn = t.param(&b2);
            let s = t.add(an, bn)?;
            let d = t.sub(s, bn)?;
            let sc = t.scale(d, 1.7);
            let y = t.matmul(sc, bn)?;
            Ok(t.sum_all(y))
        })?;

        suite.check("tensor.transpose", TIGHT, &[&a, &b2], |t| {
            let an = t.param(&a); // 3x4
            let tn = t.transpose(an); // 4x3
            let bn = t.param(&b2); // 3x3
            let y = t.matmul(tn, bn)?;
            Ok(t.sum_all(y))
        })?;

        let r = randn(4, 3, &mut rng);
        suite.check("tensor.relu", STANDARD, &[&r], |t| {
            let xn = t.param(&r);
            let y = t.relu(xn);
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let s = randn(3, 4, &mut rng);
        let sv = randn(4, 2, &mut rng);
        suite.check("tensor.softmax_rows", STANDARD, &[&s, &sv], |t| {
            let xn = t.param(&s);
            let sm = t.softmax_rows(xn);
            let vn = t.param(&sv);
            let y = t.matmul(sm, vn)?;
            Ok(t.sum_all(y))
        })?;

        let dx = randn(4, 3, &mut rng);
        suite.check("tensor.dropout_train", STANDARD, &[&dx], |t| {
            let xn = t.param(&dx);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(17);
            let y = t.dropout(xn, 0.4, Phase::Train, &mut drop_rng)?;
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let bw = randn(4, 3, &mut rng);
        let gamma = Parameter::new(DenseMatrix::<f64>::filled(1, 3, 1.2));
        let beta = Parameter::new(DenseMatrix::<f64>::filled(1, 3, -0.3));
        let bx = DenseMatrix::<f64>::randn(6, 4, 1.0, &mut rng);
        let bn_state = BatchNormState::<f64>::new(3);
        suite.check(
            "tensor.batch_norm_train",
            STANDARD,
            &[&bw, &gamma, &beta],
            |t| {
                let xn = t.input(bx.clone());
                let h = t.linear(xn, &bw, None)?;
                let y = t.batch_norm(h, &gamma, &beta, &bn_state, Phase::Train)?;
                let yt = t.transpose(y);
                let sq = t.matmul(y, yt)?;
                Ok(t.sum_all(sq))
            },
        )?;

        let bn_state_eval = BatchNormState::<f64>::new(3);
        suite.check(
            "tensor.batch_norm_eval",
            TIGHT,
            &[&bw, &gamma, &beta],
            |t| {
                let xn = t.input(bx.clone());
                let h = t.linear(xn, &bw, None)?;
                let y = t.batch_norm(h, &gamma, &beta, &bn_state_eval, Phase::Eval)?;
                Ok(t.sum_all(y))
            },
        )?;

        let mx = randn(6, 3, &mut rng);
        suite.check("tensor.max_pool_rows", STANDARD, &[&mx], |t| {
            let xn = t.param(&mx);
            let y = t.max_pool_rows(xn, 2)?;
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let gx = randn(5, 3, &mut rng);
        suite.check("tensor.gather_rows", TIGHT, &[&gx], |t| {
            let xn = t.param(&gx);
            let y = t.gather_rows(xn, vec![0, 2, 2, 4])?;
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let ix = randn(5, 3, &mut rng);
        suite.check("tensor.interpolate_rows", TIGHT, &[&ix], |t| {
            let xn = t.param(&ix);
            let idx = vec![[0usize, 1, 2], [2, 3, 4]];
            let w = vec![[0.5, 0.3, 0.2], [0.1, 0.7, 0.2]];
            let y = t.interpolate_rows(xn, idx, w)?;
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let ca = randn(2, 3, &mut rng);
        let cb = randn(3, 3, &mut rng);
        suite.check("tensor.concat_slice", TIGHT, &[&ca, &cb], |t| {
            let an = t.param(&ca);
            let bn = t.param(&cb);
            let rows = t.concat_rows(&[an, bn])?; // 5x3
            let cols = t.concat_cols(&[rows, rows])?; // 5x6
            let sl = t.slice_cols(cols, 2, 3)?; // 5x3
            let b2n = t.param(&b2);
            let y = t.matmul(sl, b2n)?;
            Ok(t.sum_all(y))
        })?;

        let rr = randn(1, 3, &mut rng);
        suite.check("tensor.repeat_rows", TIGHT, &[&rr], |t| {
            let xn = t.param(&rr);
            let y = t.repeat_rows(xn, 4)?;
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let ri = randn(2, 3, &mut rng);
        suite.check("tensor.repeat_interleave_rows", TIGHT, &[&ri], |t| {
            let xn = t.param(&ri);
            let y = t.repeat_interleave_rows(xn, 3)?;
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let nx = randn(4, 3, &mut rng);
        suite.check("tensor.normalize_global_std", STANDARD, &[&nx], |t| {
            let xn = t.param(&nx);
            let y = t.normalize_global_std(xn, 1e-5);
            let bn = t.param(&b2);
            let z = t.matmul(y, bn)?;
            Ok(t.sum_all(z))
        })?;

        let ax = randn(4, 3, &mut rng);
        let alpha = randn(1, 3, &mut rng);
        let beta2 = randn(1, 3, &mut rng);
        suite.check(
            "tensor.channel_affine",
            TIGHT,
            &[&ax, &alpha, &beta2],
            |t| {
                let xn = t.param(&ax);
                let y = t.channel_affine(xn, &alpha, &beta2)?;
                let bn = t.param(&b2);
                let z = t.matmul(y, bn)?;
                Ok(t.sum_all(z))
            },
        )?;

        let logits = randn(4, 3, &mut rng);
        suite.check("tensor.smoothed_cross_entropy", STANDARD, &[&logits], |t| {
            let xn = t.param(&logits);
            t.smoothed_cross_entropy(xn, &[0, 2, 1, 1], 0.1)
        })?;

        let ga_grouped = randn(6, 3, &mut rng);
        let ga_kp = randn(3, 3, &mut rng);
        let ga_alpha = randn(1, 3, &mut rng);
        let ga_beta = randn(1, 3, &mut rng);
        suite.check(
            "geometry.geometric_affine",
            STANDARD,
            &[&ga_grouped, &ga_kp, &ga_alpha, &ga_beta],
            |t| {
                let g = t.param(&ga_grouped);
                let k = t.param(&ga_kp);
                let y = geometric_affine(t, g, k, &ga_alpha, &ga_beta, 2)?;
                let bn = t.param(&b2);
                let z = t.matmul(y, bn)?;
                Ok(t.sum_all(z))
            },
        )?;
        Ok(())
    }

    fn pooling_checks(suite: &mut Suite) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(91);

        let q = randn(2, 3, &mut rng);
        let k = randn(5, 3, &mut rng);
        let v = randn(5, 4, &mut rng);
        suite.check("pooling.attention", STANDARD, &[&q, &k, &v], |t| {
            let qn = t.param(&q);
            let kn = t.param(&k);
            let vn = t.param(&v);
            let y = scaled_dot_product_attention(t, qn, kn, vn, 3)?;
            Ok(t.sum_all(y))
        })?;

        let lp = LearnablePoolingParams::<f64>::new(2, 4, 8, 2, &mut rng)?;
        let f = DenseMatrix::<f64>::randn(6, 4, 1.0, &mut rng);
        suite.check(
            "pooling.learnable_pool",
            STANDARD,
            &[&lp.queries, &lp.w_q, &lp.w_k, &lp.w_v],
            |t| {
                let fn_ = t.input(f.clone());
                let y = learnable_pool(t, fn_, &lp)?;
                Ok(t.sum_all(y))
            },
        )?;

        let mp = randn(6, 4, &mut rng);
        let proj = randn(4, 2, &mut rng);
        suite.check("pooling.max_pool", STANDARD, &[&mp, &proj], |t| {
            let xn = t.param(&mp);
            let y = t.max_pool_rows(xn, 1)?;
            let pn = t.param(&proj);
            let z = t.matmul(y, pn)?;
            Ok(t.sum_all(z))
        })?;
        Ok(())
    }

    fn backbone_checks(suite: &mut Suite) -> Result<()> {
        use crate::backbone::{BackboneConfig, StageConfig};
        use crate::geometry::PointCloud;
        use crate::model::{ModelConfig, PointStackModel};
        use rand::Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(92);

        // One residual stage end to end.
        let stage_cfg = StageConfig {
            points: 4,
            channels: 6,
            neighbors: 3,
        };
        let stage = crate::backbone::ResidualStageParams::<f64>::new(4, 6, &mut rng);
        let coords: Vec<[f64; 3]> = (0..10)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let feats = DenseMatrix::<f64>::randn(10, 4, 1.0, &mut rng);
        let stage_inputs: Vec<&Parameter<f64>> = vec![
            &stage.affine_alpha,
            &stage.affine_beta,
            &stage.embed.weight,
            &stage.embed.gamma,
            &stage.embed.beta,
            &stage.pre.first.weight,
            &stage.pre.second.gamma,
            &stage.post.first.weight,
            &stage.post.second.beta,
        ];
        suite.check(
            "backbone.residual_stage",
            STANDARD,
            &stage_inputs,
            |t| {
                let f = t.input(feats.clone());
                let (out, _) = crate::backbone::residual_block_forward(
                    t,
                    f,
                    &coords,
                    &stage_cfg,
                    &stage,
                    Phase::Train,
                )?;
                Ok(t.sum_all(out))
            },
        )?;

        // End-to-end classification loss on a tiny model, gradients taken
        // through every trainable tensor.
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                stem_channels: 4,
                stages: vec![
                    StageConfig { points: 8, channels: 6, neighbors: 3 },
                    StageConfig { points: 4, channels: 8, neighbors: 3 },
                ],
                single_res_queries: 2,
                single_res_dim: 8,
                multi_res_dim: 8,
                attention_heads: 2,
                flags: Default::default(),
            },
            head: crate::heads::HeadConfig {
                hidden: vec![6],
                dropout: 0.25,
                classes: 3,
                segmentation: None,
                batch_norm: true,
            },
        };
        let model = PointStackModel::<f64>::new(cfg, 31)?;
        let clouds: Vec<PointCloud> = (0..2)
            .map(|_| {
                PointCloud::new(
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
                .unwrap()
            })
            .collect();
        let trainable: Vec<&Parameter<f64>> = model
            .params
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p)
            .collect();
        suite.check(
            "backbone.end_to_end_classification_loss",
            STANDARD,
            &trainable,
            |t| {
                let refs: Vec<&PointCloud> = clouds.iter().collect();
                let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
                let logits = model.classify_batch(t, &refs, Phase::Train, &mut drop_rng)?;
                t.smoothed_cross_entropy(logits, &[0, 2], 0.1)
            },
        )?;
        Ok(())
    }

    pub fn run_suite(module: GradCheckModule) -> Result<Vec<GradCheckOutcome>> {
        let mut suite = Suite {
            outcomes: Vec::new(),
        };
        if matches!(module, GradCheckModule::All | GradCheckModule::Tensor) {
            tensor_checks(&mut suite)?;
        }
        if matches!(module, GradCheckModule::All | GradCheckModule::Pooling) {
            pooling_checks(&mut suite)?;
        }
        if matches!(module, GradCheckModule::All | GradCheckModule::Backbone) {
            backbone_checks(&mut suite)?;
        }
        Ok(suite.outcomes)
    }
}
