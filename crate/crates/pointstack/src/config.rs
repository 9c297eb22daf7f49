//! Plain-text run configuration.
//!
//! Grammar: `[section]` headers, `key = value` pairs, `#` comments, blank
//! lines ignored. Lists are comma separated. Sections: `[model]`, `[head]`,
//! `[train]`, `[data]`. [`Config::to_text`] writes the canonical form, which
//! parses back to the same configuration; checkpoints embed that echo.

use std::path::PathBuf;

use crate::backbone::{BackboneConfig, StageConfig};
use crate::data::{ShapeKind, SyntheticSpec, TaskKind};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Architecture settings minus the class counts, which come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub task: TaskKind,
    pub backbone: BackboneConfig,
    pub head_hidden: Vec<usize>,
    pub head_dropout: f64,
    pub head_batch_norm: bool,
    /// Segmentation only: append the object-class one-hot per point.
    pub condition_on_class: bool,
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSettings {
    /// Generated on the fly from the train seed.
    Synthetic {
        classes: Vec<ShapeKind>,
        train_per_class: usize,
        test_per_class: usize,
        points: usize,
        noise: f64,
        rotate: bool,
        scale_jitter: f64,
    },
    /// Loaded from a dataset directory.
    Dir(PathBuf),
}

impl DataSettings {
    pub fn synthetic_spec(&self, task: TaskKind) -> Option<SyntheticSpec> {
        match self {
            DataSettings::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                points,
                noise,
                rotate,
                scale_jitter,
            } => Some(SyntheticSpec {
                task,
                classes: classes.clone(),
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                points: *points,
                noise: *noise,
                rotate: *rotate,
                scale_jitter: *scale_jitter,
            }),
            DataSettings::Dir(_) => None,
        }
    }
}

/// A full run description: model, training, and data.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub data: DataSettings,
}

impl Config {
    /// Desk-scale classification defaults on the rippled-shape benchmark.
    pub fn desk_classification() -> Self {
        Config {
            model: ModelSettings {
                task: TaskKind::Classification,
                backbone: BackboneConfig::desk_scale(64),
                head_hidden: vec![64, 32],
                head_dropout: 0.2,
                head_batch_norm: true,
                condition_on_class: false,
            },
            train: TrainConfig {
                epochs: 60,
                batch_size: 16,
                translate: true,
                translate_range: 0.1,
                rotate: true,
                ..TrainConfig::default()
            },
            data: DataSettings::Synthetic {
                classes: vec![
                    ShapeKind::Sphere,
                    ShapeKind::RippledSphere,
                    ShapeKind::Cylinder,
                    ShapeKind::RippledCylinder,
                ],
                train_per_class: 32,
                test_per_class: 25,
                points: 64,
                noise: 0.01,
                rotate: true,
                scale_jitter: 0.1,
            },
        }
    }

    /// Desk-scale segmentation defaults (cylinder caps/barrel, torus
    /// inner/outer).
    pub fn desk_segmentation() -> Self {
        Config {
            model: ModelSettings {
                task: TaskKind::PartSegmentation,
                backbone: BackboneConfig::desk_scale(128),
                head_hidden: vec![96, 48],
                head_dropout: 0.2,
                head_batch_norm: true,
                condition_on_class: true,
            },
            train: TrainConfig {
                epochs: 60,
                batch_size: 8,
                translate: true,
                translate_range: 0.1,
                rotate: false,
                ..TrainConfig::default()
            },
            data: DataSettings::Synthetic {
                classes: vec![ShapeKind::Cylinder, ShapeKind::Torus],
                train_per_class: 24,
                test_per_class: 12,
                points: 128,
                noise: 0.005,
                rotate: true,
                scale_jitter: 0.05,
            },
        }
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let join = |it: &[usize]| {
            it.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        out.push_str("[model]\n");
        out.push_str(&format!("task = {}\n", m.task.as_str()));
        out.push_str(&format!("stem_channels = {}\n", b.stem_channels));
        out.push_str(&format!(
            "stage_points = {}\n",
            join(&b.stages.iter().map(|s| s.points).collect::<Vec<_>>())
        ));
        out.push_str(&format!(
            "stage_channels = {}\n",
            join(&b.stages.iter().map(|s| s.channels).collect::<Vec<_>>())
        ));
        out.push_str(&format!(
            "stage_neighbors = {}\n",
            join(&b.stages.iter().map(|s| s.neighbors).collect::<Vec<_>>())
        ));
        out.push_str(&format!("single_res_queries = {}\n", b.single_res_queries));
        out.push_str(&format!("single_res_dim = {}\n", b.single_res_dim));
        out.push_str(&format!("multi_res_dim = {}\n", b.multi_res_dim));
        out.push_str(&format!("attention_heads = {}\n", b.attention_heads));
        out.push_str(&format!("multi_resolution = {}\n", b.flags.multi_resolution));
        out.push_str(&format!("single_res_lp = {}\n", b.flags.single_res_lp));
        out.push_str(&format!("multi_res_lp = {}\n", b.flags.multi_res_lp));
        out.push('\n');
        out.push_str("[head]\n");
        out.push_str(&format!("hidden = {}\n", join(&m.head_hidden)));
        out.push_str(&format!("dropout = {}\n", m.head_dropout));
        out.push_str(&format!("batch_norm = {}\n", m.head_batch_norm));
        out.push_str(&format!("condition_on_class = {}\n", m.condition_on_class));
        out.push('\n');
        let t = &self.train;
        out.push_str("[train]\n");
        out.push_str(&format!("epochs = {}\n", t.epochs));
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        out.push_str(&format!("lr_max = {}\n", t.lr_max));
        out.push_str(&format!("lr_min = {}\n", t.lr_min));
        out.push_str(&format!("momentum = {}\n", t.momentum));
        out.push_str(&format!("weight_decay = {}\n", t.weight_decay));
        out.push_str(&format!("label_smoothing = {}\n", t.label_smoothing));
        out.push_str(&format!("translate = {}\n", t.translate));
        out.push_str(&format!("translate_range = {}\n", t.translate_range));
        out.push_str(&format!("rotate = {}\n", t.rotate));
        out.push_str(&format!("seed = {}\n", t.seed));
        out.push('\n');
        out.push_str("[data]\n");
        match &self.data {
            DataSettings::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                points,
                noise,
                rotate,
                scale_jitter,
            } => {
                out.push_str("source = synthetic\n");
                out.push_str(&format!(
                    "classes = {}\n",
                    classes
                        .iter()
                        .map(|c| c.name())
                        .collect::<Vec<_>>()
                        .join(",")
                ));
                out.push_str(&format!("train_per_class = {train_per_class}\n"));
                out.push_str(&format!("test_per_class = {test_per_class}\n"));
                out.push_str(&format!("points = {points}\n"));
                out.push_str(&format!("noise = {noise}\n"));
                out.push_str(&format!("rotate = {rotate}\n"));
                out.push_str(&format!("scale_jitter = {scale_jitter}\n"));
            }
            DataSettings::Dir(path) => {
                out.push_str("source = dir\n");
                out.push_str(&format!("path = {}\n", path.display()));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Config> {
        Parser::new(text).finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.train.validate()?;
        if self.model.head_hidden.is_empty() {
            return Err(Error::InvalidArgument("head hidden sizes are empty".into()));
        }
        Ok(())
    }
}

struct Parser<'a> {
    text: &'a str,
}

#[derive(Default)]
struct RawSections {
    model: Vec<(usize, String, String)>,
    head: Vec<(usize, String, String)>,
    train: Vec<(usize, String, String)>,
    data: Vec<(usize, String, String)>,
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: "config".into(),
        line,
        msg: msg.into(),
    }
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser { text }
    }

    fn split_sections(&self) -> Result<RawSections> {
        let mut raw = RawSections::default();
        let mut current: Option<&str> = None;
        for (i, raw_line) in self.text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(line_no, "unterminated section header"))?;
                current = Some(match name {
                    "model" => "model",
                    "head" => "head",
                    "train" => "train",
                    "data" => "data",
                    other => return Err(cfg_err(line_no, format!("unknown section `[{other}]`"))),
                });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(line_no, "expected `key = value`"))?;
            let entry = (line_no, key.trim().to_string(), value.trim().to_string());
            match current {
                Some("model") => raw.model.push(entry),
                Some("head") => raw.head.push(entry),
                Some("train") => raw.train.push(entry),
                Some("data") => raw.data.push(entry),
                _ => return Err(cfg_err(line_no, "key outside any section")),
            }
        }
        Ok(raw)
    }

    fn finish(self) -> Result<Config> {
        let raw = self.split_sections()?;

        let mut cfg = Config::desk_classification();
        let mut task = cfg.model.task;
        // First pass for the task so section defaults land right.
        for (_, k, v) in &raw.model {
            if k == "task" {
                task = TaskKind::parse(v)?;
            }
        }
        if task == TaskKind::PartSegmentation {
            cfg = Config::desk_segmentation();
        }
        cfg.model.task = task;

        let mut stage_points: Option<Vec<usize>> = None;
        let mut stage_channels: Option<Vec<usize>> = None;
        let mut stage_neighbors: Option<Vec<usize>> = None;

        for (line, key, value) in &raw.model {
            let b = &mut cfg.model.backbone;
            match key.as_str() {
                "task" => {}
                "stem_channels" => b.stem_channels = parse_num(*line, value)?,
                "stage_points" => stage_points = Some(parse_list(*line, value)?),
                "stage_channels" => stage_channels = Some(parse_list(*line, value)?),
                "stage_neighbors" => stage_neighbors = Some(parse_list(*line, value)?),
                "single_res_queries" => b.single_res_queries = parse_num(*line, value)?,
                "single_res_dim" => b.single_res_dim = parse_num(*line, value)?,
                "multi_res_dim" => b.multi_res_dim = parse_num(*line, value)?,
                "attention_heads" => b.attention_heads = parse_num(*line, value)?,
                "multi_resolution" => b.flags.multi_resolution = parse_bool(*line, value)?,
                "single_res_lp" => b.flags.single_res_lp = parse_bool(*line, value)?,
                "multi_res_lp" => b.flags.multi_res_lp = parse_bool(*line, value)?,
                other => return Err(cfg_err(*line, format!("unknown model key `{other}`"))),
            }
        }
        if stage_points.is_some() || stage_channels.is_some() || stage_neighbors.is_some() {
            let points = stage_points
                .ok_or_else(|| cfg_err(1, "stage_points required with custom stages"))?;
            let channels = stage_channels
                .ok_or_else(|| cfg_err(1, "stage_channels required with custom stages"))?;
            let neighbors = stage_neighbors
                .ok_or_else(|| cfg_err(1, "stage_neighbors required with custom stages"))?;
            if points.len() != channels.len() || points.len() != neighbors.len() {
                return Err(cfg_err(1, "stage lists must have equal lengths"));
            }
            cfg.model.backbone.stages = points
                .into_iter()
                .zip(channels)
                .zip(neighbors)
                .map(|((points, channels), neighbors)| StageConfig {
                    points,
                    channels,
                    neighbors,
                })
                .collect();
        }

        for (line, key, value) in &raw.head {
            match key.as_str() {
                "hidden" => cfg.model.head_hidden = parse_list(*line, value)?,
                "dropout" => cfg.model.head_dropout = parse_float(*line, value)?,
                "batch_norm" => cfg.model.head_batch_norm = parse_bool(*line, value)?,
                "condition_on_class" => cfg.model.condition_on_class = parse_bool(*line, value)?,
                other => return Err(cfg_err(*line, format!("unknown head key `{other}`"))),
            }
        }

        for (line, key, value) in &raw.train {
            let t = &mut cfg.train;
            match key.as_str() {
                "epochs" => t.epochs = parse_num(*line, value)?,
                "batch_size" => t.batch_size = parse_num(*line, value)?,
                "lr_max" => t.lr_max = parse_float(*line, value)?,
                "lr_min" => t.lr_min = parse_float(*line, value)?,
                "momentum" => t.momentum = parse_float(*line, value)?,
                "weight_decay" => t.weight_decay = parse_float(*line, value)?,
                "label_smoothing" => t.label_smoothing = parse_float(*line, value)?,
                "translate" => t.translate = parse_bool(*line, value)?,
                "translate_range" => t.translate_range = parse_float(*line, value)?,
                "rotate" => t.rotate = parse_bool(*line, value)?,
                "seed" => t.seed = parse_num(*line, value)? as u64,
                other => return Err(cfg_err(*line, format!("unknown train key `{other}`"))),
            }
        }

        let mut source: Option<String> = None;
        let mut dir_path: Option<PathBuf> = None;
        let mut syn = match &cfg.data {
            DataSettings::Synthetic { .. } => cfg.data.clone(),
            _ => unreachable!("defaults are synthetic"),
        };
        for (line, key, value) in &raw.data {
            match key.as_str() {
                "source" => source = Some(value.clone()),
                "path" => dir_path = Some(PathBuf::from(value)),
                "classes" => {
                    if let DataSettings::Synthetic { classes, .. } = &mut syn {
                        *classes = value
                            .split(',')
                            .map(|s| ShapeKind::parse(s.trim()))
                            .collect::<Result<Vec<_>>>()?;
                    }
                }
                "train_per_class" => {
                    if let DataSettings::Synthetic { train_per_class, .. } = &mut syn {
                        *train_per_class = parse_num(*line, value)?;
                    }
                }
                "test_per_class" => {
                    if let DataSettings::Synthetic { test_per_class, .. } = &mut syn {
                        *test_per_class = parse_num(*line, value)?;
                    }
                }
                "points" => {
                    if let DataSettings::Synthetic { points, .. } = &mut syn {
                        *points = parse_num(*line, value)?;
                    }
                }
                "noise" => {
                    if let DataSettings::Synthetic { noise, .. } = &mut syn {
                        *noise = parse_float(*line, value)?;
                    }
                }
                "rotate" => {
                    if let DataSettings::Synthetic { rotate, .. } = &mut syn {
                        *rotate = parse_bool(*line, value)?;
                    }
                }
                "scale_jitter" => {
                    if let DataSettings::Synthetic { scale_jitter, .. } = &mut syn {
                        *scale_jitter = parse_float(*line, value)?;
                    }
                }
                other => return Err(cfg_err(*line, format!("unknown data key `{other}`"))),
            }
        }
        cfg.data = match source.as_deref() {
            None | Some("synthetic") => syn,
            Some("dir") => DataSettings::Dir(
                dir_path.ok_or_else(|| cfg_err(1, "data source `dir` requires `path`"))?,
            ),
            Some(other) => return Err(cfg_err(1, format!("unknown data source `{other}`"))),
        };

        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_num(line: usize, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| cfg_err(line, format!("expected an integer, got `{v}`")))
}

fn parse_float(line: usize, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| cfg_err(line, format!("expected a number, got `{v}`")))
}

fn parse_bool(line: usize, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(cfg_err(line, format!("expected a boolean, got `{v}`"))),
    }
}

fn parse_list(line: usize, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| cfg_err(line, format!("bad list entry `{s}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        for cfg in [Config::desk_classification(), Config::desk_segmentation()] {
            let text = cfg.to_text();
            let parsed = Config::parse(&text).unwrap();
            assert_eq!(parsed, cfg);
        }
    }

    #[test]
    fn dir_source_round_trips() {
        let mut cfg = Config::desk_classification();
        cfg.data = DataSettings::Dir(PathBuf::from("/tmp/some/dataset"));
        let parsed = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let text = "[model]\ntask = classification\nbogus = 1\n";
        let err = Config::parse(text).unwrap_err();
        assert!(err.to_string().contains("config:3"), "got {err}");
    }

    #[test]
    fn keys_outside_sections_are_rejected() {
        let err = Config::parse("task = classification\n").unwrap_err();
        assert!(err.to_string().contains("outside"), "got {err}");
    }

    #[test]
    fn overrides_apply() {
        let text = "\
[model]
task = classification
stage_points = 24,12
stage_channels = 8,16
stage_neighbors = 4,4
single_res_dim = 16
multi_res_dim = 32
single_res_queries = 4
attention_heads = 2
stem_channels = 4

[train]
epochs = 3
seed = 42

[data]
source = synthetic
classes = sphere,box
train_per_class = 2
test_per_class = 1
points = 48
";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.model.backbone.stages.len(), 2);
        assert_eq!(cfg.model.backbone.stages[0].points, 24);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.seed, 42);
        match &cfg.data {
            DataSettings::Synthetic { classes, points, .. } => {
                assert_eq!(classes.len(), 2);
                assert_eq!(*points, 48);
            }
            _ => panic!("expected synthetic"),
        }
    }
}
