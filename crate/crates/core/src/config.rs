//! Run configuration: flat `key = value` lines with dotted keys.
//!
//! ```text
//! # desk-scale run
//! model.input = 1x32x32
//! model.classes = 4
//! model.base = conv:8:3:1, maxpool:2:2
//! model.block2 = res:16:3:2:1
//! ensemble.students = 3
//! loss.temperature = 2
//! train.lr_drops = 0.5:0.1, 0.75:0.01
//! run.seeds = 1,2,3,4,5
//! ```
//!
//! Layer lists use `conv:OUT:K:S`, `res:OUT:K:S:REPEAT`, `maxpool:W:S` and
//! `gap`; input channels follow from the preceding layer.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::SynthParams;
use crate::ensemble::ArchitectureSpec;
use crate::layers::{BlockSpec, LayerKind, LayerSpec};
use crate::losses::LossWeights;
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Error, PartialEq)]
pub struct ConfigError {
    /// 1-based line the problem is attributed to, if any.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

fn err(line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synth(SynthParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub architecture: ArchitectureSpec,
    pub students: usize,
    pub teacher_weights: Option<Vec<f64>>,
    /// Training hyperparameters; `seed` is overridden per run.
    pub train: TrainConfig,
    pub data: DataSource,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub threads: usize,
}

impl RunConfig {
    pub fn weights(&self) -> &LossWeights {
        &self.train.weights
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let a = &self.architecture;
        let w = &self.train.weights;
        let t = &self.train;
        let mut out = String::new();
        let [c, h, wd] = a.input_shape;
        let _ = writeln!(out, "model.input = {c}x{h}x{wd}");
        let _ = writeln!(out, "model.classes = {}", a.num_classes);
        let _ = writeln!(out, "model.base = {}", format_layers(&a.blocks[0].layers));
        for b in 1..4 {
            let _ = writeln!(out, "model.block{} = {}", b + 1, format_layers(&a.blocks[b].layers));
        }
        let _ = writeln!(out, "ensemble.students = {}", self.students);
        if let Some(tw) = &self.teacher_weights {
            let _ = writeln!(out, "ensemble.teacher_weights = {}", join(tw));
        }
        let _ = writeln!(out, "loss.alpha = {}", w.alpha);
        let _ = writeln!(out, "loss.beta = {}", w.beta);
        let _ = writeln!(out, "loss.gamma = {}", w.gamma);
        let _ = writeln!(out, "loss.temperature = {}", w.temperature);
        let _ = writeln!(out, "loss.kd_teacher_grad = {}", w.kd_teacher_grad);
        let _ = writeln!(out, "loss.kd_t2_scale = {}", w.kd_t2_scale);
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.lr = {}", t.base_lr);
        let _ = writeln!(out, "train.momentum = {}", t.momentum);
        let _ = writeln!(out, "train.nesterov = {}", t.nesterov);
        let drops: Vec<String> = t.lr_drops.iter().map(|(f, m)| format!("{f}:{m}")).collect();
        let _ = writeln!(out, "train.lr_drops = {}", drops.join(", "));
        let _ = writeln!(out, "train.mode = {}", t.mode.as_str());
        match &self.data {
            DataSource::File(p) => {
                let _ = writeln!(out, "data.path = {}", p.display());
            }
            DataSource::Synth(s) => {
                let _ = writeln!(out, "data.synth.classes = {}", s.classes);
                let _ = writeln!(out, "data.synth.per_class = {}", s.train_per_class);
                let _ = writeln!(out, "data.synth.test_per_class = {}", s.test_per_class);
                let _ = writeln!(out, "data.synth.size = {}x{}", s.height, s.width);
                let _ = writeln!(out, "data.synth.seed = {}", s.seed);
                let _ = writeln!(out, "data.synth.noise = {}", s.noise);
                let _ = writeln!(out, "data.synth.phase_jitter = {}", s.phase_jitter);
            }
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "run.seeds = {}", seeds.join(","));
        let _ = writeln!(out, "run.out = {}", self.out.display());
        let _ = writeln!(out, "run.threads = {}", self.threads);
        out
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Architecture used when the config leaves `model.*` unset: a small
/// residual network for single-channel 32×32 images.
pub fn default_architecture() -> ArchitectureSpec {
    ArchitectureSpec {
        input_shape: [1, 32, 32],
        num_classes: 4,
        blocks: vec![
            BlockSpec::new(1, vec![LayerSpec::conv(1, 8, 3, 1), LayerSpec::max_pool(8, 2, 2)]),
            BlockSpec::new(2, vec![LayerSpec::residual(8, 16, 3, 2, 1)]),
            BlockSpec::new(3, vec![LayerSpec::residual(16, 32, 3, 2, 1)]),
            BlockSpec::new(4, vec![LayerSpec::residual(32, 64, 3, 2, 1)]),
        ],
        classifier: LayerSpec::linear(64, 4),
    }
}

/// Renders layers in the config syntax.
pub fn format_layers(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv => format!("conv:{}:{}:{}", l.out_channels, l.kernel, l.stride),
            LayerKind::Residual => format!("res:{}:{}:{}:{}", l.out_channels, l.kernel, l.stride, l.repeat),
            LayerKind::MaxPool => format!("maxpool:{}:{}", l.kernel, l.stride),
            LayerKind::GlobalAvgPool => "gap".to_string(),
            LayerKind::Linear => format!("linear:{}", l.out_channels),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Parses a comma-separated layer list whose first layer reads
/// `in_channels` channels.
pub fn parse_layers(text: &str, in_channels: usize) -> Result<Vec<LayerSpec>, String> {
    let mut channels = in_channels;
    let mut layers = Vec::new();
    for item in text.split(',').map(str::trim) {
        if item.is_empty() {
            return Err("empty layer entry".into());
        }
        let mut parts = item.split(':');
        let kind = parts.next().unwrap_or_default();
        let nums = parts
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad number {p:?} in layer {item:?}")))
            .collect::<Result<Vec<_>, _>>()?;
        let arity = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(format!("layer {item:?} needs {n} numbers, got {}", nums.len()))
            }
        };
        let spec = match kind {
            "conv" => {
                arity(3)?;
                LayerSpec::conv(channels, nums[0], nums[1], nums[2])
            }
            "res" => {
                arity(4)?;
                LayerSpec::residual(channels, nums[0], nums[1], nums[2], nums[3])
            }
            "maxpool" => {
                arity(2)?;
                LayerSpec::max_pool(channels, nums[0], nums[1])
            }
            "gap" => {
                arity(0)?;
                LayerSpec::global_avg_pool(channels)
            }
            other => return Err(format!("unknown layer kind {other:?}")),
        };
        spec.validate().map_err(|e| e.to_string())?;
        channels = spec.out_channels;
        layers.push(spec);
    }
    Ok(layers)
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_extent(v: &str, parts: usize) -> Result<Vec<usize>, String> {
    let out: Vec<usize> = v.split('x').map(|s| parse_num(s.trim())).collect::<Result<_, _>>()?;
    if out.len() != parts {
        return Err(format!("expected {parts} extents separated by 'x', got {v:?}"));
    }
    Ok(out)
}

const KEYS: &[&str] = &[
    "model.input",
    "model.classes",
    "model.base",
    "model.block2",
    "model.block3",
    "model.block4",
    "ensemble.students",
    "ensemble.teacher_weights",
    "loss.alpha",
    "loss.beta",
    "loss.gamma",
    "loss.temperature",
    "loss.kd_teacher_grad",
    "loss.kd_t2_scale",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.nesterov",
    "train.lr_drops",
    "train.mode",
    "data.path",
    "data.synth.classes",
    "data.synth.per_class",
    "data.synth.test_per_class",
    "data.synth.size",
    "data.synth.seed",
    "data.synth.noise",
    "data.synth.phase_jitter",
    "run.seeds",
    "run.out",
    "run.threads",
];

/// Parses and validates a config. Relative `data.path` values are kept
/// as written; see [`load_config`] for file-relative resolution.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries: HashMap<&str, (usize, &str)> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(Some(line), format!("expected `key = value`, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| err(Some(line), format!("unknown key {key:?}")))?;
        if let Some((first, _)) = entries.insert(known, (line, value)) {
            return Err(err(Some(line), format!("key {key:?} already set on line {first}")));
        }
    }
    let line_of = |k: &str| entries.get(k).map(|e| e.0);
    let get = |k: &str| entries.get(k).map(|e| e.1);
    fn field<T>(entries: &HashMap<&str, (usize, &str)>, key: &str, default: T, f: impl Fn(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        match entries.get(key) {
            Some(&(line, v)) => f(v).map_err(|m| err(Some(line), format!("{key}: {m}"))),
            None => Ok(default),
        }
    }

    let defaults = default_architecture();
    let input = field(&entries, "model.input", defaults.input_shape.to_vec(), |v| parse_extent(v, 3))?;
    let input_shape = [input[0], input[1], input[2]];
    let num_classes = field(&entries, "model.classes", defaults.num_classes, parse_num)?;
    let mut blocks = Vec::with_capacity(4);
    let mut channels = input_shape[0];
    for (b, key) in ["model.base", "model.block2", "model.block3", "model.block4"].iter().enumerate() {
        let layers = match get(key) {
            Some(v) => parse_layers(v, channels).map_err(|m| err(line_of(key), format!("{key}: {m}")))?,
            None => {
                // default layers re-chained onto whatever precedes them
                let text = format_layers(&defaults.blocks[b].layers);
                parse_layers(&text, channels).map_err(|m| err(None, format!("{key}: {m}")))?
            }
        };
        channels = layers.last().map_or(channels, |l| l.out_channels);
        blocks.push(BlockSpec::new(b + 1, layers));
    }
    let architecture = ArchitectureSpec {
        input_shape,
        num_classes,
        blocks,
        classifier: LayerSpec::linear(channels, num_classes),
    };
    let model_line = ["model.input", "model.classes", "model.base", "model.block2", "model.block3", "model.block4"]
        .iter()
        .filter_map(|k| line_of(k))
        .max();
    architecture.validate().map_err(|e| err(model_line, e.to_string()))?;

    let students = field(&entries, "ensemble.students", 5, parse_num)?;
    if students < 2 {
        return Err(err(line_of("ensemble.students"), "ensemble.students must be at least 2"));
    }
    let teacher_weights = field(&entries, "ensemble.teacher_weights", None, |v| parse_list(v).map(Some))?;
    if let Some(tw) = &teacher_weights {
        let l = line_of("ensemble.teacher_weights");
        if tw.len() != students {
            return Err(err(l, format!("{} teacher weights for {students} students", tw.len())));
        }
        if tw.iter().any(|w| !(*w >= 0.0)) || (tw.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(err(l, "teacher weights must be non-negative and sum to 1"));
        }
    }

    let d = LossWeights::default();
    let weights = LossWeights {
        alpha: field(&entries, "loss.alpha", d.alpha, parse_num)?,
        beta: field(&entries, "loss.beta", d.beta, parse_num)?,
        gamma: field(&entries, "loss.gamma", d.gamma, parse_num)?,
        temperature: field(&entries, "loss.temperature", d.temperature, parse_num)?,
        kd_teacher_grad: field(&entries, "loss.kd_teacher_grad", d.kd_teacher_grad, parse_bool)?,
        kd_t2_scale: field(&entries, "loss.kd_t2_scale", d.kd_t2_scale, parse_bool)?,
    };
    let loss_line = ["loss.alpha", "loss.beta", "loss.gamma", "loss.temperature"]
        .iter()
        .filter_map(|k| line_of(k))
        .max();
    weights.validate().map_err(|e| err(loss_line, e.to_string()))?;

    let t = TrainConfig::default();
    let train = TrainConfig {
        epochs: field(&entries, "train.epochs", t.epochs, parse_num)?,
        batch_size: field(&entries, "train.batch_size", t.batch_size, parse_num)?,
        base_lr: field(&entries, "train.lr", t.base_lr, parse_num)?,
        momentum: field(&entries, "train.momentum", t.momentum, parse_num)?,
        nesterov: field(&entries, "train.nesterov", t.nesterov, parse_bool)?,
        lr_drops: field(&entries, "train.lr_drops", t.lr_drops.clone(), |v| {
            if v.is_empty() || v == "none" {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|pair| {
                    let (f, m) = pair.trim().split_once(':').ok_or_else(|| format!("expected fraction:multiplier, got {pair:?}"))?;
                    Ok((parse_num(f.trim())?, parse_num(m.trim())?))
                })
                .collect()
        })?,
        weights,
        seed: 0,
        mode: field(&entries, "train.mode", t.mode, |v| match v {
            "ensemble" => Ok(TrainMode::Ensemble),
            "baseline" => Ok(TrainMode::Baseline),
            _ => Err(format!("expected ensemble or baseline, got {v:?}")),
        })?,
    };
    let train_line = ["train.epochs", "train.batch_size", "train.lr", "train.momentum", "train.lr_drops"]
        .iter()
        .filter_map(|k| line_of(k))
        .max();
    train.validate().map_err(|e| err(train_line, e.to_string()))?;

    let synth_keys = KEYS.iter().filter(|k| k.starts_with("data.synth."));
    let data = match get("data.path") {
        Some(p) => {
            if let Some(k) = synth_keys.clone().find(|k| entries.contains_key(**k)) {
                return Err(err(line_of(k), "data.path and data.synth.* are mutually exclusive"));
            }
            DataSource::File(PathBuf::from(p))
        }
        None => {
            let s = SynthParams::new(num_classes, 400, input_shape[1], input_shape[2], 0);
            let size = field(&entries, "data.synth.size", vec![s.height, s.width], |v| parse_extent(v, 2))?;
            let per_class = field(&entries, "data.synth.per_class", s.train_per_class, parse_num)?;
            let p = SynthParams {
                classes: field(&entries, "data.synth.classes", s.classes, parse_num)?,
                train_per_class: per_class,
                test_per_class: field(&entries, "data.synth.test_per_class", (per_class / 2).max(1), parse_num)?,
                height: size[0],
                width: size[1],
                seed: field(&entries, "data.synth.seed", s.seed, parse_num)?,
                noise: field(&entries, "data.synth.noise", s.noise, parse_num)?,
                phase_jitter: field(&entries, "data.synth.phase_jitter", s.phase_jitter, parse_num)?,
            };
            let synth_line = synth_keys.filter_map(|k| line_of(k)).max();
            if p.classes != num_classes {
                return Err(err(synth_line, format!("synthetic data has {} classes, model has {num_classes}", p.classes)));
            }
            if input_shape != [1, p.height, p.width] {
                return Err(err(
                    synth_line.or(model_line),
                    format!("synthetic images are 1x{}x{}, model input is {input_shape:?}", p.height, p.width),
                ));
            }
            if p.train_per_class == 0 || p.test_per_class == 0 || !(p.noise >= 0.0) {
                return Err(err(synth_line, "synthetic sample counts must be positive and noise non-negative"));
            }
            DataSource::Synth(p)
        }
    };

    let seeds = field(&entries, "run.seeds", vec![1], parse_list)?;
    if seeds.is_empty() {
        return Err(err(line_of("run.seeds"), "run.seeds is empty"));
    }
    let threads = field(&entries, "run.threads", 1, parse_num)?;
    if threads == 0 {
        return Err(err(line_of("run.threads"), "run.threads must be at least 1"));
    }
    Ok(RunConfig {
        architecture,
        students,
        teacher_weights,
        train,
        data,
        seeds,
        out: PathBuf::from(get("run.out").unwrap_or("runs/default")),
        threads,
    })
}

/// Reads and parses a config file; a relative `data.path` is resolved
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err(None, format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let DataSource::File(p) = &cfg.data {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data = DataSource::File(dir.join(p));
            }
        }
    }
    Ok(cfg)
}
