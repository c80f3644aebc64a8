//! Flat `key = value` experiment files. `#` starts a comment; blank lines are
//! ignored; unknown or repeated keys are errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thinconv::damage::PatternName;
use thinconv::sparsity::RegularizerMode;
use thinconv::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsifyMode {
    Finetune,
    Gradual,
}

impl FromStr for SparsifyMode {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "finetune" => Ok(SparsifyMode::Finetune),
            "gradual" => Ok(SparsifyMode::Gradual),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub arch: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_gamma: f32,
    pub lr_power: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// `None` trains or prunes without a sparsity term.
    pub regularizer: Option<RegularizerMode>,
    pub lambda: f32,
    pub theta: Option<f32>,
    pub pattern: Option<PatternName>,
    pub mode: SparsifyMode,
    pub tau: f64,
    pub epochs_reg: usize,
    pub epochs_ft: usize,
    pub delta: f64,
    pub epsilon: f32,
    pub step_fraction: f64,
    pub stall_epochs: usize,
    pub max_epochs: usize,
    pub split_seed: u64,
    pub bench_d: usize,
    pub bench_in_maps: usize,
    pub bench_out_maps: usize,
    pub bench_width: usize,
    pub bench_height: usize,
    pub bench_pad: usize,
    pub bench_stride: usize,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
    pub bench_calls: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data/mnist"),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: 0,
            test_limit: 0,
            output_dir: PathBuf::from("runs/out"),
            checkpoint: None,
            arch: "lenet".into(),
            seed: 0,
            epochs: 20,
            batch_size: 64,
            lr: 0.01,
            lr_gamma: 1e-4,
            lr_power: 0.75,
            momentum: 0.9,
            weight_decay: 5e-4,
            regularizer: None,
            lambda: 0.01,
            theta: None,
            pattern: None,
            mode: SparsifyMode::Finetune,
            tau: 0.05,
            epochs_reg: 10,
            epochs_ft: 10,
            delta: 0.01,
            epsilon: 0.1,
            step_fraction: 0.05,
            stall_epochs: 10,
            max_epochs: 0,
            split_seed: 0,
            bench_d: 5,
            bench_in_maps: 20,
            bench_out_maps: 50,
            bench_width: 12,
            bench_height: 12,
            bench_pad: 0,
            bench_stride: 1,
            bench_repeats: 100,
            bench_warmup: 5,
            bench_calls: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data_dir",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_limit",
    "test_limit",
    "output_dir",
    "checkpoint",
    "arch",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "lr_gamma",
    "lr_power",
    "momentum",
    "weight_decay",
    "regularizer",
    "lambda",
    "theta",
    "pattern",
    "mode",
    "tau",
    "epochs_reg",
    "epochs_ft",
    "delta",
    "epsilon",
    "step_fraction",
    "stall_epochs",
    "max_epochs",
    "split_seed",
    "bench_d",
    "bench_in_maps",
    "bench_out_maps",
    "bench_width",
    "bench_height",
    "bench_pad",
    "bench_stride",
    "bench_repeats",
    "bench_warmup",
    "bench_calls",
];

fn err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| err(key, format!("cannot parse `{value}`")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Parse a config file's text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_assignment(line).ok_or_else(|| {
                err(line, format!("line {}: expected `key = value`", n + 1))
            })?;
            if seen.contains(&key) {
                return Err(err(key, format!("line {}: key given twice", n + 1)));
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Read `path` (if any), apply `key=value` overrides, then validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| err("--config", format!("{}: {e}", p.display())))?;
                Self::parse_text(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for o in overrides {
            let (key, value) =
                split_assignment(o).ok_or_else(|| err(o, "override must look like key=value"))?;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "train_images" => self.train_images = path(value),
            "train_labels" => self.train_labels = path(value),
            "test_images" => self.test_images = path(value),
            "test_labels" => self.test_labels = path(value),
            "train_limit" => self.train_limit = parse(key, value)?,
            "test_limit" => self.test_limit = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = path(value),
            "arch" => self.arch = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_gamma" => self.lr_gamma = parse(key, value)?,
            "lr_power" => self.lr_power = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "regularizer" => {
                self.regularizer = match value {
                    "none" | "" => None,
                    v => Some(v.parse().map_err(|_| {
                        err(key, format!("`{v}` is not one of none, l21, truncated_l21, l1"))
                    })?),
                }
            }
            "lambda" => self.lambda = parse(key, value)?,
            "theta" => {
                self.theta = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "pattern" => {
                self.pattern = match value {
                    "" | "none" => None,
                    v => Some(v.parse().map_err(|_| err(key, format!("unknown pattern `{v}`")))?),
                }
            }
            "mode" => {
                self.mode = value
                    .parse()
                    .map_err(|_| err(key, format!("`{value}` is not one of finetune, gradual")))?
            }
            "tau" => self.tau = parse(key, value)?,
            "epochs_reg" => self.epochs_reg = parse(key, value)?,
            "epochs_ft" => self.epochs_ft = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "step_fraction" => self.step_fraction = parse(key, value)?,
            "stall_epochs" => self.stall_epochs = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "bench_d" => self.bench_d = parse(key, value)?,
            "bench_in_maps" => self.bench_in_maps = parse(key, value)?,
            "bench_out_maps" => self.bench_out_maps = parse(key, value)?,
            "bench_width" => self.bench_width = parse(key, value)?,
            "bench_height" => self.bench_height = parse(key, value)?,
            "bench_pad" => self.bench_pad = parse(key, value)?,
            "bench_stride" => self.bench_stride = parse(key, value)?,
            "bench_repeats" => self.bench_repeats = parse(key, value)?,
            "bench_warmup" => self.bench_warmup = parse(key, value)?,
            "bench_calls" => self.bench_calls = parse(key, value)?,
            other => return Err(err(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(err(key, msg)) };
        check(self.arch == "lenet", "arch", "only `lenet` is available")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.lr_gamma >= 0.0, "lr_gamma", "must be >= 0")?;
        check(self.lr_power >= 0.0, "lr_power", "must be >= 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be >= 0")?;
        if let Some(t) = self.theta {
            check(t >= 0.0, "theta", "must be >= 0")?;
        }
        check(self.tau > 0.0 && self.tau <= 1.0, "tau", "must lie in (0, 1]")?;
        check(self.delta >= 0.0, "delta", "must be >= 0")?;
        check(self.epsilon >= 0.0, "epsilon", "must be >= 0")?;
        check(
            self.step_fraction > 0.0 && self.step_fraction <= 1.0,
            "step_fraction",
            "must lie in (0, 1]",
        )?;
        check(self.stall_epochs > 0, "stall_epochs", "must be positive")?;
        check(self.bench_d % 2 == 1, "bench_d", "must be odd")?;
        check(self.bench_stride > 0, "bench_stride", "must be positive")?;
        check(self.bench_repeats >= 2, "bench_repeats", "must be at least 2")?;
        check(self.bench_calls > 0, "bench_calls", "must be positive")?;
        Ok(())
    }

    fn data_file(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.data_dir.join(name))
    }

    pub fn train_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.data_file(&self.train_images, "train-images.idx3-ubyte"),
            self.data_file(&self.train_labels, "train-labels.idx1-ubyte"),
        )
    }

    pub fn test_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.data_file(&self.test_images, "t10k-images.idx3-ubyte"),
            self.data_file(&self.test_labels, "t10k-labels.idx1-ubyte"),
        )
    }
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then(|| (k, v.trim()))
}
