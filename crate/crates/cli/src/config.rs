//! Run configuration: a flat `key = value` file plus CLI overrides.
//!
//! Format: one `key = value` per line, `#` starts a comment, blank lines are
//! ignored, keys are case-sensitive. Unknown keys are errors so typos fail
//! loudly. Lists are comma-separated; epsilons accept `a/b` fractions
//! (`8/255`); backbone blocks are `CHANNELSxCONVS` (`32x2`); pooling entries
//! are `WINDOW/STRIDE` (`2/2`).
//!
//! ```text
//! # dataset
//! dataset             = synthetic | cifar10
//! data_dir            = data/cifar-10-batches-bin   # cifar10 only
//! synthetic_count     = 500      # training-pool images (synthetic only)
//! synthetic_test_count= 100
//! synthetic_size      = 32
//! synthetic_seed      = 9000
//! subset_per_class    = 0        # cap train images per class, 0 = all
//! val_fraction        = 0.1
//! split_seed          = 22
//! # model
//! backbone_blocks     = 32x2,64x2,128x2
//! fc_widths           = 256
//! classes             = 10
//! sbfm                = true
//! sbfm_layers         = 3
//! sbfm_threshold      = 0.8
//! sbfm_channels       = 8
//! sbfm_stride         = 1
//! sbfm_pooling        = 2/2,2/2,2/2
//! freeze_sbfm         = false
//! # training
//! epochs              = 30
//! batch_size          = 64
//! learning_rate       = 0.01
//! momentum            = 0.9
//! weight_decay        = 0.0005
//! lr_step_every       = 0        # 0 = constant learning rate
//! lr_step_factor      = 0.1
//! seeds               = 1,2,3,4,5
//! # attack
//! epsilons            = 0.1/255,0.5/255,1/255,2/255,3/255,5/255,8/255
//! attack_subset       = 0        # cap on attacked test items, 0 = all
//! checkpoints         =          # attack: comma-separated checkpoint paths
//! # sweep
//! sweep_l             = 1,2,3
//! sweep_t             = 0.4,0.6,0.8
//! # output
//! out_dir             = runs/out
//! ```

use std::path::{Path, PathBuf};

use sbfm_core::model::{BackboneConfig, LrStep, ModelConfig, TrainConfig};
use sbfm_core::optim::OptimizerConfig;
use sbfm_core::sbfm::SbfmConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub synthetic_count: usize,
    pub synthetic_test_count: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
    pub subset_per_class: usize,
    pub val_fraction: f64,
    pub split_seed: u64,

    pub backbone_blocks: Vec<(usize, usize)>,
    pub fc_widths: Vec<usize>,
    pub classes: usize,
    pub sbfm: bool,
    pub sbfm_layers: usize,
    pub sbfm_threshold: f64,
    pub sbfm_channels: usize,
    pub sbfm_stride: usize,
    pub sbfm_pooling: Vec<(usize, usize)>,
    pub freeze_sbfm: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step_every: usize,
    pub lr_step_factor: f64,
    pub seeds: Vec<u64>,

    pub epsilons: Vec<f64>,
    pub attack_subset: usize,
    pub checkpoints: Vec<PathBuf>,

    pub sweep_l: Vec<usize>,
    pub sweep_t: Vec<f64>,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            data_dir: PathBuf::from("data/cifar-10-batches-bin"),
            synthetic_count: 500,
            synthetic_test_count: 100,
            synthetic_size: 32,
            synthetic_seed: 9000,
            subset_per_class: 0,
            val_fraction: 0.1,
            split_seed: 22,
            backbone_blocks: vec![(32, 2), (64, 2), (128, 2)],
            fc_widths: vec![256],
            classes: 10,
            sbfm: true,
            sbfm_layers: 3,
            sbfm_threshold: 0.8,
            sbfm_channels: 8,
            sbfm_stride: 1,
            sbfm_pooling: vec![(2, 2), (2, 2), (2, 2)],
            freeze_sbfm: false,
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_step_every: 0,
            lr_step_factor: 0.1,
            seeds: vec![1, 2, 3, 4, 5],
            epsilons: sbfm_core::attack::default_epsilons(),
            attack_subset: 0,
            checkpoints: Vec::new(),
            sweep_l: vec![1, 2, 3],
            sweep_t: vec![0.4, 0.6, 0.8],
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::config(format!("config key `{key}`: `{value}` {why}"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, CliError> {
    parse_fraction(v).ok_or_else(|| bad(key, v, "is not a number"))
}

/// Accepts plain floats and `a/b` fractions.
fn parse_fraction(v: &str) -> Option<f64> {
    if let Some((num, den)) = v.split_once('/') {
        let n: f64 = num.trim().parse().ok()?;
        let d: f64 = den.trim().parse().ok()?;
        if d == 0.0 {
            return None;
        }
        Some(n / d)
    } else {
        v.trim().parse().ok()
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize, CliError> {
    v.parse()
        .map_err(|_| bad(key, v, "is not a nonnegative integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64, CliError> {
    v.parse()
        .map_err(|_| bad(key, v, "is not a nonnegative integer"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "is not a boolean")),
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

pub fn parse_seed_list(v: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Vec<u64> = split_list(v)
        .map(|s| parse_u64("seeds", s))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::config("seed list must be nonempty"));
    }
    Ok(seeds)
}

pub fn parse_epsilon_list(v: &str) -> Result<Vec<f64>, CliError> {
    let eps: Vec<f64> = split_list(v)
        .map(|s| parse_f64("epsilons", s))
        .collect::<Result<_, _>>()?;
    if eps.is_empty() {
        return Err(CliError::config("epsilon list must be nonempty"));
    }
    if eps.iter().any(|&e| e < 0.0) {
        return Err(CliError::config("epsilons must be nonnegative"));
    }
    Ok(eps)
}

/// `CHANNELSxCONVS` pairs, e.g. `32x2`.
fn parse_blocks(key: &str, v: &str) -> Result<Vec<(usize, usize)>, CliError> {
    split_list(v)
        .map(|item| {
            let (c, n) = item
                .split_once('x')
                .ok_or_else(|| bad(key, item, "is not CHANNELSxCONVS"))?;
            Ok((parse_usize(key, c)?, parse_usize(key, n)?))
        })
        .collect()
}

/// `WINDOW/STRIDE` pairs, e.g. `2/2`.
fn parse_pooling(key: &str, v: &str) -> Result<Vec<(usize, usize)>, CliError> {
    split_list(v)
        .map(|item| {
            let (w, s) = item
                .split_once('/')
                .ok_or_else(|| bad(key, item, "is not WINDOW/STRIDE"))?;
            Ok((parse_usize(key, w)?, parse_usize(key, s)?))
        })
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        let mut explicit_pooling = false;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    line_no + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dataset" => {
                    cfg.dataset = match value {
                        "synthetic" => DatasetKind::Synthetic,
                        "cifar10" => DatasetKind::Cifar10,
                        _ => return Err(bad(key, value, "must be synthetic or cifar10")),
                    }
                }
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "synthetic_count" => cfg.synthetic_count = parse_usize(key, value)?,
                "synthetic_test_count" => cfg.synthetic_test_count = parse_usize(key, value)?,
                "synthetic_size" => cfg.synthetic_size = parse_usize(key, value)?,
                "synthetic_seed" => cfg.synthetic_seed = parse_u64(key, value)?,
                "subset_per_class" => cfg.subset_per_class = parse_usize(key, value)?,
                "val_fraction" => cfg.val_fraction = parse_f64(key, value)?,
                "split_seed" => cfg.split_seed = parse_u64(key, value)?,
                "backbone_blocks" => cfg.backbone_blocks = parse_blocks(key, value)?,
                "fc_widths" => {
                    cfg.fc_widths = split_list(value)
                        .map(|s| parse_usize(key, s))
                        .collect::<Result<_, _>>()?
                }
                "classes" => cfg.classes = parse_usize(key, value)?,
                "sbfm" => cfg.sbfm = parse_bool(key, value)?,
                "sbfm_layers" => cfg.sbfm_layers = parse_usize(key, value)?,
                "sbfm_threshold" => cfg.sbfm_threshold = parse_f64(key, value)?,
                "sbfm_channels" => cfg.sbfm_channels = parse_usize(key, value)?,
                "sbfm_stride" => cfg.sbfm_stride = parse_usize(key, value)?,
                "sbfm_pooling" => {
                    cfg.sbfm_pooling = parse_pooling(key, value)?;
                    explicit_pooling = true;
                }
                "freeze_sbfm" => cfg.freeze_sbfm = parse_bool(key, value)?,
                "epochs" => cfg.epochs = parse_usize(key, value)?,
                "batch_size" => cfg.batch_size = parse_usize(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_f64(key, value)?,
                "momentum" => cfg.momentum = parse_f64(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_f64(key, value)?,
                "lr_step_every" => cfg.lr_step_every = parse_usize(key, value)?,
                "lr_step_factor" => cfg.lr_step_factor = parse_f64(key, value)?,
                "seeds" => cfg.seeds = parse_seed_list(value)?,
                "epsilons" => cfg.epsilons = parse_epsilon_list(value)?,
                "attack_subset" => cfg.attack_subset = parse_usize(key, value)?,
                "checkpoints" => cfg.checkpoints = split_list(value).map(PathBuf::from).collect(),
                "sweep_l" => {
                    cfg.sweep_l = split_list(value)
                        .map(|s| parse_usize(key, s))
                        .collect::<Result<_, _>>()?
                }
                "sweep_t" => {
                    cfg.sweep_t = split_list(value)
                        .map(|s| parse_f64(key, s))
                        .collect::<Result<_, _>>()?
                }
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => return Err(CliError::config(format!("unknown config key `{key}`"))),
            }
        }
        if !explicit_pooling {
            cfg.sbfm_pooling = vec![(2, 2); cfg.sbfm_layers];
        }
        Ok(cfg)
    }

    /// Image geometry implied by the dataset settings.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self.dataset {
            DatasetKind::Synthetic => (3, self.synthetic_size, self.synthetic_size),
            DatasetKind::Cifar10 => (3, 32, 32),
        }
    }

    pub fn sbfm_config(&self) -> SbfmConfig {
        SbfmConfig {
            layers: self.sbfm_layers,
            threshold: self.sbfm_threshold,
            channels_per_direction: self.sbfm_channels,
            kernel_size: 3,
            pooling: self.sbfm_pooling.clone(),
            stride: self.sbfm_stride,
            frozen: self.freeze_sbfm,
        }
    }

    /// The model this config describes (`sbfm = false` gives the baseline).
    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.sbfm.then_some((self.sbfm_layers, self.sbfm_threshold)))
    }

    /// As [`model_config`](Self::model_config) with `(l, t)` overridden, for
    /// sweep cells.
    pub fn model_config_for(&self, sbfm_lt: Option<(usize, f64)>) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                blocks: self.backbone_blocks.clone(),
                fc_widths: self.fc_widths.clone(),
                input_shape: self.input_shape(),
                classes: self.classes,
            },
            sbfm: sbfm_lt.map(|(l, t)| {
                let mut pooling = self.sbfm_pooling.clone();
                pooling.resize(l, *pooling.last().unwrap_or(&(2, 2)));
                SbfmConfig {
                    layers: l,
                    threshold: t,
                    channels_per_direction: self.sbfm_channels,
                    kernel_size: 3,
                    pooling,
                    stride: self.sbfm_stride,
                    frozen: self.freeze_sbfm,
                }
            }),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            lr_step: (self.lr_step_every > 0).then_some(LrStep {
                every: self.lr_step_every,
                factor: self.lr_step_factor,
            }),
            seed,
        }
    }
}
