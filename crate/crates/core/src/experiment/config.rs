//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. Every key can also be applied programmatically with
//! [`RunConfig::set`], which is how command-line overrides work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::data::{ChannelStats, CifarFormat};
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::sata::{SataConfig, SuppressionScale, ThresholdMode};
use crate::vit::ViTConfig;

/// Environment variable consulted when no data directory is configured.
pub const DATA_DIR_ENV: &str = "SATA_DATA_DIR";

/// Default `lr2` for CIFAR-100; every other dataset defaults to `1e-3`.
pub const CIFAR100_LR2: f64 = 7e-5;
pub const DEFAULT_LR2: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
    TinyImageNet,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::TinyImageNet => "tiny-imagenet",
        }
    }

    pub fn format(self) -> Option<CifarFormat> {
        match self {
            Self::Synthetic => None,
            Self::Cifar10 => Some(CifarFormat::CIFAR10),
            Self::Cifar100 => Some(CifarFormat::CIFAR100),
            Self::TinyImageNet => Some(CifarFormat::TINY_IMAGENET),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synthetic" => Self::Synthetic,
            "cifar10" => Self::Cifar10,
            "cifar100" => Self::Cifar100,
            "tiny-imagenet" | "tinyimagenet" => Self::TinyImageNet,
            _ => return Err(Error::Config(format!("unknown dataset `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub kind: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_classes: usize,
    pub synthetic_image_size: usize,
    /// Seed for synthetic data and subset selection, independent of the
    /// training seed.
    pub data_seed: u64,
    pub subset_classes: Option<Vec<usize>>,
    pub subset_per_class: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Cifar100,
            data_dir: None,
            synthetic_train: 200,
            synthetic_val: 100,
            synthetic_classes: 2,
            synthetic_image_size: 16,
            data_seed: 1234,
            subset_classes: None,
            subset_per_class: 500,
        }
    }
}

impl DataSpec {
    /// The configured directory, else `$SATA_DATA_DIR`.
    pub fn resolve_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
            _ => Err(Error::Config(format!(
                "dataset {} needs data_dir (or {DATA_DIR_ENV})",
                self.kind.name()
            ))),
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub layer_norm_eps: f64,
    /// Softmax temperature multiplier on top of `1/√D_h`.
    pub temperature: f64,
    pub lsa: bool,
    pub lsa_learnable_temperature: bool,

    pub sata: bool,
    pub sata_mode: ThresholdMode,
    pub t: f64,
    pub s: f64,
    pub s_learnable: bool,
    pub renormalize: bool,
    pub clamp_s: bool,

    pub lr1: f64,
    /// `None` picks the per-dataset default.
    pub lr2: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,

    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub data: DataSpec,
    pub out_dir: Option<PathBuf>,
    /// Per-channel constants; computed from the training split when absent.
    pub normalization: Option<ChannelStats>,

    pub grid_s: Vec<f64>,
    pub grid_t: Vec<f64>,

    pub checkpoint: Option<PathBuf>,
    pub attn_threshold: f64,
    pub attn_bin_width: f64,
    pub attn_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 192,
            depth: 9,
            num_heads: 12,
            mlp_ratio: 2.0,
            layer_norm_eps: 1e-6,
            temperature: 1.0,
            lsa: false,
            lsa_learnable_temperature: false,
            sata: true,
            sata_mode: ThresholdMode::Relative,
            t: 0.1,
            s: 0.5,
            s_learnable: true,
            renormalize: false,
            clamp_s: false,
            lr1: 3e-3,
            lr2: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            schedule: Schedule::Constant,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            augment: true,
            data: DataSpec::default(),
            out_dir: None,
            normalization: None,
            grid_s: vec![1.0, 0.75, 0.5, 0.25, 0.1, 0.0],
            grid_t: vec![0.1, 0.05, 0.025, 0.01, 0.0],
            checkpoint: None,
            attn_threshold: 0.01,
            attn_bin_width: 0.005,
            attn_images: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for {key}, expected on/off"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "patch_size" => self.patch_size = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "lsa" => self.lsa = parse_bool(key, value)?,
            "lsa_learnable_temperature" => self.lsa_learnable_temperature = parse_bool(key, value)?,
            "sata" => self.sata = parse_bool(key, value)?,
            "sata_mode" => {
                self.sata_mode = match value {
                    "relative" => ThresholdMode::Relative,
                    "absolute" => ThresholdMode::Absolute,
                    _ => return Err(Error::Config(format!("unknown sata_mode `{value}`"))),
                }
            }
            "t" => self.t = parse(key, value)?,
            "s" => self.s = parse(key, value)?,
            "s_learnable" => self.s_learnable = parse_bool(key, value)?,
            "renormalize" => self.renormalize = parse_bool(key, value)?,
            "clamp_s" => self.clamp_s = parse_bool(key, value)?,
            "lr1" => self.lr1 = parse(key, value)?,
            "lr2" => self.lr2 = Some(parse(key, value)?),
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "constant" => Schedule::Constant,
                    "cosine" => Schedule::Cosine,
                    _ => return Err(Error::Config(format!("unknown schedule `{value}`"))),
                }
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "dataset" => self.data.kind = value.parse()?,
            "data_dir" => self.data.data_dir = Some(PathBuf::from(value)),
            "synthetic_train" => self.data.synthetic_train = parse(key, value)?,
            "synthetic_val" => self.data.synthetic_val = parse(key, value)?,
            "synthetic_classes" => self.data.synthetic_classes = parse(key, value)?,
            "synthetic_image_size" => self.data.synthetic_image_size = parse(key, value)?,
            "data_seed" => self.data.data_seed = parse(key, value)?,
            "subset_classes" => self.data.subset_classes = Some(parse_list(key, value)?),
            "subset_per_class" => self.data.subset_per_class = parse(key, value)?,
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "norm_mean" | "norm_std" => {
                let values: Vec<f64> = parse_list(key, value)?;
                let stats = self.normalization.get_or_insert_with(|| ChannelStats {
                    mean: vec![0.0; values.len()],
                    std: vec![1.0; values.len()],
                });
                if key == "norm_mean" {
                    stats.mean = values;
                } else {
                    stats.std = values;
                }
            }
            "grid_s" => self.grid_s = parse_list(key, value)?,
            "grid_t" => self.grid_t = parse_list(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "attn_threshold" => self.attn_threshold = parse(key, value)?,
            "attn_bin_width" => self.attn_bin_width = parse(key, value)?,
            "attn_images" => self.attn_images = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn lr2(&self) -> f64 {
        self.lr2.unwrap_or(match self.data.kind {
            DatasetKind::Cifar100 => CIFAR100_LR2,
            _ => DEFAULT_LR2,
        })
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr1: self.lr1,
            lr2: self.lr2(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn sata_config(&self) -> SataConfig {
        SataConfig {
            mode: self.sata_mode,
            t: self.t,
            scale: if self.s_learnable {
                SuppressionScale::Learnable { init: self.s }
            } else {
                SuppressionScale::Fixed(self.s)
            },
            renormalize_rows: self.renormalize,
            clamp_scale: self.clamp_s,
            ..SataConfig::default()
        }
    }

    /// Model configuration for data of the given geometry.
    pub fn model_config(
        &self,
        channels: usize,
        image_size: usize,
        num_classes: usize,
    ) -> Result<ViTConfig> {
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        let mut attention = AttentionConfig::new(self.num_heads, self.embed_dim / self.num_heads);
        attention.temperature_multiplier = self.temperature;
        attention.lsa_diagonal_mask = self.lsa;
        attention.lsa_learnable_temperature = self.lsa_learnable_temperature;
        let cfg = ViTConfig {
            image_size,
            patch_size: self.patch_size,
            channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            num_classes,
            attention,
            sata: self.sata.then(|| self.sata_config()),
            layer_norm_eps: self.layer_norm_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks settings that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sata {
            self.sata_config().validate()?;
        }
        if self.data.kind == DatasetKind::Synthetic && self.data.synthetic_val == 0 {
            return Err(Error::Config("synthetic_val must be positive".into()));
        }
        Ok(())
    }

    /// Serializes every key; parsing the result reproduces this config.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("patch_size", self.patch_size.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("depth", self.depth.to_string());
        kv("num_heads", self.num_heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("layer_norm_eps", self.layer_norm_eps.to_string());
        kv("temperature", self.temperature.to_string());
        kv("lsa", self.lsa.to_string());
        kv(
            "lsa_learnable_temperature",
            self.lsa_learnable_temperature.to_string(),
        );
        kv("sata", self.sata.to_string());
        let mode = match self.sata_mode {
            ThresholdMode::Relative => "relative",
            ThresholdMode::Absolute => "absolute",
        };
        kv("sata_mode", mode.into());
        kv("t", self.t.to_string());
        kv("s", self.s.to_string());
        kv("s_learnable", self.s_learnable.to_string());
        kv("renormalize", self.renormalize.to_string());
        kv("clamp_s", self.clamp_s.to_string());
        kv("lr1", self.lr1.to_string());
        kv("lr2", self.lr2().to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        let schedule = match self.schedule {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        };
        kv("schedule", schedule.into());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("augment", self.augment.to_string());
        let d = &self.data;
        kv("dataset", d.kind.name().into());
        if let Some(dir) = &d.data_dir {
            kv("data_dir", dir.display().to_string());
        }
        kv("synthetic_train", d.synthetic_train.to_string());
        kv("synthetic_val", d.synthetic_val.to_string());
        kv("synthetic_classes", d.synthetic_classes.to_string());
        kv("synthetic_image_size", d.synthetic_image_size.to_string());
        kv("data_seed", d.data_seed.to_string());
        if let Some(classes) = &d.subset_classes {
            kv("subset_classes", join(classes));
        }
        kv("subset_per_class", d.subset_per_class.to_string());
        if let Some(dir) = &self.out_dir {
            kv("out", dir.display().to_string());
        }
        if let Some(stats) = &self.normalization {
            kv("norm_mean", join(&stats.mean));
            kv("norm_std", join(&stats.std));
        }
        kv("grid_s", join(&self.grid_s));
        kv("grid_t", join(&self.grid_t));
        if let Some(path) = &self.checkpoint {
            kv("checkpoint", path.display().to_string());
        }
        kv("attn_threshold", self.attn_threshold.to_string());
        kv("attn_bin_width", self.attn_bin_width.to_string());
        kv("attn_images", self.attn_images.to_string());
        out
    }
}
