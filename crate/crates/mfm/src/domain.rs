//! Shared domain types, configuration validation, and dimensional bookkeeping.
//!
//! Everything downstream (volume construction, aggregation, training) trusts
//! the invariants enforced here: `d_max` divisible by `n`, group counts that
//! divide the feature width, and image dimensions divisible by the
//! downsampling ratio.

use std::path::Path;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum Error {
    #[error("divisibility error: {0}")]
    Divisibility(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Full pipeline configuration. Single source of truth for every
/// hyperparameter; construct through a preset or a config file and run
/// [`validate_config`] before use.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Full-resolution matching range in pixels.
    pub d_max: usize,
    /// Downsampling ratio and stage count.
    pub n: usize,
    /// Channel width of the extracted feature maps.
    pub feat_channels: usize,
    /// Number of correlation groups; must divide `feat_channels`.
    pub gwc_groups: usize,
    /// Width of the compressed features entering the concatenation volume.
    pub cat_channels: usize,
    /// Channel width of the initial and per-stage similarity feature volumes.
    pub vol_channels: usize,
    /// Residual blocks in the feature extractor at the final scale.
    pub feat_blocks: usize,
    pub train: TrainConfig,
}

impl Config {
    /// Cells per target point: `d_max / n`.
    pub fn k(&self) -> usize {
        self.d_max / self.n
    }

    /// Channel count of the raw correlation volume (`gwc_groups + 2 * cat_channels`).
    pub fn raw_channels(&self) -> usize {
        self.gwc_groups + 2 * self.cat_channels
    }

    /// Smallest preset that still exercises every code path. Used by the
    /// double-precision gradient checks.
    pub fn tiny() -> Self {
        Config {
            d_max: 8,
            n: 2,
            feat_channels: 8,
            gwc_groups: 2,
            cat_channels: 4,
            vol_channels: 8,
            feat_blocks: 1,
            train: TrainConfig::default(),
        }
    }

    /// CPU-trainable preset for the synthetic benchmark.
    pub fn desk() -> Self {
        Config {
            d_max: 16,
            n: 4,
            feat_channels: 16,
            gwc_groups: 4,
            cat_channels: 6,
            vol_channels: 8,
            feat_blocks: 1,
            train: TrainConfig::default(),
        }
    }

    /// Full-scale settings (D_max 192, n 4, batch 8, halving schedule).
    /// Provided as a reference point; not runnable on a desktop CPU.
    pub fn paper_sceneflow() -> Self {
        Config {
            d_max: 192,
            n: 4,
            feat_channels: 64,
            gwc_groups: 16,
            cat_channels: 12,
            vol_channels: 32,
            feat_blocks: 2,
            train: TrainConfig::sceneflow(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "paper_sceneflow" => Ok(Self::paper_sceneflow()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(self) -> Result<Self> {
        validate_config(self)
    }

    fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
        }
        match key {
            "d_max" => self.d_max = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "feat_channels" => self.feat_channels = num(key, value)?,
            "gwc_groups" => self.gwc_groups = num(key, value)?,
            "cat_channels" => self.cat_channels = num(key, value)?,
            "vol_channels" => self.vol_channels = num(key, value)?,
            "feat_blocks" => self.feat_blocks = num(key, value)?,
            "train.beta1" => self.train.beta1 = num(key, value)?,
            "train.beta2" => self.train.beta2 = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.base_lr" => self.train.base_lr = num(key, value)?,
            "train.lr_milestones" => {
                let mut ms = Vec::new();
                for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                    ms.push(num(key, part.trim())?);
                }
                self.train.lr_milestones = ms;
            }
            "train.lr_factor" => self.train.lr_factor = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.checkpoint_dir" => self.train.checkpoint_dir = value.into(),
            "train.data_dir" => self.train.data_dir = value.into(),
            "train.crop_h" => self.train.crop_h = num(key, value)?,
            "train.crop_w" => self.train.crop_w = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines. `#` starts a comment; blank lines are
    /// skipped; unknown keys are an error. An optional `preset=<name>` line
    /// must come first and selects the base the remaining keys override.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::desk();
        let mut first = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if !first {
                    return Err(Error::Config("preset must be the first key".into()));
                }
                cfg = Config::preset(value)?;
            } else {
                cfg.apply_key(key, value)?;
            }
            first = false;
        }
        cfg.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Canonical text form; round-trips through [`Config::from_text`].
    pub fn to_text(&self) -> String {
        let ms = self
            .train
            .lr_milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "d_max={}\nn={}\nfeat_channels={}\ngwc_groups={}\ncat_channels={}\n\
             vol_channels={}\nfeat_blocks={}\ntrain.beta1={}\ntrain.beta2={}\n\
             train.batch_size={}\ntrain.base_lr={}\ntrain.lr_milestones={}\n\
             train.lr_factor={}\ntrain.epochs={}\ntrain.seed={}\n\
             train.checkpoint_dir={}\ntrain.data_dir={}\ntrain.crop_h={}\ntrain.crop_w={}\n",
            self.d_max,
            self.n,
            self.feat_channels,
            self.gwc_groups,
            self.cat_channels,
            self.vol_channels,
            self.feat_blocks,
            self.train.beta1,
            self.train.beta2,
            self.train.batch_size,
            self.train.base_lr,
            ms,
            self.train.lr_factor,
            self.train.epochs,
            self.train.seed,
            self.train.checkpoint_dir.display(),
            self.train.data_dir.display(),
            self.train.crop_h,
            self.train.crop_w,
        )
    }

    /// FNV-1a hash of the architecture-relevant fields. Checkpoints store it
    /// so that a resume with incompatible shapes fails fast.
    pub fn arch_hash(&self) -> u64 {
        let text = format!(
            "{} {} {} {} {} {} {}",
            self.d_max,
            self.n,
            self.feat_channels,
            self.gwc_groups,
            self.cat_channels,
            self.vol_channels,
            self.feat_blocks
        );
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Checks every `Config` invariant and returns the config unchanged.
pub fn validate_config(cfg: Config) -> Result<Config> {
    for (name, v) in [
        ("d_max", cfg.d_max),
        ("n", cfg.n),
        ("feat_channels", cfg.feat_channels),
        ("gwc_groups", cfg.gwc_groups),
        ("cat_channels", cfg.cat_channels),
        ("vol_channels", cfg.vol_channels),
        ("feat_blocks", cfg.feat_blocks),
    ] {
        if v == 0 {
            return Err(Error::Range(format!("{name} must be positive")));
        }
    }
    if cfg.n < 2 {
        return Err(Error::Range(format!("n must be at least 2, got {}", cfg.n)));
    }
    if !cfg.d_max.is_multiple_of(cfg.n) {
        return Err(Error::Divisibility(format!(
            "d_max ({}) must be divisible by n ({})",
            cfg.d_max, cfg.n
        )));
    }
    if !cfg.feat_channels.is_multiple_of(cfg.gwc_groups) {
        return Err(Error::Divisibility(format!(
            "gwc_groups ({}) must divide feat_channels ({})",
            cfg.gwc_groups, cfg.feat_channels
        )));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

/// Maps a full-resolution disparity to its (cell, stage) pair.
pub fn cell_of(d: usize, n: usize) -> (usize, usize) {
    (d / n, d % n)
}

/// Inverse of [`cell_of`]: `d = m * n + i`.
pub fn disparity_of(m: usize, i: usize, n: usize) -> usize {
    m * n + i
}

/// A rectified stereo pair in `(H, W, 3)` layout with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub left: Array3<f32>,
    pub right: Array3<f32>,
}

impl ImagePair {
    /// Both images must share a shape whose spatial dims divide by `n`.
    pub fn new(left: Array3<f32>, right: Array3<f32>, n: usize) -> Result<Self> {
        if left.dim() != right.dim() {
            return Err(Error::Shape(format!(
                "left {:?} and right {:?} differ",
                left.dim(),
                right.dim()
            )));
        }
        let (h, w, c) = left.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h % n != 0 || w % n != 0 {
            return Err(Error::Shape(format!(
                "image dims {h}x{w} must be divisible by n={n}"
            )));
        }
        Ok(ImagePair { left, right })
    }

    pub fn height(&self) -> usize {
        self.left.dim().0
    }

    pub fn width(&self) -> usize {
        self.left.dim().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Full,
    Low,
}

/// Per-pixel disparity, always in full-resolution pixel units regardless of
/// the grid it lives on.
#[derive(Debug, Clone)]
pub struct DisparityMap {
    pub values: Array2<f32>,
    pub resolution: Resolution,
}

impl DisparityMap {
    pub fn full(values: Array2<f32>) -> Self {
        DisparityMap { values, resolution: Resolution::Full }
    }

    pub fn low(values: Array2<f32>) -> Self {
        DisparityMap { values, resolution: Resolution::Low }
    }
}

/// Validity flags aligned with a [`DisparityMap`]. Only flagged pixels enter
/// losses and metrics.
#[derive(Debug, Clone)]
pub struct ValidMask {
    pub flags: Array2<bool>,
}

impl ValidMask {
    pub fn all_valid(h: usize, w: usize) -> Self {
        ValidMask { flags: Array2::from_elem((h, w), true) }
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// The assembled `D_max x H x W` similarity volume.
#[derive(Debug, Clone)]
pub struct FullCostVolume {
    pub scores: Array3<f32>,
    pub normalized: bool,
}

impl FullCostVolume {
    pub fn d_max(&self) -> usize {
        self.scores.dim().0
    }

    /// True when every per-pixel score column sums to 1 within `tol`.
    pub fn sums_to_one(&self, tol: f32) -> bool {
        let (_, h, w) = self.scores.dim();
        for y in 0..h {
            for x in 0..w {
                let s: f32 = self.scores.slice(ndarray::s![.., y, x]).sum();
                if (s - 1.0).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}
