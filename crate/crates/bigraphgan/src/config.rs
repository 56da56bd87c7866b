//! Run configuration: a flat TOML file with validated ranges. Defaults
//! mirror the published training settings (T = 9, C = 128, loss weights
//! 5/10/10, Adam betas 0.5/0.999).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LossWeights, ModelConfig, OptimHyper, Variant};
use crate::tensor::Dtype;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus directory (written by `generate-data`).
    pub dataset: PathBuf,
    /// Output directory for logs, checkpoints, and samples.
    pub out_dir: PathBuf,

    #[serde(default = "d_image")]
    pub image_h: usize,
    #[serde(default = "d_image")]
    pub image_w: usize,
    #[serde(default = "d_variant")]
    pub variant: String,
    #[serde(default = "d_t")]
    pub t_blocks: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_nodes")]
    pub graph_nodes: usize,
    /// 0 means "channels / 2".
    #[serde(default)]
    pub graph_cprime: usize,
    #[serde(default = "d_radius")]
    pub heatmap_radius: f64,
    #[serde(default = "d_d_layers")]
    pub d_layers: usize,
    #[serde(default = "d_d_base")]
    pub d_base: usize,
    #[serde(default = "d_part_nodes")]
    pub part_nodes: usize,
    /// 0 means "channels / 4".
    #[serde(default)]
    pub part_cprime: usize,
    /// 0 means "channels / 4".
    #[serde(default)]
    pub part_mid: usize,
    #[serde(default = "d_true")]
    pub share_part_params: bool,
    #[serde(default = "d_perceptual")]
    pub perceptual_channels: usize,

    #[serde(default = "d_lambda_gan")]
    pub lambda_gan: f64,
    #[serde(default = "d_lambda_l1")]
    pub lambda_l1: f64,
    #[serde(default = "d_lambda_per")]
    pub lambda_per: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,

    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Sample-grid cadence in steps; 0 disables sample dumps.
    #[serde(default)]
    pub sample_every: u64,
    /// `"f32"` (training default) or `"f64"` (verification mode).
    #[serde(default = "d_dtype")]
    pub dtype: String,
    /// Resume training from this checkpoint.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Optional perceptual-weights container replacing the seeded extractor.
    #[serde(default)]
    pub perceptual_weights: Option<PathBuf>,
}

fn d_image() -> usize {
    64
}
fn d_variant() -> String {
    "b6".into()
}
fn d_t() -> usize {
    9
}
fn d_channels() -> usize {
    128
}
fn d_nodes() -> usize {
    32
}
fn d_radius() -> f64 {
    4.0
}
fn d_d_layers() -> usize {
    4
}
fn d_d_base() -> usize {
    16
}
fn d_part_nodes() -> usize {
    8
}
fn d_true() -> bool {
    true
}
fn d_perceptual() -> usize {
    64
}
fn d_lambda_gan() -> f64 {
    5.0
}
fn d_lambda_l1() -> f64 {
    10.0
}
fn d_lambda_per() -> f64 {
    10.0
}
fn d_lr() -> f64 {
    2e-4
}
fn d_beta1() -> f64 {
    0.5
}
fn d_beta2() -> f64 {
    0.999
}
fn d_batch() -> usize {
    1
}
fn d_steps() -> u64 {
    2000
}
fn d_seed() -> u64 {
    1
}
fn d_dtype() -> String {
    "f32".into()
}

/// A validated run: model config, optimizer and loss settings, plus the
/// training-loop knobs.
#[derive(Debug, Clone)]
pub struct ValidatedRun {
    pub model: ModelConfig,
    pub hyper: OptimHyper,
    pub weights: LossWeights,
    pub dtype: Dtype,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub resume: Option<PathBuf>,
    pub perceptual_weights: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Range-check every field before any work happens. The
    /// `BGG_DETERMINISTIC=1` environment variable forces the 64-bit
    /// verification mode.
    pub fn validate(&self) -> Result<ValidatedRun> {
        let variant = Variant::parse(&self.variant)?;
        let model = ModelConfig {
            variant,
            image_h: self.image_h,
            image_w: self.image_w,
            t_blocks: self.t_blocks,
            channels: self.channels,
            graph_nodes: self.graph_nodes,
            graph_cprime: if self.graph_cprime == 0 {
                (self.channels / 2).max(1)
            } else {
                self.graph_cprime
            },
            heatmap_radius: self.heatmap_radius,
            d_layers: self.d_layers,
            d_base: self.d_base,
            part_nodes: self.part_nodes,
            part_cprime: if self.part_cprime == 0 {
                (self.channels / 4).max(1)
            } else {
                self.part_cprime
            },
            part_mid: if self.part_mid == 0 {
                (self.channels / 4).max(1)
            } else {
                self.part_mid
            },
            share_part_params: self.share_part_params,
            perceptual_channels: self.perceptual_channels,
        };
        model.validate()?;

        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        for (name, l) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_l1", self.lambda_l1),
            ("lambda_per", self.lambda_per),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {l}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        let mut dtype = match self.dtype.as_str() {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => {
                return Err(Error::Config(format!(
                    "dtype must be \"f32\" or \"f64\", got {other:?}"
                )))
            }
        };
        if deterministic_mode_forced() {
            dtype = Dtype::F64;
        }

        Ok(ValidatedRun {
            model,
            hyper: OptimHyper {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
            },
            weights: LossWeights {
                gan: self.lambda_gan,
                l1: self.lambda_l1,
                per: self.lambda_per,
            },
            dtype,
            dataset: self.dataset.clone(),
            out_dir: self.out_dir.clone(),
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            sample_every: self.sample_every,
            resume: self.resume.clone(),
            perceptual_weights: self.perceptual_weights.clone(),
        })
    }
}

/// `BGG_DETERMINISTIC=1` forces the 64-bit verification mode.
pub fn deterministic_mode_forced() -> bool {
    std::env::var("BGG_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}
