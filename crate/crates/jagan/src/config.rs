//! TOML run configuration with `[model]`, `[loss]`, `[train]`, `[inference]`
//! and `[curation]` sections. Every key is optional; command-line flags
//! override file values, which override built-in defaults.

use std::path::Path;

use jagan_core::curation::CurationParams;
use jagan_core::inference::BurnInConfig;
use jagan_core::losses::LossWeights;
use jagan_core::nets::NetConfig;
use jagan_core::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub curation: CurationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub resolution: usize,
    /// Width multiplier replacing the default 64 of every network.
    pub base_width: Option<usize>,
    pub residual_blocks: usize,
    pub fine_downsamples: usize,
    pub disc_layers: usize,
    pub image_disc_scales: usize,
    pub time_scales: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let n = NetConfig::new(256);
        Self {
            resolution: n.resolution,
            base_width: None,
            residual_blocks: n.n_residual_blocks,
            fine_downsamples: n.fine_downsamples,
            disc_layers: n.disc_layers,
            image_disc_scales: n.n_image_disc_scales,
            time_scales: n.n_time_scales,
        }
    }
}

impl ModelSection {
    pub fn net_config(&self, mode: TrainMode) -> Result<NetConfig> {
        let mut net = match self.base_width {
            Some(base) => NetConfig::scaled(self.resolution, base, self.residual_blocks),
            None => NetConfig::new(self.resolution),
        };
        net.n_residual_blocks = self.residual_blocks;
        net.fine_downsamples = self.fine_downsamples;
        net.disc_layers = self.disc_layers;
        net.n_image_disc_scales = self.image_disc_scales;
        net.n_time_scales = self.time_scales;
        net.video_mode = mode == TrainMode::Video;
        net.validate()?;
        Ok(net)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_d: Option<f64>,
    pub lr_g: Option<f64>,
    pub batch_size: Option<usize>,
    pub adam_betas: Option<(f64, f64)>,
    pub eval_interval: Option<u64>,
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
    pub unroll_len: Option<usize>,
    pub stagnation_evals: Option<usize>,
    pub eval_samples: Option<usize>,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_interval: Option<u64>,
}

impl TrainSection {
    pub fn train_config(&self, mode: TrainMode) -> Result<TrainConfig> {
        let d = match mode {
            TrainMode::Image => TrainConfig::image(),
            TrainMode::Video => TrainConfig::video(),
        };
        let cfg = TrainConfig {
            mode,
            lr_d: self.lr_d.unwrap_or(d.lr_d),
            lr_g: self.lr_g.unwrap_or(d.lr_g),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            adam_betas: self.adam_betas.unwrap_or(d.adam_betas),
            eval_interval: self.eval_interval.unwrap_or(d.eval_interval),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            seed: self.seed.unwrap_or(d.seed),
            unroll_len: self.unroll_len.unwrap_or(d.unroll_len),
            stagnation_evals: self.stagnation_evals.unwrap_or(d.stagnation_evals),
            eval_samples: self.eval_samples.unwrap_or(d.eval_samples),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_interval.unwrap_or(1000)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub burn_in: bool,
    pub burn_in_frames: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let b = BurnInConfig::default();
        Self {
            burn_in: b.enabled,
            burn_in_frames: b.n_frames,
        }
    }
}

impl InferenceSection {
    pub fn burn_in_config(&self) -> BurnInConfig {
        BurnInConfig {
            n_frames: self.burn_in_frames,
            enabled: self.burn_in,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationSection {
    pub sigma_iou: f64,
    pub min_len: usize,
    pub max_hamming: u32,
    pub resolution: usize,
    /// Fraction of sequences assigned to the validation split.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CurationSection {
    fn default() -> Self {
        let p = CurationParams::default();
        Self {
            sigma_iou: p.sigma_iou,
            min_len: p.min_len,
            max_hamming: p.max_hamming,
            resolution: p.resolution,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl CurationSection {
    pub fn params(&self) -> CurationParams {
        CurationParams {
            sigma_iou: self.sigma_iou,
            min_len: self.min_len,
            max_hamming: self.max_hamming,
            resolution: self.resolution,
        }
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| Error::Toml {
            path: path.into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// File contents if a path is given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
