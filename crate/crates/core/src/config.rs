//! Whole-run configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::flow::SamplerConfig;
use crate::latent_seg::SegConfig;
use crate::part_dit::PartDitConfig;
use crate::pipeline::{DecodeConfig, GenerateConfig};
use crate::procgen::ShapeConfig;
use crate::train::OptimConfig;
use crate::vae::{VaeConfig, VaeLossConfig};
use crate::vae_train::{PosTrainConfig, VaeTrainConfig};
use crate::whole_dit::{DiffusionTrainConfig, WholeDitConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub vae: VaeConfig,
    pub vae_loss: VaeLossConfig,
    pub vae_train: VaeTrainConfig,
    pub pos_train: PosTrainConfig,
    pub whole: WholeDitConfig,
    pub whole_train: DiffusionTrainConfig,
    pub part: PartDitConfig,
    pub part_train: DiffusionTrainConfig,
    pub sampler: SamplerConfig,
    pub seg: SegConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Smallest configuration that still runs every stage: L=16, d=8.
    pub fn micro() -> Self {
        let optim = OptimConfig { lr: 2e-3, warmup_steps: 20, ..OptimConfig::default() };
        let diffusion = DiffusionTrainConfig { steps: 200, batch_size: 2, optim, log_every: 50, ..Default::default() };
        RunConfig {
            dataset: DatasetConfig {
                shape: ShapeConfig { min_parts: 2, max_parts: 3, ..ShapeConfig::default() },
                surface_points: 512,
                camera: crate::procgen::Camera { resolution: 16 },
            },
            vae: VaeConfig {
                latents: 16,
                latent_dim: 8,
                width: 16,
                heads: 2,
                encoder_blocks: 1,
                decoder_blocks: 1,
                seg_layers: 1,
                fourier_freqs: 4,
                input_points: 256,
            },
            vae_loss: VaeLossConfig { queries: 256, prompts: 4, ..VaeLossConfig::default() },
            vae_train: VaeTrainConfig {
                steps: 200,
                batch_size: 1,
                geometry_steps: 50,
                optim,
                log_every: 50,
                ..VaeTrainConfig::default()
            },
            pos_train: PosTrainConfig { steps: 200, batch_size: 1, log_every: 50, ..PosTrainConfig::default() },
            whole: WholeDitConfig { width: 16, depth: 2, heads: 2, patch: 8, image_size: 16, latents: 16, latent_dim: 8 },
            whole_train: diffusion.clone(),
            part: PartDitConfig {
                width: 16,
                depth: 2,
                heads: 2,
                patch: 8,
                image_size: 16,
                latents: 16,
                latent_dim: 8,
                ..PartDitConfig::default()
            },
            part_train: diffusion,
            sampler: SamplerConfig { steps: 8, ..SamplerConfig::default() },
            seg: SegConfig { prompts: 4, ..SegConfig::default() },
            decode: DecodeConfig { resolution: 12, gt_resolution: 24, ..DecodeConfig::default() },
            eval: EvalConfig { samples: 1000, ..EvalConfig::default() },
        }
    }

    pub fn generate(&self) -> GenerateConfig {
        GenerateConfig { sampler: self.sampler, seg: self.seg, decode: self.decode }
    }

    /// Checks every section and the shapes shared between stages.
    pub fn validate(&self) -> Result<()> {
        self.dataset.shape.validate()?;
        self.vae.validate()?;
        self.vae_loss.validate()?;
        self.vae_train.optim.validate()?;
        self.pos_train.optim.validate()?;
        self.whole_train.validate()?;
        self.part_train.validate()?;
        self.sampler.validate()?;
        let latent = (self.vae.latents, self.vae.latent_dim);
        if (self.whole.latents, self.whole.latent_dim) != latent || (self.part.latents, self.part.latent_dim) != latent {
            return Err(Error::Config(format!(
                "latent shape differs between stages: vae {latent:?}, whole {:?}, part {:?}",
                (self.whole.latents, self.whole.latent_dim),
                (self.part.latents, self.part.latent_dim)
            )));
        }
        let res = self.dataset.camera.resolution;
        if self.whole.image_size != res || self.part.image_size != res {
            return Err(Error::Config(format!(
                "image size {} / {} does not match camera resolution {res}",
                self.whole.image_size, self.part.image_size
            )));
        }
        if self.dataset.surface_points < self.vae.input_points {
            return Err(Error::Config("dataset stores fewer surface points than the encoder reads".into()));
        }
        if self.decode.resolution < 8 || self.decode.gt_resolution < 8 {
            return Err(Error::Config("marching-cubes resolution must be at least 8".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_toml()?)?)
    }
}
