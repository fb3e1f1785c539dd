//! Image-conditioned flow model over whole-object latent sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unipart_tensor::nn::Linear;
use unipart_tensor::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

use crate::dit::{DitBlock, FinalLayer, ImageEmbedder, LatentNorm, TimeEmbedder};
use crate::error::{Error, Result};
use crate::flow::{self, SamplerConfig, TimeSampling, CONDITION_DROPOUT};
use crate::model_io;
use crate::procgen::ConditionImage;
use crate::train::{batch_step, loss_and_grads, OptimConfig, Trainer};

pub const WHOLE_KIND: &str = "whole-dit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WholeDitConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    /// Latent count and width; filled in from the VAE.
    pub latents: usize,
    pub latent_dim: usize,
}

impl Default for WholeDitConfig {
    fn default() -> Self {
        WholeDitConfig { width: 256, depth: 8, heads: 8, patch: 16, image_size: 64, latents: 256, latent_dim: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub time_sampling: TimeSampling,
    pub condition_dropout: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 20_000,
            batch_size: 8,
            optim: OptimConfig::default(),
            time_sampling: TimeSampling::Uniform,
            condition_dropout: CONDITION_DROPOUT,
            seed: 0,
            log_every: 100,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config("condition_dropout must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optim.validate()
    }
}

/// One training pair: a raw (unstandardized) latent and its image.
#[derive(Clone, Debug)]
pub struct WholeExample {
    pub latent: Tensor,
    pub image: ConditionImage,
}

#[derive(Clone, Debug)]
pub struct WholeDit {
    pub config: WholeDitConfig,
    pub store: ParamStore,
    input: Linear,
    time: TimeEmbedder,
    image: ImageEmbedder,
    null: ParamId,
    blocks: Vec<DitBlock>,
    last: FinalLayer,
    pub norm: LatentNorm,
}

impl WholeDit {
    pub fn new<R: Rng + ?Sized>(config: WholeDitConfig, rng: &mut R) -> Result<Self> {
        let w = config.width;
        if config.heads == 0 || !w.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("width {w} not divisible by heads {}", config.heads)));
        }
        let mut s = ParamStore::new();
        let input = Linear::new(&mut s, "whole.input", config.latent_dim, w, rng)?;
        let time = TimeEmbedder::new(&mut s, "whole.time", w, rng)?;
        let image = ImageEmbedder::new(&mut s, "whole.image", config.image_size, config.patch, w, rng)?;
        let null = s.add("whole.null", Tensor::randn(&[1, w], rng).map(|x| 0.02 * x))?;
        let blocks = (0..config.depth)
            .map(|i| DitBlock::new(&mut s, &format!("whole.block{i}"), w, config.heads, rng))
            .collect::<Result<_>>()?;
        let last = FinalLayer::new(&mut s, "whole.final", w, config.latent_dim, rng)?;
        let norm = LatentNorm::new(&mut s, "whole.stats", config.latent_dim)?;
        Ok(WholeDit { config, store: s, input, time, image, null, blocks, last, norm })
    }

    /// Condition tokens: image patches, or the null token.
    fn context(&self, tape: &mut Tape, image: Option<&ConditionImage>) -> Result<Var> {
        match image {
            Some(img) => self.image.forward(tape, img),
            None => Ok(tape.param(self.null)),
        }
    }

    /// Velocity for standardized `z_t` (`[L × d]`).
    pub fn forward(&self, tape: &mut Tape, z_t: Var, t: f64, image: Option<&ConditionImage>) -> Result<Var> {
        let d = self.config.latent_dim;
        let shape = tape.shape(z_t).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::Invalid(format!("latent shape {shape:?}, expected [L, {d}]")));
        }
        let temb = self.time.forward(tape, t)?;
        let ctx = self.context(tape, image)?;
        let mut x = self.input.forward(tape, z_t)?;
        for b in &self.blocks {
            x = b.forward(tape, x, temb, ctx, None)?;
        }
        self.last.forward(tape, x, temb)
    }

    pub fn velocity(&self, z_t: &Tensor, t: f64, image: Option<&ConditionImage>) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let z = tape.constant(z_t.clone());
        let v = self.forward(&mut tape, z, t, image)?;
        Ok(tape.value(v).clone())
    }

    /// CFM loss for one standardized latent with explicit `t`, noise and
    /// dropout decision.
    pub fn loss(
        &self,
        tape: &mut Tape,
        z0: &Tensor,
        eps: &Tensor,
        t: f64,
        image: Option<&ConditionImage>,
    ) -> Result<Var> {
        let zt = flow::interpolate(z0, eps, t)?;
        let target = flow::cfm_target(z0, eps)?;
        let z = tape.constant(zt);
        let v = self.forward(tape, z, t, image)?;
        flow::cfm_loss_var(tape, v, &target)
    }

    /// Samples a raw latent for `image` starting from the seed's noise.
    pub fn generate(&self, image: &ConditionImage, sampler: &SamplerConfig) -> Result<Tensor> {
        let init = flow::init_noise(&[self.config.latents, self.config.latent_dim], sampler.seed);
        self.generate_from(image, sampler, init)
    }

    pub fn generate_from(&self, image: &ConditionImage, sampler: &SamplerConfig, init: Tensor) -> Result<Tensor> {
        let z = flow::sample_guided(init, sampler, "generate-whole", |z, t, cond| {
            self.velocity(z, t, if cond { Some(image) } else { None })
        })?;
        self.norm.denormalize(&self.store, &z)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        model_io::to_checkpoint(WHOLE_KIND, &self.config, &self.store)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (config, ck): (WholeDitConfig, _) = model_io::from_checkpoint(ck, WHOLE_KIND)?;
        let mut m = WholeDit::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn with_store<T>(&mut self, f: impl FnOnce(&WholeDit, &mut ParamStore) -> Result<T>) -> Result<T> {
        let mut store = std::mem::take(&mut self.store);
        let out = f(self, &mut store);
        self.store = store;
        out
    }
}

/// Fits latent statistics on `examples`, then trains with CFM.
pub fn train_whole(
    model: &mut WholeDit,
    examples: &[WholeExample],
    cfg: &DiffusionTrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let lat: Vec<&Tensor> = examples.iter().map(|e| &e.latent).collect();
    let norm = model.norm.clone();
    norm.fit(&mut model.store, &lat)?;
    let normalized = examples
        .iter()
        .map(|e| norm.normalize(&model.store, &e.latent))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.with_store(|net, store| {
        let mut trainer = Trainer::new("train-whole", store, cfg.optim)?;
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let loss = batch_step(&mut trainer, store, cfg.batch_size, |s, _| {
                let i = rng.random_range(0..examples.len());
                let z0 = &normalized[i];
                let t = cfg.time_sampling.sample(&mut rng);
                let eps = Tensor::randn(z0.shape(), &mut rng);
                let drop = flow::drop_condition(&mut rng, cfg.condition_dropout);
                let image = if drop { None } else { Some(&examples[i].image) };
                loss_and_grads(s, |tape| net.loss(tape, z0, &eps, t, image))
            })?;
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
                on_log(step, loss);
            }
            history.push(loss);
        }
        Ok(history)
    })
}
