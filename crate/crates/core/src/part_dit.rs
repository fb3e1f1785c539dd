//! Dual-space part flow model.
//!
//! A part is generated as two latent sets at once: its shape posed inside
//! the object (global space) and the same shape rescaled to fill the unit
//! cube (canonical space). The `2L` tokens carry a learned space embedding;
//! blocks alternate between attention within each space and attention over
//! both. Condition tokens are the image, the whole-object latent and the
//! part's own latent group, each tagged with a type embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unipart_geometry::Vec3;
use unipart_tensor::nn::{fourier_features, Linear};
use unipart_tensor::{AttentionMask, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

use crate::dit::{DitBlock, FinalLayer, ImageEmbedder, LatentNorm, TimeEmbedder};
use crate::error::{Error, Result};
use crate::flow::{self, SamplerConfig};
use crate::model_io;
use crate::procgen::ConditionImage;
use crate::train::{batch_step, loss_and_grads, Trainer};
use crate::whole_dit::DiffusionTrainConfig;

pub const PART_KIND: &str = "part-dit";

/// Fourier frequencies of the point-form part condition.
const POINT_FREQS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartDitConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub latents: usize,
    pub latent_dim: usize,
    /// Generate the canonical-space latent; off means global space only.
    pub use_ncs: bool,
    /// Alternate local and global blocks; off means every block is global.
    pub local_attention: bool,
    /// Distinct embeddings per space; off means one shared embedding.
    pub space_embedding: bool,
    /// Condition on the part's anchor points through a fresh embedder
    /// instead of its latent group.
    pub point_condition: bool,
    pub whole_condition: bool,
}

impl Default for PartDitConfig {
    fn default() -> Self {
        PartDitConfig {
            width: 256,
            depth: 8,
            heads: 8,
            patch: 16,
            image_size: 64,
            latents: 256,
            latent_dim: 32,
            use_ncs: true,
            local_attention: true,
            space_embedding: true,
            point_condition: false,
            whole_condition: true,
        }
    }
}

impl PartDitConfig {
    pub fn spaces(&self) -> usize {
        if self.use_ncs {
            2
        } else {
            1
        }
    }

    /// Whether block `i` restricts attention to its own space.
    pub fn block_is_local(&self, i: usize) -> bool {
        self.use_ncs && self.local_attention && i.is_multiple_of(2)
    }
}

/// Condition for one part. Latents are raw (unstandardized).
#[derive(Clone, Debug, PartialEq)]
pub struct PartCondition {
    pub image: Option<ConditionImage>,
    /// Whole-object latent, `[L × d]`.
    pub whole: Tensor,
    /// Rows of `whole` in the part's group, ascending index order.
    pub group: Vec<usize>,
    /// Anchor positions of the group's latents, same order.
    pub points: Vec<Vec3>,
}

impl PartCondition {
    pub fn new(image: Option<ConditionImage>, whole: Tensor, group: Vec<usize>, anchors: &[Vec3]) -> Result<Self> {
        let mut group = group;
        group.sort_unstable();
        group.dedup();
        if group.is_empty() || group.iter().any(|&i| i >= whole.rows() || i >= anchors.len()) {
            return Err(Error::Invalid("part group is empty or out of range".into()));
        }
        let points = group.iter().map(|&i| anchors[i]).collect();
        Ok(PartCondition { image, whole, group, points })
    }
}

/// Generated (or target) latents of one part.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSpaceLatent {
    pub gcs: Tensor,
    /// Absent when the model runs without the canonical space.
    pub ncs: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct PartExample {
    pub target: DualSpaceLatent,
    pub cond: PartCondition,
}

#[derive(Clone, Debug)]
pub struct PartDit {
    pub config: PartDitConfig,
    pub store: ParamStore,
    input: Linear,
    space: ParamId,
    time: TimeEmbedder,
    image: ImageEmbedder,
    null: ParamId,
    types: ParamId,
    whole_in: Option<Linear>,
    /// Latent-group embedder, or the point embedder under `point_condition`.
    part_in: Linear,
    blocks: Vec<DitBlock>,
    last: FinalLayer,
    pub gcs_norm: LatentNorm,
    pub ncs_norm: LatentNorm,
    pub cond_norm: LatentNorm,
}

/// Type-embedding rows.
const TYPE_IMAGE: usize = 0;
const TYPE_WHOLE: usize = 1;
const TYPE_PART: usize = 2;

impl PartDit {
    pub fn new<R: Rng + ?Sized>(config: PartDitConfig, rng: &mut R) -> Result<Self> {
        let (w, d) = (config.width, config.latent_dim);
        if config.heads == 0 || w % config.heads != 0 {
            return Err(Error::Config(format!("width {w} not divisible by heads {}", config.heads)));
        }
        let mut s = ParamStore::new();
        let input = Linear::new(&mut s, "part.input", d, w, rng)?;
        let rows = if config.space_embedding { 2 } else { 1 };
        let space = s.add("part.space", Tensor::randn(&[rows, w], rng).map(|x| 0.02 * x))?;
        let time = TimeEmbedder::new(&mut s, "part.time", w, rng)?;
        let image = ImageEmbedder::new(&mut s, "part.image", config.image_size, config.patch, w, rng)?;
        let null = s.add("part.null", Tensor::randn(&[1, w], rng).map(|x| 0.02 * x))?;
        let types = s.add("part.types", Tensor::randn(&[3, w], rng).map(|x| 0.02 * x))?;
        let whole_in = if config.whole_condition {
            Some(Linear::new(&mut s, "part.whole_in", d, w, rng)?)
        } else {
            None
        };
        let part_in = if config.point_condition {
            Linear::new(&mut s, "part.point_in", 3 + 6 * POINT_FREQS + 1, w, rng)?
        } else {
            Linear::new(&mut s, "part.part_in", d + 1, w, rng)?
        };
        let blocks = (0..config.depth)
            .map(|i| DitBlock::new(&mut s, &format!("part.block{i}"), w, config.heads, rng))
            .collect::<Result<_>>()?;
        let last = FinalLayer::new(&mut s, "part.final", w, d, rng)?;
        let gcs_norm = LatentNorm::new(&mut s, "part.stats_gcs", d)?;
        let ncs_norm = LatentNorm::new(&mut s, "part.stats_ncs", d)?;
        let cond_norm = LatentNorm::new(&mut s, "part.stats_cond", d)?;
        Ok(PartDit {
            config,
            store: s,
            input,
            space,
            time,
            image,
            null,
            types,
            whole_in,
            part_in,
            blocks,
            last,
            gcs_norm,
            ncs_norm,
            cond_norm,
        })
    }

    /// Block-diagonal mask over the `2L` tokens: allowed iff both tokens
    /// belong to the same space.
    pub fn local_mask(&self) -> AttentionMask {
        let l = self.config.latents;
        let n = 2 * l;
        (0..n * n).map(|k| (k / n) / l == (k % n) / l).collect::<Vec<_>>().into()
    }

    /// Space index of each latent token.
    pub fn token_spaces(&self) -> Vec<usize> {
        (0..self.config.spaces()).flat_map(|s| std::iter::repeat_n(s, self.config.latents)).collect()
    }

    fn type_row(&self, tape: &mut Tape, row: usize) -> Result<Var> {
        let t = tape.param(self.types);
        Ok(tape.slice(t, 0, row, row + 1)?)
    }

    /// Condition tokens for standardized whole latent `whole_n`.
    fn context(&self, tape: &mut Tape, cond: &PartCondition, whole_n: &Tensor, image: Option<&ConditionImage>) -> Result<Var> {
        let l = self.config.latents;
        let img = match image {
            Some(i) => self.image.forward(tape, i)?,
            None => tape.param(self.null),
        };
        let ty = self.type_row(tape, TYPE_IMAGE)?;
        let mut parts = vec![tape.add(img, ty)?];

        if let Some(whole_in) = &self.whole_in {
            let z = tape.constant(whole_n.clone());
            let z = whole_in.forward(tape, z)?;
            let ty = self.type_row(tape, TYPE_WHOLE)?;
            parts.push(tape.add(z, ty)?);
        }

        let rows = if self.config.point_condition {
            let pts = Tensor::new(vec![cond.points.len(), 3], cond.points.iter().flatten().copied().collect())?;
            fourier_features(&pts, POINT_FREQS)
        } else {
            whole_n.gather_rows(&cond.group)
        };
        let x = tape.constant(pad_rows(&rows, l, rows.rows())?);
        let part = self.part_in.forward(tape, x)?;
        let ty = self.type_row(tape, TYPE_PART)?;
        parts.push(tape.add(part, ty)?);
        Ok(tape.concat(&parts, 0)?)
    }

    /// Velocity for standardized noisy tokens `z_t` (`[S·L × d]`, global
    /// space first).
    pub fn forward(
        &self,
        tape: &mut Tape,
        z_t: Var,
        t: f64,
        cond: &PartCondition,
        whole_n: &Tensor,
        image: Option<&ConditionImage>,
    ) -> Result<Var> {
        let (l, d) = (self.config.latents, self.config.latent_dim);
        let n = self.config.spaces() * l;
        if tape.shape(z_t) != [n, d] {
            return Err(Error::Invalid(format!("token shape {:?}, expected [{n}, {d}]", tape.shape(z_t))));
        }
        let temb = self.time.forward(tape, t)?;
        let ctx = self.context(tape, cond, whole_n, image)?;
        let x = self.input.forward(tape, z_t)?;
        let space = tape.param(self.space);
        let idx: Vec<usize> = if self.config.space_embedding { self.token_spaces() } else { vec![0; n] };
        let emb = tape.gather_rows(space, &idx)?;
        let mut x = tape.add(x, emb)?;
        let mask = self.local_mask();
        for (i, b) in self.blocks.iter().enumerate() {
            let m = if self.config.block_is_local(i) { Some(&mask) } else { None };
            x = b.forward(tape, x, temb, ctx, m)?;
        }
        self.last.forward(tape, x, temb)
    }

    fn stack(&self, dual: &DualSpaceLatent) -> Result<Tensor> {
        match (&dual.ncs, self.config.use_ncs) {
            (Some(n), true) => Ok(Tensor::vstack(&[&dual.gcs, n])?),
            (_, false) => Ok(dual.gcs.clone()),
            (None, true) => Err(Error::Invalid("canonical-space latent missing".into())),
        }
    }

    fn normalize_target(&self, dual: &DualSpaceLatent) -> Result<DualSpaceLatent> {
        Ok(DualSpaceLatent {
            gcs: self.gcs_norm.normalize(&self.store, &dual.gcs)?,
            ncs: match &dual.ncs {
                Some(n) if self.config.use_ncs => Some(self.ncs_norm.normalize(&self.store, n)?),
                _ => None,
            },
        })
    }

    /// Summed per-space CFM loss for standardized targets with a shared
    /// `t` and independent noise per space. Returns the total and the
    /// per-space losses.
    pub fn loss(
        &self,
        tape: &mut Tape,
        target_n: &DualSpaceLatent,
        cond: &PartCondition,
        whole_n: &Tensor,
        eps: &Tensor,
        t: f64,
        image: Option<&ConditionImage>,
    ) -> Result<(Var, Vec<Var>)> {
        let z0 = self.stack(target_n)?;
        let zt = flow::interpolate(&z0, eps, t)?;
        let target = flow::cfm_target(&z0, eps)?;
        let z = tape.constant(zt);
        let v = self.forward(tape, z, t, cond, whole_n, image)?;
        let l = self.config.latents;
        let mut per = Vec::new();
        for s in 0..self.config.spaces() {
            let vs = tape.slice(v, 0, s * l, (s + 1) * l)?;
            let ts = Tensor::from_rows(&(s * l..(s + 1) * l).map(|r| target.row(r).to_vec()).collect::<Vec<_>>())?;
            per.push(flow::cfm_loss_var(tape, vs, &ts)?);
        }
        let mut total = per[0];
        for &p in &per[1..] {
            total = tape.add(total, p)?;
        }
        Ok((total, per))
    }

    pub fn whole_normalized(&self, cond: &PartCondition) -> Result<Tensor> {
        self.cond_norm.normalize(&self.store, &cond.whole)
    }

    pub fn velocity(&self, z: &Tensor, t: f64, cond: &PartCondition, whole_n: &Tensor, image: Option<&ConditionImage>) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let zv = tape.constant(z.clone());
        let v = self.forward(&mut tape, zv, t, cond, whole_n, image)?;
        Ok(tape.value(v).clone())
    }

    /// Jointly samples both spaces for `cond`; raw latents out.
    pub fn generate(&self, cond: &PartCondition, sampler: &SamplerConfig) -> Result<DualSpaceLatent> {
        let n = self.config.spaces() * self.config.latents;
        let init = flow::init_noise(&[n, self.config.latent_dim], sampler.seed);
        self.generate_from(cond, sampler, init)
    }

    pub fn generate_from(&self, cond: &PartCondition, sampler: &SamplerConfig, init: Tensor) -> Result<DualSpaceLatent> {
        let whole_n = self.whole_normalized(cond)?;
        let z = flow::sample_guided(init, sampler, "generate-parts", |z, t, c| {
            let image = if c { cond.image.as_ref() } else { None };
            self.velocity(z, t, cond, &whole_n, image)
        })?;
        let l = self.config.latents;
        let rows = |a: usize, b: usize| Tensor::from_rows(&(a..b).map(|r| z.row(r).to_vec()).collect::<Vec<_>>());
        let gcs = self.gcs_norm.denormalize(&self.store, &rows(0, l)?)?;
        let ncs = if self.config.use_ncs { Some(self.ncs_norm.denormalize(&self.store, &rows(l, 2 * l)?)?) } else { None };
        Ok(DualSpaceLatent { gcs, ncs })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        model_io::to_checkpoint(PART_KIND, &self.config, &self.store)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (config, ck): (PartDitConfig, _) = model_io::from_checkpoint(ck, PART_KIND)?;
        let mut m = PartDit::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn with_store<T>(&mut self, f: impl FnOnce(&PartDit, &mut ParamStore) -> Result<T>) -> Result<T> {
        let mut store = std::mem::take(&mut self.store);
        let out = f(self, &mut store);
        self.store = store;
        out
    }
}

/// `rows` valid rows of `x` followed by zero rows up to `total`, with a
/// trailing flag column marking the valid ones.
pub fn pad_rows(x: &Tensor, total: usize, rows: usize) -> Result<Tensor> {
    if rows > total || rows > x.rows() {
        return Err(Error::Invalid(format!("{rows} rows cannot be padded to {total}")));
    }
    let c = x.cols();
    let mut data = vec![0.0; total * (c + 1)];
    for r in 0..rows {
        data[r * (c + 1)..r * (c + 1) + c].copy_from_slice(x.row(r));
        data[r * (c + 1) + c] = 1.0;
    }
    Ok(Tensor::new(vec![total, c + 1], data)?)
}

/// Fits latent statistics, then trains. Only the image is ever dropped.
pub fn train_part(
    model: &mut PartDit,
    examples: &[PartExample],
    cfg: &DiffusionTrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let gcs: Vec<&Tensor> = examples.iter().map(|e| &e.target.gcs).collect();
    model.gcs_norm.clone().fit(&mut model.store, &gcs)?;
    if model.config.use_ncs {
        let ncs = examples
            .iter()
            .map(|e| e.target.ncs.as_ref().ok_or_else(|| Error::Invalid("canonical-space target missing".into())))
            .collect::<Result<Vec<_>>>()?;
        model.ncs_norm.clone().fit(&mut model.store, &ncs)?;
    }
    let wholes: Vec<&Tensor> = examples.iter().map(|e| &e.cond.whole).collect();
    model.cond_norm.clone().fit(&mut model.store, &wholes)?;
    let prepared = examples
        .iter()
        .map(|e| Ok((model.normalize_target(&e.target)?, model.whole_normalized(&e.cond)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = model.config.spaces() * model.config.latents;
    let d = model.config.latent_dim;
    model.with_store(|net, store| {
        let mut trainer = Trainer::new("train-part", store, cfg.optim)?;
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let loss = batch_step(&mut trainer, store, cfg.batch_size, |s, _| {
                let i = rng.random_range(0..examples.len());
                let (target, whole_n) = &prepared[i];
                let t = cfg.time_sampling.sample(&mut rng);
                let eps = Tensor::randn(&[n, d], &mut rng);
                let drop = flow::drop_condition(&mut rng, cfg.condition_dropout);
                let cond = &examples[i].cond;
                let image = if drop { None } else { cond.image.as_ref() };
                loss_and_grads(s, |tape| Ok(net.loss(tape, target, cond, whole_n, &eps, t, image)?.0))
            })?;
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
                on_log(step, loss);
            }
            history.push(loss);
        }
        Ok(history)
    })
}
