//! Geometry + segmentation set-latent VAE.
//!
//! The encoder embeds labelled surface points and lets the farthest-point
//! subset of them cross-attend to the whole cloud, giving `L` latents of
//! width `d`. Three decoders read the latents: an occupancy field, a
//! promptable per-latent part mask with an IoU score, and a per-latent
//! anchor position regressor.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unipart_geometry::vec3::Vec3;
use unipart_geometry::farthest_point_sample;
use unipart_tensor::nn::{fourier_features, CrossAttentionBlock, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, SelfAttentionBlock};
use unipart_tensor::{AttentionMask, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::procgen::{FieldQuery, LabeledSurfaceSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latents: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub seg_layers: usize,
    pub fourier_freqs: usize,
    /// Surface points fed to the encoder (a prefix of the stored samples).
    pub input_points: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latents: 256,
            latent_dim: 32,
            width: 128,
            heads: 4,
            encoder_blocks: 1,
            decoder_blocks: 2,
            seg_layers: 2,
            fourier_freqs: 6,
            input_points: 2048,
        }
    }
}

impl VaeConfig {
    pub fn point_features(&self) -> usize {
        3 + 6 * self.fourier_freqs + 3 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latents == 0 || self.latent_dim == 0 {
            return Err(Error::Config("latents and latent_dim must be positive".into()));
        }
        if self.input_points < self.latents {
            return Err(Error::Config(format!(
                "input_points {} below latent count {}",
                self.input_points, self.latents
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    Bce,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeLossConfig {
    pub kl_weight: f64,
    pub focal_weight: f64,
    pub focal_gamma: f64,
    pub dice_weight: f64,
    pub iou_weight: f64,
    pub prompts: usize,
    pub queries: usize,
    pub near_fraction: f64,
    pub near_std: f64,
    pub recon: ReconLoss,
}

impl Default for VaeLossConfig {
    fn default() -> Self {
        VaeLossConfig {
            kl_weight: 1e-3,
            focal_weight: 20.0,
            focal_gamma: 2.0,
            dice_weight: 1.0,
            iou_weight: 1.0,
            prompts: 16,
            queries: 4096,
            near_fraction: 0.5,
            near_std: 0.02,
            recon: ReconLoss::Bce,
        }
    }
}

impl VaeLossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.kl_weight, self.focal_weight, self.focal_gamma, self.dice_weight, self.iou_weight, self.near_std];
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.near_fraction) {
            return Err(Error::Config("near_fraction must lie in [0, 1]".into()));
        }
        if self.queries == 0 || self.prompts == 0 {
            return Err(Error::Config("queries and prompts must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder input: per-point features and the farthest-point anchor subset.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    /// `[C × point_features]`: Fourier position, normal, label / num_parts.
    pub features: Tensor,
    pub anchor_indices: Vec<usize>,
    pub anchors: Vec<Vec3>,
    pub anchor_labels: Vec<u32>,
}

impl EncoderInput {
    /// Anchors are the first `latents` farthest-point picks of the first
    /// `input_points` samples.
    pub fn new(sample: &LabeledSurfaceSample, num_parts: usize, cfg: &VaeConfig) -> Result<Self> {
        let sample = &sample.prefix(cfg.input_points);
        let c = sample.len();
        if c < cfg.latents {
            return Err(Error::Invalid(format!("{c} surface points cannot seed {} latents", cfg.latents)));
        }
        let anchor_indices = farthest_point_sample(&sample.positions, cfg.latents)?;
        Self::with_anchors(sample, num_parts, cfg, anchor_indices)
    }

    /// Uses the given anchor indices instead of running farthest-point sampling.
    pub fn with_anchors(
        sample: &LabeledSurfaceSample,
        num_parts: usize,
        cfg: &VaeConfig,
        anchor_indices: Vec<usize>,
    ) -> Result<Self> {
        let c = sample.len();
        if anchor_indices.len() != cfg.latents || anchor_indices.iter().any(|&i| i >= c) {
            return Err(Error::Invalid("anchor indices do not match the latent count".into()));
        }
        let pos = Tensor::new(vec![c, 3], sample.positions.iter().flatten().copied().collect())?;
        let fourier = fourier_features(&pos, cfg.fourier_freqs);
        let fw = fourier.cols();
        let width = cfg.point_features();
        let parts = num_parts.max(1) as f64;
        let mut data = Vec::with_capacity(c * width);
        for i in 0..c {
            data.extend_from_slice(fourier.row(i));
            data.extend_from_slice(&sample.normals[i]);
            data.push(sample.labels[i] as f64 / parts);
        }
        debug_assert_eq!(fw + 4, width);
        let features = Tensor::new(vec![c, width], data)?;
        let anchors = anchor_indices.iter().map(|&i| sample.positions[i]).collect();
        let anchor_labels = anchor_indices.iter().map(|&i| sample.labels[i]).collect();
        Ok(EncoderInput { features, anchor_indices, anchors, anchor_labels })
    }

    /// Copy with the label channel set to zero.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        let w = out.features.cols();
        for r in 0..out.features.rows() {
            out.features.row_mut(r)[w - 1] = 0.0;
        }
        out
    }
}

/// Posterior statistics and a reparameterized sample, all `[L × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
    pub anchors: Vec<Vec3>,
}

/// Masks for a batch of prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMasks {
    /// `[P × L]` mask logits; latent `j` is in mask `i` when positive.
    pub logits: Tensor,
    /// Predicted IoU per prompt, in `[0, 1]`.
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLossParts {
    pub recon: f64,
    pub focal: f64,
    pub dice: f64,
    pub iou: f64,
    pub seg: f64,
    pub kl: f64,
    pub total: f64,
}

/// Random quantities for one loss evaluation, drawn outside the loss so
/// the loss is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct VaeDraw {
    pub queries: FieldQuery,
    pub prompts: Vec<usize>,
    pub noise: Tensor,
}

impl VaeDraw {
    pub fn new<R: Rng + ?Sized>(
        spec_queries: FieldQuery,
        cfg: &VaeConfig,
        loss: &VaeLossConfig,
        rng: &mut R,
    ) -> Self {
        let p = loss.prompts.min(cfg.latents);
        let prompts = sample_indices(rng, cfg.latents, p).into_vec();
        let noise = Tensor::randn(&[cfg.latents, cfg.latent_dim], rng);
        VaeDraw { queries: spec_queries, prompts, noise }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Linear,
    cross: CrossAttentionBlock,
    blocks: Vec<SelfAttentionBlock>,
    norm: LayerNorm,
    mean: Linear,
    logvar: Linear,
}

#[derive(Clone, Debug)]
struct GeometryDecoder {
    latent_in: Linear,
    blocks: Vec<SelfAttentionBlock>,
    query_in: Linear,
    cross: CrossAttentionBlock,
    norm: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
struct SegLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    cross: MultiHeadAttention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct SegDecoder {
    latent_in: Linear,
    output_tokens: unipart_tensor::ParamId,
    prompt_embed: unipart_tensor::ParamId,
    layers: Vec<SegLayer>,
    norm_keys: LayerNorm,
    keys: Linear,
    mask_mlp: Mlp,
    iou_mlp: Mlp,
}

#[derive(Clone, Debug)]
struct PositionDecoder {
    mlp: Mlp,
}

/// Parameter name prefixes of the four sub-networks.
pub const ENCODER_PREFIX: &str = "vae.enc.";
pub const GEOMETRY_PREFIX: &str = "vae.geom.";
pub const SEGMENTATION_PREFIX: &str = "vae.seg.";
pub const POSITION_PREFIX: &str = "vae.pos.";

#[derive(Clone, Debug)]
pub struct GeomSegVae {
    pub config: VaeConfig,
    pub store: ParamStore,
    enc: Encoder,
    geom: GeometryDecoder,
    seg: SegDecoder,
    pos: PositionDecoder,
}

fn constant(tape: &mut Tape, t: &Tensor) -> Var {
    tape.constant(t.clone())
}

impl GeomSegVae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let (w, d, h) = (config.width, config.latent_dim, config.heads);
        let enc = Encoder {
            input: Linear::new(&mut s, "vae.enc.input", config.point_features(), w, rng)?,
            cross: CrossAttentionBlock::new(&mut s, "vae.enc.cross", w, w, h, rng)?,
            blocks: (0..config.encoder_blocks)
                .map(|i| SelfAttentionBlock::new(&mut s, &format!("vae.enc.block{i}"), w, h, rng))
                .collect::<unipart_tensor::Result<_>>()?,
            norm: LayerNorm::new(&mut s, "vae.enc.norm", w)?,
            mean: Linear::with_init(&mut s, "vae.enc.mean", w, d, Init::Normal(0.02), true, rng)?,
            logvar: Linear::with_init(&mut s, "vae.enc.logvar", w, d, Init::Zeros, true, rng)?,
        };
        let geom = GeometryDecoder {
            latent_in: Linear::new(&mut s, "vae.geom.latent_in", d, w, rng)?,
            blocks: (0..config.decoder_blocks)
                .map(|i| SelfAttentionBlock::new(&mut s, &format!("vae.geom.block{i}"), w, h, rng))
                .collect::<unipart_tensor::Result<_>>()?,
            query_in: Linear::new(&mut s, "vae.geom.query_in", 3 + 6 * config.fourier_freqs, w, rng)?,
            cross: CrossAttentionBlock::new(&mut s, "vae.geom.cross", w, w, h, rng)?,
            norm: LayerNorm::new(&mut s, "vae.geom.norm", w)?,
            out: Linear::with_init(&mut s, "vae.geom.out", w, 1, Init::Normal(1e-3), true, rng)?,
        };
        let seg = SegDecoder {
            latent_in: Linear::new(&mut s, "vae.seg.latent_in", d, w, rng)?,
            output_tokens: s.add("vae.seg.output_tokens", Tensor::randn(&[2, w], rng).map(|x| 0.02 * x))?,
            prompt_embed: s.add("vae.seg.prompt_embed", Tensor::randn(&[1, w], rng).map(|x| 0.02 * x))?,
            layers: (0..config.seg_layers)
                .map(|i| -> unipart_tensor::Result<SegLayer> {
                    let n = format!("vae.seg.layer{i}");
                    Ok(SegLayer {
                        norm_self: LayerNorm::new(&mut s, &format!("{n}.norm_self"), w)?,
                        self_attn: MultiHeadAttention::new(&mut s, &format!("{n}.self_attn"), w, w, h, rng)?,
                        norm_q: LayerNorm::new(&mut s, &format!("{n}.norm_q"), w)?,
                        norm_kv: LayerNorm::new(&mut s, &format!("{n}.norm_kv"), w)?,
                        cross: MultiHeadAttention::new(&mut s, &format!("{n}.cross"), w, w, h, rng)?,
                        norm_mlp: LayerNorm::new(&mut s, &format!("{n}.norm_mlp"), w)?,
                        mlp: Mlp::new(&mut s, &format!("{n}.mlp"), w, 2 * w, w, rng)?,
                    })
                })
                .collect::<unipart_tensor::Result<_>>()?,
            norm_keys: LayerNorm::new(&mut s, "vae.seg.norm_keys", w)?,
            keys: Linear::new(&mut s, "vae.seg.keys", w, w, rng)?,
            mask_mlp: Mlp::new(&mut s, "vae.seg.mask_mlp", w, w, w, rng)?,
            iou_mlp: Mlp::new(&mut s, "vae.seg.iou_mlp", w, w, 1, rng)?,
        };
        let pos = PositionDecoder { mlp: Mlp::new(&mut s, "vae.pos.mlp", d, w, 3, rng)? };
        Ok(GeomSegVae { config, store: s, enc, geom, seg, pos })
    }

    /// Encoder trunk on the tape: returns `(mean, logvar)` vars.
    pub fn encode_vars(&self, tape: &mut Tape, input: &EncoderInput) -> Result<(Var, Var)> {
        let feats = constant(tape, &input.features);
        let x = self.enc.input.forward(tape, feats)?;
        let mut q = tape.gather_rows(x, &input.anchor_indices)?;
        q = self.enc.cross.forward(tape, q, x)?;
        for b in &self.enc.blocks {
            q = b.forward(tape, q, None)?;
        }
        let q = self.enc.norm.forward(tape, q)?;
        let mean = self.enc.mean.forward(tape, q)?;
        let logvar = self.enc.logvar.forward(tape, q)?;
        Ok((mean, logvar))
    }

    /// `mean + exp(logvar / 2) · noise`.
    pub fn reparameterize(&self, tape: &mut Tape, mean: Var, logvar: Var, noise: &Tensor) -> Result<Var> {
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let eps = constant(tape, noise);
        let jitter = tape.mul(std, eps)?;
        Ok(tape.add(mean, jitter)?)
    }

    pub fn encode(&self, input: &EncoderInput, noise: &Tensor) -> Result<LatentSet> {
        let mut tape = Tape::new(&self.store);
        let (m, lv) = self.encode_vars(&mut tape, input)?;
        let z = self.reparameterize(&mut tape, m, lv, noise)?;
        Ok(LatentSet {
            mean: tape.value(m).clone(),
            logvar: tape.value(lv).clone(),
            sample: tape.value(z).clone(),
            anchors: input.anchors.clone(),
        })
    }

    /// Posterior mean only.
    pub fn encode_mean(&self, input: &EncoderInput) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let (m, _) = self.encode_vars(&mut tape, input)?;
        Ok(tape.value(m).clone())
    }

    fn check_latents(&self, z: &Tensor) -> Result<()> {
        let want = [self.config.latents, self.config.latent_dim];
        if z.shape() != want {
            return Err(Error::Invalid(format!("latent shape {:?}, expected {want:?}", z.shape())));
        }
        Ok(())
    }

    /// Latent tokens of the occupancy decoder, `[L × width]`.
    pub fn geometry_tokens(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mut h = self.geom.latent_in.forward(tape, z)?;
        for b in &self.geom.blocks {
            h = b.forward(tape, h, None)?;
        }
        Ok(h)
    }

    /// Occupancy logits `[Q × 1]` for query points against decoded tokens.
    pub fn geometry_logits(&self, tape: &mut Tape, tokens: Var, queries: &[Vec3]) -> Result<Var> {
        let q = Tensor::new(vec![queries.len(), 3], queries.iter().flatten().copied().collect())?;
        let qf = fourier_features(&q, self.config.fourier_freqs);
        let qv = tape.constant(qf);
        let x = self.geom.query_in.forward(tape, qv)?;
        let x = self.geom.cross.forward(tape, x, tokens)?;
        let x = self.geom.norm.forward(tape, x)?;
        Ok(self.geom.out.forward(tape, x)?)
    }

    /// Returns a batched occupancy function in `[0,1]` for `z`.
    pub fn occupancy_fn(&self, z: &Tensor) -> Result<impl Fn(&[Vec3]) -> Vec<f64> + '_> {
        self.check_latents(z)?;
        let tokens = {
            let mut tape = Tape::new(&self.store);
            let zv = tape.constant(z.clone());
            let h = self.geometry_tokens(&mut tape, zv)?;
            tape.value(h).clone()
        };
        Ok(move |pts: &[Vec3]| {
            let mut tape = Tape::new(&self.store);
            let h = tape.constant(tokens.clone());
            let logits = self.geometry_logits(&mut tape, h, pts).expect("decoder shapes are fixed");
            tape.value(logits).data().iter().map(|&x| unipart_tensor::kernels::sigmoid(x)).collect()
        })
    }

    pub fn decode_geometry(&self, z: &Tensor, queries: &[Vec3]) -> Result<Vec<f64>> {
        let f = self.occupancy_fn(z)?;
        Ok(queries.chunks(8192).flat_map(&f).collect())
    }

    /// Mask logits `[P × L]` and IoU-score logits `[P × 1]` for prompts.
    pub fn segmentation_vars(&self, tape: &mut Tape, z: Var, prompts: &[usize]) -> Result<(Var, Var)> {
        let l = self.config.latents;
        if let Some(&bad) = prompts.iter().find(|&&p| p >= l) {
            return Err(Error::Invalid(format!("prompt {bad} out of range for {l} latents")));
        }
        let p = prompts.len();
        let h = self.seg.latent_in.forward(tape, z)?;
        let base = tape.param(self.seg.output_tokens);
        let out_idx: Vec<usize> = std::iter::repeat_n(0, p).chain(std::iter::repeat_n(1, p)).collect();
        let out_tokens = tape.gather_rows(base, &out_idx)?;
        let prompt_rows = tape.gather_rows(h, prompts)?;
        let pe = tape.param(self.seg.prompt_embed);
        let prompt_tokens = tape.add(prompt_rows, pe)?;
        let mut t = tape.concat(&[out_tokens, prompt_tokens], 0)?;
        let n = 3 * p;
        let mask: AttentionMask = (0..n * n).map(|k| (k / n) % p == (k % n) % p).collect::<Vec<_>>().into();
        for layer in &self.seg.layers {
            let a = layer.norm_self.forward(tape, t)?;
            let a = layer.self_attn.forward(tape, a, a, Some(&mask))?;
            t = tape.add(t, a)?;
            let q = layer.norm_q.forward(tape, t)?;
            let kv = layer.norm_kv.forward(tape, h)?;
            let c = layer.cross.forward(tape, q, kv, None)?;
            t = tape.add(t, c)?;
            let m = layer.norm_mlp.forward(tape, t)?;
            let m = layer.mlp.forward(tape, m)?;
            t = tape.add(t, m)?;
        }
        let iou_tok = tape.slice(t, 0, 0, p)?;
        let mask_tok = tape.slice(t, 0, p, 2 * p)?;
        let emb = self.seg.mask_mlp.forward(tape, mask_tok)?;
        let keys = self.seg.norm_keys.forward(tape, h)?;
        let keys = self.seg.keys.forward(tape, keys)?;
        let keys_t = tape.transpose(keys)?;
        let logits = tape.matmul(emb, keys_t)?;
        let logits = tape.scale(logits, 1.0 / (self.config.width as f64).sqrt());
        let iou = self.seg.iou_mlp.forward(tape, iou_tok)?;
        Ok((logits, iou))
    }

    pub fn decode_segmentation(&self, z: &Tensor, prompts: &[usize]) -> Result<PromptMasks> {
        self.check_latents(z)?;
        let mut tape = Tape::new(&self.store);
        let zv = tape.constant(z.clone());
        let (logits, iou) = self.segmentation_vars(&mut tape, zv, prompts)?;
        let scores = tape.value(iou).data().iter().map(|&x| unipart_tensor::kernels::sigmoid(x)).collect();
        Ok(PromptMasks { logits: tape.value(logits).clone(), scores })
    }

    pub fn position_var(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        Ok(self.pos.mlp.forward(tape, z)?)
    }

    pub fn decode_position(&self, z: &Tensor) -> Result<Vec<Vec3>> {
        self.check_latents(z)?;
        let mut tape = Tape::new(&self.store);
        let zv = tape.constant(z.clone());
        let p = self.position_var(&mut tape, zv)?;
        Ok(tape.value(p).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Gaussian KL to the standard normal: summed over channels, averaged
    /// over latents.
    pub fn kl_var(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Var> {
        let m2 = tape.square(mean);
        let ev = tape.exp(logvar);
        let a = tape.add(m2, ev)?;
        let a = tape.sub(a, logvar)?;
        let a = tape.add_scalar(a, -1.0);
        let per = tape.sum_axis(a, 1)?;
        let per = tape.scale(per, 0.5);
        Ok(tape.mean_all(per))
    }

    /// Full training loss. With `with_seg == false` the segmentation terms
    /// are skipped (geometry-only phase).
    pub fn loss(
        &self,
        tape: &mut Tape,
        input: &EncoderInput,
        draw: &VaeDraw,
        cfg: &VaeLossConfig,
        with_seg: bool,
    ) -> Result<(Var, VaeLossParts)> {
        let (mean, logvar) = self.encode_vars(tape, input)?;
        let z = self.reparameterize(tape, mean, logvar, &draw.noise)?;

        let tokens = self.geometry_tokens(tape, z)?;
        let logits = self.geometry_logits(tape, tokens, &draw.queries.points)?;
        let target = Tensor::new(vec![draw.queries.points.len(), 1], draw.queries.occupancy.clone())?;
        let recon = match cfg.recon {
            ReconLoss::Bce => tape.bce_with_logits(logits, &target)?,
            ReconLoss::Mse => {
                let p = tape.sigmoid(logits);
                let t = tape.constant(target);
                let d = tape.sub(p, t)?;
                let d = tape.square(d);
                tape.mean_all(d)
            }
        };
        let kl = Self::kl_var(tape, mean, logvar)?;
        let kl_w = tape.scale(kl, cfg.kl_weight);
        let mut total = tape.add(recon, kl_w)?;
        let mut parts = VaeLossParts { recon: tape.value(recon).item(), kl: tape.value(kl).item(), ..Default::default() };

        if with_seg {
            let (mask_logits, iou_logits) = self.segmentation_vars(tape, z, &draw.prompts)?;
            let (p, l) = (draw.prompts.len(), self.config.latents);
            let labels = &input.anchor_labels;
            let mut tdata = Vec::with_capacity(p * l);
            for &pr in &draw.prompts {
                tdata.extend(labels.iter().map(|&lb| if lb == labels[pr] { 1.0 } else { 0.0 }));
            }
            let targets = Tensor::new(vec![p, l], tdata)?;
            let focal = tape.sigmoid_focal(mask_logits, &targets, cfg.focal_gamma, None)?;

            let probs = tape.sigmoid(mask_logits);
            let tv = tape.constant(targets.clone());
            let inter = tape.mul(probs, tv)?;
            let inter = tape.sum_axis(inter, 1)?;
            let psum = tape.sum_axis(probs, 1)?;
            let tsum = Tensor::new(vec![p, 1], (0..p).map(|i| targets.row(i).iter().sum()).collect())?;
            let tsum = tape.constant(tsum);
            let num = tape.scale(inter, 2.0);
            let num = tape.add_scalar(num, 1.0);
            let den = tape.add(psum, tsum)?;
            let den = tape.add_scalar(den, 1.0);
            let ratio = tape.div(num, den)?;
            let dice = tape.mean_all(ratio);
            let dice = tape.neg(dice);
            let dice = tape.add_scalar(dice, 1.0);

            let ml = tape.value(mask_logits);
            let actual: Vec<f64> = (0..p).map(|i| hard_iou(ml.row(i), targets.row(i))).collect();
            let score = tape.sigmoid(iou_logits);
            let actual = tape.constant(Tensor::new(vec![p, 1], actual)?);
            let diff = tape.sub(score, actual)?;
            let diff = tape.square(diff);
            let iou = tape.mean_all(diff);

            let f = tape.scale(focal, cfg.focal_weight);
            let dw = tape.scale(dice, cfg.dice_weight);
            let iw = tape.scale(iou, cfg.iou_weight);
            let seg = tape.add(f, dw)?;
            let seg = tape.add(seg, iw)?;
            total = tape.add(total, seg)?;
            parts.focal = tape.value(focal).item();
            parts.dice = tape.value(dice).item();
            parts.iou = tape.value(iou).item();
            parts.seg = tape.value(seg).item();
        }
        parts.total = tape.value(total).item();
        Ok((total, parts))
    }

    /// Anchor regression loss for the position decoder: mean squared error
    /// over latents and coordinates, reading the posterior mean.
    pub fn position_loss(&self, tape: &mut Tape, input: &EncoderInput) -> Result<Var> {
        let (mean, _) = self.encode_vars(tape, input)?;
        let pred = self.position_var(tape, mean)?;
        let target = Tensor::new(vec![input.anchors.len(), 3], input.anchors.iter().flatten().copied().collect())?;
        let t = tape.constant(target);
        let d = tape.sub(pred, t)?;
        let d = tape.square(d);
        Ok(tape.mean_all(d))
    }
}

/// IoU between a thresholded logit row and a {0,1} target row; two empty
/// masks count as a perfect match.
pub fn hard_iou(logits: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &t) in logits.iter().zip(target) {
        let (a, b) = (x > 0.0, t > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
