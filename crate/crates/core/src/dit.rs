//! Building blocks shared by the whole-object and part diffusion
//! transformers: timestep embedding, adaptive-norm blocks with
//! cross-attention to condition tokens, and latent standardization.

use rand::Rng;
use unipart_tensor::nn::{timestep_embedding, Init, LayerNorm, Linear, Mlp, MultiHeadAttention};
use unipart_tensor::{AttentionMask, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::procgen::ConditionImage;

/// Shift/scale modulation of a parameter-free layer norm by a
/// `[1 × 2w]` slice `(shift, scale)`.
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let s = tape.add_scalar(scale, 1.0);
    let y = tape.mul(n, s)?;
    Ok(tape.add(y, shift)?)
}

/// Sinusoidal timestep features followed by an MLP, then SiLU; the result
/// feeds every modulation layer.
#[derive(Clone, Debug)]
pub struct TimeEmbedder {
    mlp: Mlp,
    width: usize,
}

impl TimeEmbedder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        Ok(TimeEmbedder { mlp: Mlp::new(store, name, width, width, width, rng)?, width })
    }

    pub fn forward(&self, tape: &mut Tape, t: f64) -> Result<Var> {
        let e = tape.constant(timestep_embedding(t, self.width));
        let h = self.mlp.forward(tape, e)?;
        Ok(tape.silu(h))
    }
}

/// Self-attention (optionally masked) and MLP under timestep modulation,
/// with a cross-attention sublayer to condition tokens in between.
#[derive(Clone, Debug)]
pub struct DitBlock {
    modulation: Linear,
    attn: MultiHeadAttention,
    norm_q: LayerNorm,
    norm_ctx: LayerNorm,
    cross: MultiHeadAttention,
    mlp: Mlp,
    width: usize,
}

impl DitBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DitBlock {
            modulation: Linear::with_init(store, &format!("{name}.modulation"), width, 4 * width, Init::Normal(0.02), true, rng)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, width, heads, rng)?,
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), width)?,
            norm_ctx: LayerNorm::new(store, &format!("{name}.norm_ctx"), width)?,
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), width, width, heads, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, 4 * width, width, rng)?,
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, temb: Var, ctx: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let w = self.width;
        let m = self.modulation.forward(tape, temb)?;
        let shift1 = tape.slice(m, 1, 0, w)?;
        let scale1 = tape.slice(m, 1, w, 2 * w)?;
        let shift2 = tape.slice(m, 1, 2 * w, 3 * w)?;
        let scale2 = tape.slice(m, 1, 3 * w, 4 * w)?;

        let h = modulate(tape, x, shift1, scale1)?;
        let a = self.attn.forward(tape, h, h, mask)?;
        let x = tape.add(x, a)?;

        let q = self.norm_q.forward(tape, x)?;
        let kv = self.norm_ctx.forward(tape, ctx)?;
        let c = self.cross.forward(tape, q, kv, None)?;
        let x = tape.add(x, c)?;

        let h = modulate(tape, x, shift2, scale2)?;
        let f = self.mlp.forward(tape, h)?;
        Ok(tape.add(x, f)?)
    }
}

/// Modulated norm and projection back to latent width.
#[derive(Clone, Debug)]
pub struct FinalLayer {
    modulation: Linear,
    out: Linear,
    width: usize,
}

impl FinalLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(FinalLayer {
            modulation: Linear::with_init(store, &format!("{name}.modulation"), width, 2 * width, Init::Normal(0.02), true, rng)?,
            out: Linear::with_init(store, &format!("{name}.out"), width, out_dim, Init::Normal(0.02), true, rng)?,
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, temb: Var) -> Result<Var> {
        let w = self.width;
        let m = self.modulation.forward(tape, temb)?;
        let shift = tape.slice(m, 1, 0, w)?;
        let scale = tape.slice(m, 1, w, 2 * w)?;
        let h = modulate(tape, x, shift, scale)?;
        Ok(self.out.forward(tape, h)?)
    }
}

/// Linear patch embedding of a condition image plus learned positions.
#[derive(Clone, Debug)]
pub struct ImageEmbedder {
    proj: Linear,
    positions: ParamId,
    patch: usize,
    tokens: usize,
}

impl ImageEmbedder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        image_size: usize,
        patch: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 || !image_size.is_multiple_of(patch) {
            return Err(Error::Config(format!("patch {patch} does not tile image size {image_size}")));
        }
        let tokens = (image_size / patch).pow(2);
        Ok(ImageEmbedder {
            proj: Linear::new(store, &format!("{name}.proj"), patch * patch * 2, width, rng)?,
            positions: store.add(format!("{name}.positions"), Tensor::randn(&[tokens, width], rng).map(|x| 0.02 * x))?,
            patch,
            tokens,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn forward(&self, tape: &mut Tape, image: &ConditionImage) -> Result<Var> {
        let patches = image.patches(self.patch)?;
        if patches.len() != self.tokens {
            return Err(Error::Invalid(format!("image gives {} patches, model expects {}", patches.len(), self.tokens)));
        }
        let x = tape.constant(Tensor::from_rows(&patches)?);
        let x = self.proj.forward(tape, x)?;
        let p = tape.param(self.positions);
        Ok(tape.add(x, p)?)
    }
}

/// Per-channel latent mean and standard deviation, kept as frozen
/// parameters so they travel with the checkpoint.
#[derive(Clone, Debug)]
pub struct LatentNorm {
    mean: ParamId,
    std: ParamId,
}

/// Floor on stored standard deviations.
const MIN_STD: f64 = 1e-6;

impl LatentNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let mean = store.add(format!("{name}.mean"), Tensor::zeros(&[1, dim]))?;
        let std = store.add(format!("{name}.std"), Tensor::ones(&[1, dim]))?;
        store.set_trainable(&format!("{name}."), false);
        Ok(LatentNorm { mean, std })
    }

    /// Fits the statistics to the rows of all `latents`.
    pub fn fit(&self, store: &mut ParamStore, latents: &[&Tensor]) -> Result<()> {
        let d = store.get(self.mean).numel();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for z in latents {
            if z.cols() != d {
                return Err(Error::Invalid(format!("latent width {} but statistics have {d}", z.cols())));
            }
            for r in 0..z.rows() {
                for (c, &v) in z.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += z.rows();
        }
        if n == 0 {
            return Err(Error::Invalid("no latents to fit statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> =
            sq.iter().zip(&mean).map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(MIN_STD)).collect();
        *store.get_mut(self.mean) = Tensor::new(vec![1, d], mean)?;
        *store.get_mut(self.std) = Tensor::new(vec![1, d], std)?;
        Ok(())
    }

    pub fn normalize(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let (m, s) = (store.get(self.mean).data(), store.get(self.std).data());
        self.map(z, m.len(), |c, v| (v - m[c]) / s[c])
    }

    pub fn denormalize(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let (m, s) = (store.get(self.mean).data(), store.get(self.std).data());
        self.map(z, m.len(), |c, v| v * s[c] + m[c])
    }

    fn map(&self, z: &Tensor, d: usize, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
        if z.cols() != d {
            return Err(Error::Invalid(format!("latent width {} but statistics have {d}", z.cols())));
        }
        let data = z.data().iter().enumerate().map(|(i, &v)| f(i % d, v)).collect();
        Ok(Tensor::new(z.shape().to_vec(), data)?)
    }
}
