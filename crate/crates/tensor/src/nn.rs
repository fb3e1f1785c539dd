//! Parameterized building blocks shared by every network in the pipeline.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttentionMask, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn build<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    [n] => (*n, *n),
                    _ => (shape.iter().product(), shape.iter().product()),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape, -a, a, rng)
            }
            Init::Normal(std) => Tensor::randn(shape, rng).map(|x| x * std),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        }
    }
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::Xavier, true, rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.build(&[in_dim, out_dim], rng))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Heads { width: dim, heads });
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    /// Self-attention when `kv_in == q_in`, cross-attention otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_in: Var,
        kv_in: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, q_in)?;
        let k = self.k.forward(tape, kv_in)?;
        let v = self.v.forward(tape, kv_in)?;
        let a = tape.attention(q, k, v, self.heads, mask)?;
        self.out.forward(tape, a)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SelfAttentionBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}

/// Pre-norm cross-attention block: queries attend to a separate context.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CrossAttentionBlock {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim)?,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), kv_dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, kv_dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, context: Var) -> Result<Var> {
        let hq = self.norm_q.forward(tape, x)?;
        let hkv = self.norm_kv.forward(tape, context)?;
        let a = self.attn.forward(tape, hq, hkv, None)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}

/// Sinusoidal embedding of a scalar timestep, shape `[1×dim]`.
///
/// The first half of the channels holds `sin(t·1000·ω_i)`, the second half
/// the matching cosines, with `ω_i = 10000^(-i/half)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new(vec![1, dim], out).expect("timestep embedding shape")
}

/// Fourier features of 3-D points: `[x, sin(2^k π x), cos(2^k π x)]` for
/// `k < num_freqs`, giving `3 + 6·num_freqs` channels per point.
pub fn fourier_features(points: &Tensor, num_freqs: usize) -> Tensor {
    let n = points.rows();
    let width = 3 + 6 * num_freqs;
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        let p = points.row(i);
        out.extend_from_slice(&p[..3]);
        for k in 0..num_freqs {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            for &x in &p[..3] {
                out.push((f * x).sin());
            }
            for &x in &p[..3] {
                out.push((f * x).cos());
            }
        }
    }
    Tensor::new(vec![n, width], out).expect("fourier feature shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = MultiHeadAttention::new(&mut store, "a", 6, 6, 4, &mut rng).unwrap_err();
        assert!(matches!(err, TensorError::Heads { width: 6, heads: 4 }));
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::randn(&[1, 4], &mut rng));
        let y = attn.forward(&mut tape, x, x, None).unwrap();
        let v = attn.v.forward(&mut tape, x).unwrap();
        let expected = attn.out.forward(&mut tape, v).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expected)) < 1e-14);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = SelfAttentionBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        let row = Tensor::randn(&[1, 8], &mut rng);
        let x = Tensor::vstack(&[&row, &row]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(x);
        let y = block.forward(&mut tape, x, None).unwrap();
        let out = tape.value(y);
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(0.0, 8);
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
    }

    #[test]
    fn fourier_width() {
        let p = Tensor::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let f = fourier_features(&p, 4);
        assert_eq!(f.shape(), &[1, 27]);
        assert!((f.data()[3] - (std::f64::consts::PI * 0.1).sin()).abs() < 1e-15);
    }
}
