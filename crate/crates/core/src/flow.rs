//! Rectified-flow training targets and the Euler sampler.
//!
//! Data sits at `t = 0` and noise at `t = 1`; models predict the constant
//! velocity `ε − Z0` of the straight path between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use unipart_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Probability of replacing the image condition by the learned null token.
pub const CONDITION_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, cfg_scale: 5.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("cfg_scale {} must be non-negative", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Training-time distribution of `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    #[default]
    Uniform,
    /// `sigmoid(n)` with `n ~ N(0, 1)`.
    LogitNormal,
}

impl TimeSampling {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            TimeSampling::Uniform => rng.random::<f64>(),
            TimeSampling::LogitNormal => {
                let n: f64 = rng.sample(StandardNormal);
                1.0 / (1.0 + (-n).exp())
            }
        }
    }
}

fn check_shapes(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1 − t)·Z0 + t·ε`, returning the endpoints bit-exactly at `t ∈ {0, 1}`.
pub fn interpolate(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_shapes("interpolate", z0, eps)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("interpolate: t = {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    Ok(z0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?)
}

/// Velocity target `ε − Z0`.
pub fn cfm_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_shapes("cfm_target", z0, eps)?;
    Ok(eps.zip_map(z0, |e, a| e - a)?)
}

/// Mean squared error between a predicted velocity and `target` on the tape.
pub fn cfm_loss_var(tape: &mut Tape, v_pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(v_pred, t)?;
    let d = tape.square(d);
    Ok(tape.mean_all(d))
}

pub fn cfm_loss(v_pred: &Tensor, z0: &Tensor, eps: &Tensor) -> Result<f64> {
    let target = cfm_target(z0, eps)?;
    check_shapes("cfm_loss", v_pred, &target)?;
    let n = target.numel() as f64;
    Ok(v_pred.data().iter().zip(target.data()).map(|(v, t)| (v - t) * (v - t)).sum::<f64>() / n)
}

/// `v_u + s·(v_c − v_u)`; scale 0 and 1 return the matching branch exactly.
pub fn cfg_combine(v_uncond: &Tensor, v_cond: &Tensor, scale: f64) -> Result<Tensor> {
    check_shapes("cfg_combine", v_uncond, v_cond)?;
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    Ok(v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))?)
}

/// Bernoulli draw for condition dropout.
pub fn drop_condition<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Standard normal starting noise for a sampling run.
pub fn init_noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Euler integration from `t = 1` to `t = 0` over `steps` uniform steps,
/// starting at `init`. `velocity(z, t)` gives the (already guided) velocity.
pub fn sample(
    init: Tensor,
    steps: usize,
    stage: &'static str,
    mut velocity: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("sampler steps must be at least 1".into()));
    }
    let mut z = init;
    for k in 0..steps {
        let t = 1.0 - k as f64 / steps as f64;
        let t_next = 1.0 - (k + 1) as f64 / steps as f64;
        let dt = t - t_next;
        let v = velocity(&z, t)?;
        check_shapes("sample", &z, &v)?;
        z = z.zip_map(&v, |a, b| a - dt * b)?;
        if !z.is_finite() {
            return Err(Error::NonFinite { stage, step: k });
        }
    }
    Ok(z)
}

/// Guided sampling: `velocity(z, t, conditional)` is queried for both
/// branches and combined with `cfg_combine`. Scale 1 skips the
/// unconditional branch.
pub fn sample_guided(
    init: Tensor,
    cfg: &SamplerConfig,
    stage: &'static str,
    mut velocity: impl FnMut(&Tensor, f64, bool) -> Result<Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    sample(init, cfg.steps, stage, |z, t| {
        let vc = velocity(z, t, true)?;
        if cfg.cfg_scale == 1.0 {
            return Ok(vc);
        }
        let vu = velocity(z, t, false)?;
        cfg_combine(&vu, &vc, cfg.cfg_scale)
    })
}
