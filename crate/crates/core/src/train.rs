//! Optimizer plumbing shared by every training stage.

use serde::{Deserialize, Serialize};
use unipart_tensor::gradcheck::{check_params, GradCheckReport, FD_STEP};
use unipart_tensor::{AdamW, AdamWConfig, ParamGrads, ParamStore, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, weight_decay: 0.01, grad_clip: 1.0, warmup_steps: 100 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("lr must be positive, weight_decay and grad_clip non-negative".into()));
        }
        Ok(())
    }
}

/// Loss value and parameter gradients of one forward pass.
pub fn loss_and_grads(store: &ParamStore, f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, tape.param_grads(&grads)))
}

/// AdamW with warmup and clipping, tagged with a stage name for errors.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub stage: &'static str,
    pub config: OptimConfig,
    pub adam: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(stage: &'static str, store: &ParamStore, config: OptimConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamW::new(store, AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..Default::default() });
        Ok(Trainer { stage, config, adam, step: 0 })
    }

    /// Averages `grads` over `batch` examples and applies one update.
    pub fn apply(&mut self, store: &mut ParamStore, mut grads: ParamGrads, loss: f64, batch: usize) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: self.stage, step: self.step });
        }
        grads.scale(1.0 / batch.max(1) as f64);
        if self.config.grad_clip > 0.0 {
            grads.clip_global_norm(self.config.grad_clip);
        }
        let warm = if self.config.warmup_steps == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.adam.set_lr(self.config.lr * warm);
        self.adam.step(store, &grads).map_err(|_| Error::NonFinite { stage: self.stage, step: self.step })?;
        self.step += 1;
        Ok(())
    }
}

/// Runs `batch` forward/backward passes, sums their gradients, then steps.
/// Returns the mean loss.
pub fn batch_step(
    trainer: &mut Trainer,
    store: &mut ParamStore,
    batch: usize,
    mut example: impl FnMut(&ParamStore, usize) -> Result<(f64, ParamGrads)>,
) -> Result<f64> {
    let mut total = ParamGrads::zeros_like(store);
    let mut loss = 0.0;
    for b in 0..batch {
        let (l, g) = example(store, b)?;
        loss += l;
        total.accumulate(&g);
    }
    let mean = loss / batch.max(1) as f64;
    trainer.apply(store, total, mean, batch)?;
    Ok(mean)
}

/// Compares backprop gradients of `loss` against central finite differences
/// for every trainable scalar of `store`.
pub fn gradient_check(
    store: &mut ParamStore,
    loss: impl Fn(&mut Tape) -> Result<Var>,
    floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(store, &loss)?;
    let ids: Vec<_> = store.ids().collect();
    let mut failure = None;
    let report = check_params(
        store,
        &ids,
        |id| grads.get(id).data().to_vec(),
        |s| {
            let mut tape = Tape::new(s);
            match loss(&mut tape) {
                Ok(v) => tape.value(v).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        FD_STEP,
        floor,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
