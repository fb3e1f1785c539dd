//! VAE and anchor-decoder training loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unipart_tensor::{Checkpoint, ParamStore};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model_io;
use crate::procgen::{sample_queries, sample_surface, FieldQuery, ShapeSpec};
use crate::train::{batch_step, loss_and_grads, OptimConfig, Trainer};
use crate::vae::{EncoderInput, GeomSegVae, VaeConfig, VaeDraw, VaeLossConfig, VaeLossParts, POSITION_PREFIX};

pub const VAE_KIND: &str = "geomseg-vae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Initial steps trained on geometry alone, with the label channel zeroed.
    pub geometry_steps: usize,
    /// Probability that an example is a single part (in global or
    /// canonical coordinates) instead of the whole object.
    pub part_fraction: f64,
    pub optim: OptimConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 20_000,
            batch_size: 4,
            geometry_steps: 5_000,
            part_fraction: 0.3,
            optim: OptimConfig { lr: 3e-4, ..OptimConfig::default() },
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PosTrainConfig {
    fn default() -> Self {
        PosTrainConfig {
            steps: 5_000,
            batch_size: 4,
            optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            seed: 0,
            log_every: 100,
        }
    }
}

/// Which view of an object a training example shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExampleView {
    Whole,
    PartGlobal(usize),
    PartCanonical(usize),
}

/// Encoder input and occupancy supervision for one example.
#[derive(Clone, Debug)]
pub struct Example {
    pub view: ExampleView,
    pub spec: ShapeSpec,
    pub input: EncoderInput,
    pub queries: FieldQuery,
}

/// Builds the example for `view` of `record`. Whole views reuse the stored
/// surface samples; part views resample the part's own surface.
pub fn make_example<R: Rng + ?Sized>(
    record: &Record,
    view: ExampleView,
    cfg: &VaeConfig,
    loss: &VaeLossConfig,
    rng: &mut R,
) -> Result<Example> {
    let (spec, surface, parts) = match view {
        ExampleView::Whole => (record.spec.clone(), record.surface.prefix(cfg.input_points), record.spec.num_parts()),
        ExampleView::PartGlobal(i) | ExampleView::PartCanonical(i) => {
            let mut spec = record.spec.part(i);
            if matches!(view, ExampleView::PartCanonical(_)) {
                spec = spec.normalized_unit();
            }
            let surface = sample_surface(&spec, cfg.input_points, rng)?;
            (spec, surface, 1)
        }
    };
    let input = EncoderInput::new(&surface, parts, cfg)?;
    let queries = sample_queries(&spec, &surface, loss.queries, loss.near_fraction, loss.near_std, rng);
    Ok(Example { view, spec, input, queries })
}

fn draw_view<R: Rng + ?Sized>(record: &Record, part_fraction: f64, rng: &mut R) -> ExampleView {
    if rng.random::<f64>() < part_fraction {
        let i = rng.random_range(0..record.spec.num_parts());
        if rng.random::<bool>() {
            ExampleView::PartGlobal(i)
        } else {
            ExampleView::PartCanonical(i)
        }
    } else {
        ExampleView::Whole
    }
}

impl GeomSegVae {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        model_io::to_checkpoint(VAE_KIND, &self.config, &self.store)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (config, ck): (VaeConfig, _) = model_io::from_checkpoint(ck, VAE_KIND)?;
        let mut vae = GeomSegVae::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_into(&mut vae.store)?;
        Ok(vae)
    }

    /// Runs `f` with the parameter store moved out so the network can be
    /// borrowed immutably while the store is updated.
    pub fn with_store<T>(&mut self, f: impl FnOnce(&GeomSegVae, &mut ParamStore) -> Result<T>) -> Result<T> {
        let mut store = std::mem::take(&mut self.store);
        let out = f(self, &mut store);
        self.store = store;
        out
    }
}

/// Trains the encoder, occupancy and mask decoders. The anchor decoder is
/// frozen throughout. `on_log` receives the step index and batch-mean loss
/// parts every `log_every` steps.
pub fn train_vae(
    vae: &mut GeomSegVae,
    records: &[Record],
    loss_cfg: &VaeLossConfig,
    cfg: &VaeTrainConfig,
    mut on_log: impl FnMut(usize, &VaeLossParts),
) -> Result<Vec<VaeLossParts>> {
    loss_cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Invalid("no training records".into()));
    }
    if !(0.0..=1.0).contains(&cfg.part_fraction) {
        return Err(Error::Config("part_fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    vae.store.set_trainable("", true);
    vae.store.set_trainable(POSITION_PREFIX, false);
    let vcfg = vae.config.clone();
    let result = vae.with_store(|net, store| {
        let mut trainer = Trainer::new("train-vae", store, cfg.optim)?;
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let with_seg = step >= cfg.geometry_steps;
            let mut acc = VaeLossParts::default();
            batch_step(&mut trainer, store, cfg.batch_size, |s, _| {
                let record = &records[rng.random_range(0..records.len())];
                let view = draw_view(record, cfg.part_fraction, &mut rng);
                let ex = make_example(record, view, &vcfg, loss_cfg, &mut rng)?;
                let input = if with_seg { ex.input } else { ex.input.without_labels() };
                let draw = VaeDraw::new(ex.queries, &vcfg, loss_cfg, &mut rng);
                let mut parts = VaeLossParts::default();
                let out = loss_and_grads(s, |tape| {
                    let (loss, p) = net.loss(tape, &input, &draw, loss_cfg, with_seg)?;
                    parts = p;
                    Ok(loss)
                })?;
                add_parts(&mut acc, &parts);
                Ok(out)
            })?;
            scale_parts(&mut acc, 1.0 / cfg.batch_size.max(1) as f64);
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
                on_log(step, &acc);
            }
            history.push(acc);
        }
        Ok(history)
    });
    vae.store.set_trainable("", true);
    result
}

/// Trains only the anchor decoder on posterior means of whole objects.
pub fn train_position(
    vae: &mut GeomSegVae,
    records: &[Record],
    cfg: &PosTrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Invalid("no training records".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vcfg = vae.config.clone();
    let inputs = records
        .iter()
        .map(|r| EncoderInput::new(&r.surface, r.spec.num_parts(), &vcfg))
        .collect::<Result<Vec<_>>>()?;
    vae.store.set_trainable("", false);
    vae.store.set_trainable(POSITION_PREFIX, true);
    let result = vae.with_store(|net, store| {
        let mut trainer = Trainer::new("train-pos", store, cfg.optim)?;
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let loss = batch_step(&mut trainer, store, cfg.batch_size, |s, _| {
                let input = &inputs[rng.random_range(0..inputs.len())];
                loss_and_grads(s, |tape| net.position_loss(tape, input))
            })?;
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
                on_log(step, loss);
            }
            history.push(loss);
        }
        Ok(history)
    });
    vae.store.set_trainable("", true);
    result
}

fn add_parts(acc: &mut VaeLossParts, p: &VaeLossParts) {
    acc.recon += p.recon;
    acc.focal += p.focal;
    acc.dice += p.dice;
    acc.iou += p.iou;
    acc.seg += p.seg;
    acc.kl += p.kl;
    acc.total += p.total;
}

fn scale_parts(acc: &mut VaeLossParts, s: f64) {
    for v in [&mut acc.recon, &mut acc.focal, &mut acc.dice, &mut acc.iou, &mut acc.seg, &mut acc.kl, &mut acc.total] {
        *v *= s;
    }
}
