use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unipart_core::flow::{sample, SamplerConfig};
use unipart_core::part_dit::*;
use unipart_core::procgen::{generate_shape, render_condition, Camera, ConditionImage, ShapeConfig};
use unipart_core::train::gradient_check;
use unipart_core::whole_dit::*;
use unipart_tensor::{Checkpoint, Tape, Tensor};

fn image(seed: u64) -> ConditionImage {
    let spec = generate_shape(seed, &ShapeConfig::default()).unwrap();
    render_condition(&spec, &Camera { resolution: 16 })
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn micro_whole() -> WholeDit {
    let cfg = WholeDitConfig { width: 8, depth: 2, heads: 2, patch: 8, image_size: 16, latents: 4, latent_dim: 8 };
    WholeDit::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn micro_part(cfg: PartDitConfig) -> PartDit {
    PartDit::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
}

fn micro_part_config() -> PartDitConfig {
    PartDitConfig { width: 8, depth: 2, heads: 2, patch: 8, image_size: 16, latents: 4, latent_dim: 8, ..Default::default() }
}

fn part_cond(seed: u64) -> PartCondition {
    let anchors: Vec<[f64; 3]> = (0..4).map(|i| [0.1 * i as f64, -0.2, 0.3]).collect();
    PartCondition::new(Some(image(seed)), randn(&[4, 8], seed), vec![2, 0], &anchors).unwrap()
}

#[test]
fn whole_output_shape_and_permutation_equivariance() {
    let m = micro_whole();
    let img = image(0);
    let z = randn(&[4, 8], 3);
    let v = m.velocity(&z, 0.4, Some(&img)).unwrap();
    assert_eq!(v.shape(), &[4, 8]);
    let perm = [2, 0, 3, 1];
    let vp = m.velocity(&z.gather_rows(&perm), 0.4, Some(&img)).unwrap();
    assert!(vp.max_abs_diff(&v.gather_rows(&perm)) < 1e-12);
    assert!(m.velocity(&randn(&[4, 5], 1), 0.4, None).is_err());
    // Works for any token count.
    assert_eq!(m.velocity(&randn(&[7, 8], 1), 0.4, None).unwrap().shape(), &[7, 8]);
}

#[test]
fn whole_gradcheck() {
    let mut m = micro_whole();
    let z0 = randn(&[4, 8], 4);
    let eps = randn(&[4, 8], 5);
    let img = image(1);
    for cond in [Some(&img), None] {
        let report = m.with_store(|net, store| gradient_check(store, |t| net.loss(t, &z0, &eps, 0.37, cond), 1e-5)).unwrap();
        assert!(report.checked > 1000);
        assert!(report.max_rel_error < 1e-4, "{:?}", report.worst);
    }
}

#[test]
fn dropped_condition_gives_no_patch_gradient() {
    let m = micro_whole();
    let z0 = randn(&[4, 8], 4);
    let eps = randn(&[4, 8], 5);
    let mut tape = Tape::new(&m.store);
    let l = m.loss(&mut tape, &z0, &eps, 0.5, None).unwrap();
    let v = tape.value(l).item();
    assert!(v.is_finite() && v > 0.0);
    let g = tape.param_grads(&tape.backward(l).unwrap());
    for (id, name, _) in m.store.iter() {
        if name.starts_with("whole.image.") {
            assert!(g.get(id).data().iter().all(|&x| x == 0.0), "{name}");
        }
    }
    let null = m.store.id("whole.null").unwrap();
    assert!(g.get(null).data().iter().any(|&x| x != 0.0));
}

#[test]
fn whole_generation_is_seeded_and_cfg_one_is_conditional() {
    let m = micro_whole();
    let img = image(2);
    let s = SamplerConfig { steps: 5, cfg_scale: 3.0, seed: 7 };
    assert_eq!(m.generate(&img, &s).unwrap(), m.generate(&img, &s).unwrap());
    let one = SamplerConfig { cfg_scale: 1.0, ..s };
    let init = randn(&[4, 8], 8);
    let a = m.generate_from(&img, &one, init.clone()).unwrap();
    let b = sample(init, 5, "x", |z, t| m.velocity(z, t, Some(&img))).unwrap();
    assert_eq!(a, m.norm.denormalize(&m.store, &b).unwrap());
}

#[test]
fn whole_training_fits_stats_and_leaves_checkpoint_round_trip() {
    let mut m = micro_whole();
    let examples: Vec<_> = (0..3)
        .map(|i| WholeExample { latent: randn(&[4, 8], 20 + i).map(|x| 3.0 * x + 1.0), image: image(i) })
        .collect();
    let cfg = DiffusionTrainConfig { steps: 40, batch_size: 2, log_every: 0, ..Default::default() };
    let hist = train_whole(&mut m, &examples, &cfg, |_, _| {}).unwrap();
    assert_eq!(hist.len(), 40);
    assert!(hist.iter().all(|l| l.is_finite()));
    let z = m.norm.normalize(&m.store, &examples[0].latent).unwrap();
    assert!(m.norm.denormalize(&m.store, &z).unwrap().max_abs_diff(&examples[0].latent) < 1e-12);
    // Standardized training latents have per-channel mean ~0.
    let all: Vec<Tensor> = examples.iter().map(|e| m.norm.normalize(&m.store, &e.latent).unwrap()).collect();
    let mean0: f64 = all.iter().map(|t| (0..4).map(|r| t.row(r)[0]).sum::<f64>()).sum::<f64>() / 12.0;
    assert!(mean0.abs() < 1e-12);

    let back = WholeDit::from_checkpoint(Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
    let img = image(0);
    assert_eq!(back.velocity(&z, 0.3, Some(&img)).unwrap(), m.velocity(&z, 0.3, Some(&img)).unwrap());
    let s = SamplerConfig { steps: 3, ..Default::default() };
    assert_eq!(back.generate(&img, &s).unwrap(), m.generate(&img, &s).unwrap());
    assert!(PartDit::from_checkpoint(m.to_checkpoint().unwrap()).is_err());
}

#[test]
fn part_gradcheck_for_every_toggle() {
    let toggles = [
        PartDitConfig::default(),
        PartDitConfig { use_ncs: false, ..Default::default() },
        PartDitConfig { local_attention: false, ..Default::default() },
        PartDitConfig { space_embedding: false, ..Default::default() },
        PartDitConfig { point_condition: true, ..Default::default() },
        PartDitConfig { whole_condition: false, ..Default::default() },
    ];
    for t in toggles {
        let cfg = PartDitConfig { use_ncs: t.use_ncs, local_attention: t.local_attention, space_embedding: t.space_embedding, point_condition: t.point_condition, whole_condition: t.whole_condition, ..micro_part_config() };
        let mut m = micro_part(cfg.clone());
        let cond = part_cond(3);
        let target = DualSpaceLatent { gcs: randn(&[4, 8], 30), ncs: cfg.use_ncs.then(|| randn(&[4, 8], 31)) };
        let n = cfg.spaces() * 4;
        let eps = randn(&[n, 8], 32);
        let whole_n = m.whole_normalized(&cond).unwrap();
        let report = m
            .with_store(|net, store| {
                gradient_check(store, |tape| Ok(net.loss(tape, &target, &cond, &whole_n, &eps, 0.61, cond.image.as_ref())?.0), 1e-5)
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "{cfg:?}: {:?}", report.worst);
    }
}

#[test]
fn part_loss_is_sum_over_spaces() {
    let m = micro_part(micro_part_config());
    let cond = part_cond(4);
    let target = DualSpaceLatent { gcs: randn(&[4, 8], 1), ncs: Some(randn(&[4, 8], 2)) };
    let eps = randn(&[8, 8], 3);
    let whole_n = m.whole_normalized(&cond).unwrap();
    let mut tape = Tape::new(&m.store);
    let (total, per) = m.loss(&mut tape, &target, &cond, &whole_n, &eps, 0.2, None).unwrap();
    assert_eq!(per.len(), 2);
    assert_eq!(tape.value(total).item(), tape.value(per[0]).item() + tape.value(per[1]).item());
}

#[test]
fn local_mask_is_block_diagonal() {
    let m = micro_part(micro_part_config());
    let mask = m.local_mask();
    let spaces = m.token_spaces();
    assert_eq!(spaces, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    for a in 0..8 {
        for b in 0..8 {
            assert_eq!(mask[a * 8 + b], spaces[a] == spaces[b]);
        }
    }
    let cfg = micro_part_config();
    assert!(cfg.block_is_local(0) && !cfg.block_is_local(1) && cfg.block_is_local(2));
    assert!(!PartDitConfig { local_attention: false, ..cfg }.block_is_local(0));
}

fn gcs_rows(v: &Tensor) -> Tensor {
    Tensor::from_rows(&(0..4).map(|r| v.row(r).to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn local_blocks_isolate_spaces_and_global_blocks_mix_them() {
    let cond = part_cond(5);
    let z = randn(&[8, 8], 6);
    let mut z_zero = z.clone();
    for r in 4..8 {
        z_zero.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
    }
    let local = micro_part(PartDitConfig { depth: 1, ..micro_part_config() });
    let w = local.whole_normalized(&cond).unwrap();
    let a = local.velocity(&z, 0.3, &cond, &w, cond.image.as_ref()).unwrap();
    let b = local.velocity(&z_zero, 0.3, &cond, &w, cond.image.as_ref()).unwrap();
    assert_eq!(gcs_rows(&a), gcs_rows(&b));

    let global = micro_part(PartDitConfig { depth: 1, local_attention: false, ..micro_part_config() });
    let a = global.velocity(&z, 0.3, &cond, &w, cond.image.as_ref()).unwrap();
    let b = global.velocity(&z_zero, 0.3, &cond, &w, cond.image.as_ref()).unwrap();
    assert!(gcs_rows(&a).max_abs_diff(&gcs_rows(&b)) > 0.0);
}

#[test]
fn swapping_space_embeddings_changes_outputs() {
    let mut m = micro_part(micro_part_config());
    let cond = part_cond(7);
    let z = randn(&[8, 8], 8);
    let w = m.whole_normalized(&cond).unwrap();
    let a = m.velocity(&z, 0.5, &cond, &w, None).unwrap();
    let id = m.store.id("part.space").unwrap();
    let e = m.store.get(id).clone();
    *m.store.get_mut(id) = e.gather_rows(&[1, 0]);
    let b = m.velocity(&z, 0.5, &cond, &w, None).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

fn names(cfg: PartDitConfig) -> BTreeSet<(String, Vec<usize>)> {
    micro_part(cfg).store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect()
}

#[test]
fn toggles_touch_only_their_own_parameters() {
    let base = names(micro_part_config());
    let diff = |cfg: PartDitConfig| -> Vec<String> {
        let other = names(cfg);
        base.symmetric_difference(&other).map(|(n, _)| n.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    assert!(diff(PartDitConfig { use_ncs: false, ..micro_part_config() }).is_empty());
    assert!(diff(PartDitConfig { local_attention: false, ..micro_part_config() }).is_empty());
    assert_eq!(diff(PartDitConfig { space_embedding: false, ..micro_part_config() }), vec!["part.space"]);
    assert_eq!(
        diff(PartDitConfig { point_condition: true, ..micro_part_config() }),
        vec!["part.part_in.bias", "part.part_in.weight", "part.point_in.bias", "part.point_in.weight"]
    );
    assert_eq!(
        diff(PartDitConfig { whole_condition: false, ..micro_part_config() }),
        vec!["part.whole_in.bias", "part.whole_in.weight"]
    );
}

#[test]
fn part_condition_padding_and_generation() {
    let cond = part_cond(9);
    assert_eq!(cond.group, vec![0, 2]);
    let padded = pad_rows(&cond.whole.gather_rows(&cond.group), 4, 2).unwrap();
    assert_eq!(padded.shape(), &[4, 9]);
    assert_eq!((0..4).map(|r| padded.row(r)[8]).collect::<Vec<_>>(), vec![1.0, 1.0, 0.0, 0.0]);
    assert!(padded.row(3).iter().all(|&x| x == 0.0));
    assert!(PartCondition::new(None, randn(&[4, 8], 1), vec![], &[[0.0; 3]; 4]).is_err());

    let m = micro_part(micro_part_config());
    let s = SamplerConfig { steps: 4, cfg_scale: 2.0, seed: 3 };
    let a = m.generate(&cond, &s).unwrap();
    assert_eq!(a, m.generate(&cond, &s).unwrap());
    assert_eq!(a.gcs.shape(), &[4, 8]);
    assert_eq!(a.ncs.as_ref().unwrap().shape(), &[4, 8]);
    let g = micro_part(PartDitConfig { use_ncs: false, ..micro_part_config() }).generate(&cond, &s).unwrap();
    assert!(g.ncs.is_none());
}

#[test]
fn part_training_runs_and_round_trips() {
    let mut m = micro_part(micro_part_config());
    let examples: Vec<_> = (0..3)
        .map(|i| PartExample {
            target: DualSpaceLatent { gcs: randn(&[4, 8], 40 + i), ncs: Some(randn(&[4, 8], 50 + i)) },
            cond: part_cond(i),
        })
        .collect();
    let cfg = DiffusionTrainConfig { steps: 20, batch_size: 2, log_every: 0, ..Default::default() };
    let hist = train_part(&mut m, &examples, &cfg, |_, _| {}).unwrap();
    assert!(hist.iter().all(|l| l.is_finite() && *l > 0.0));
    let back = PartDit::from_checkpoint(m.to_checkpoint().unwrap()).unwrap();
    let s = SamplerConfig { steps: 2, ..Default::default() };
    assert_eq!(back.generate(&examples[0].cond, &s).unwrap(), m.generate(&examples[0].cond, &s).unwrap());
}
