use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unipart_core::flow::*;
use unipart_core::Error;
use unipart_tensor::{Tape, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn endpoints_and_midpoint() {
    let z0 = randn(&[5, 3], 1);
    let eps = randn(&[5, 3], 2);
    assert_eq!(interpolate(&z0, &eps, 0.0).unwrap(), z0);
    assert_eq!(interpolate(&z0, &eps, 1.0).unwrap(), eps);
    let mid = interpolate(&Tensor::zeros(&[2, 2]), &Tensor::full(&[2, 2], 2.0), 0.5).unwrap();
    assert_eq!(mid, Tensor::full(&[2, 2], 1.0));
    assert!(interpolate(&z0, &eps, 1.5).is_err());
    assert!(interpolate(&z0, &randn(&[3, 5], 3), 0.5).is_err());
}

#[test]
fn cfm_loss_examples() {
    let z0 = randn(&[4, 2], 1);
    let eps = randn(&[4, 2], 2);
    let target = cfm_target(&z0, &eps).unwrap();
    assert_eq!(cfm_loss(&target, &z0, &eps).unwrap(), 0.0);
    let zeros = Tensor::zeros(&[3, 3]);
    assert_eq!(cfm_loss(&zeros, &zeros, &Tensor::ones(&[3, 3])).unwrap(), 1.0);

    let mut tape = Tape::standalone();
    let v = tape.constant(target.clone());
    let l = cfm_loss_var(&mut tape, v, &target).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn cfm_gradient_matches_formula_and_finite_differences() {
    let z0 = randn(&[3, 4], 5);
    let eps = randn(&[3, 4], 6);
    let vp = randn(&[3, 4], 7);
    let target = cfm_target(&z0, &eps).unwrap();
    let mut tape = Tape::standalone();
    let v = tape.leaf(vp.clone());
    let l = cfm_loss_var(&mut tape, v, &target).unwrap();
    let g = tape.backward(l).unwrap();
    let grad = g.wrt(v).unwrap();
    let n = vp.numel() as f64;
    let h = 1e-5;
    for i in 0..vp.numel() {
        let formula = 2.0 * (vp.data()[i] - target.data()[i]) / n;
        assert!((grad[i] - formula).abs() < 1e-15);
        let mut up = vp.clone();
        up.data_mut()[i] += h;
        let mut down = vp.clone();
        down.data_mut()[i] -= h;
        let fd = (cfm_loss(&up, &z0, &eps).unwrap() - cfm_loss(&down, &z0, &eps).unwrap()) / (2.0 * h);
        assert!((grad[i] - fd).abs() <= 1e-8 * grad[i].abs().max(1e-3));
    }
}

#[test]
fn exact_velocity_oracle_recovers_data() {
    let z0 = randn(&[16, 8], 11);
    let eps = randn(&[16, 8], 12);
    let v = cfm_target(&z0, &eps).unwrap();
    for steps in [1, 10, 50] {
        let out = sample(eps.clone(), steps, "oracle", |_, _| Ok(v.clone())).unwrap();
        assert!(out.max_abs_diff(&z0) <= 1e-9, "steps {steps}");
    }
    // One step is exactly Z1 - v(Z1, 1).
    let mut seen = Vec::new();
    let out = sample(eps.clone(), 1, "oracle", |_, t| {
        seen.push(t);
        Ok(v.clone())
    })
    .unwrap();
    assert_eq!(seen, vec![1.0]);
    assert_eq!(out, eps.zip_map(&v, |a, b| a - b).unwrap());
}

#[test]
fn sampler_visits_uniform_times_and_aborts_on_nan() {
    let mut ts = Vec::new();
    sample(Tensor::zeros(&[1, 1]), 4, "s", |_, t| {
        ts.push(t);
        Ok(Tensor::zeros(&[1, 1]))
    })
    .unwrap();
    assert_eq!(ts, vec![1.0, 0.75, 0.5, 0.25]);
    let err = sample(Tensor::zeros(&[1, 1]), 5, "whole", |_, t| {
        Ok(Tensor::full(&[1, 1], if t < 0.7 { f64::NAN } else { 0.0 }))
    })
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { stage: "whole", step: 2 }), "{err}");
    assert!(sample(Tensor::zeros(&[1, 1]), 0, "s", |z, _| Ok(z.clone())).is_err());
}

#[test]
fn cfg_combine_examples() {
    let u = randn(&[3, 3], 1);
    let c = randn(&[3, 3], 2);
    assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
    assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
    for s in [0.5, 2.0, 5.0] {
        assert_eq!(cfg_combine(&c, &c, s).unwrap(), c);
    }
    let mixed = cfg_combine(&Tensor::zeros(&[1, 1]), &Tensor::ones(&[1, 1]), 5.0).unwrap();
    assert_eq!(mixed.item(), 5.0);
}

#[test]
fn guided_sampling_at_scale_one_is_the_conditional_branch() {
    let init = randn(&[4, 2], 3);
    let cfg = SamplerConfig { steps: 7, cfg_scale: 1.0, seed: 0 };
    let f = |z: &Tensor, t: f64, cond: bool| Ok(z.map(|x| if cond { 0.3 * x + t } else { -x }));
    let guided = sample_guided(init.clone(), &cfg, "g", f).unwrap();
    let plain = sample(init, 7, "g", |z, t| f(z, t, true)).unwrap();
    assert_eq!(guided, plain);
}

#[test]
fn condition_dropout_rate_is_within_three_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 10_000;
    let dropped = (0..n).filter(|_| drop_condition(&mut rng, CONDITION_DROPOUT)).count() as f64;
    let mean = n as f64 * 0.1;
    let sigma = (n as f64 * 0.1 * 0.9).sqrt();
    assert!((dropped - mean).abs() <= 3.0 * sigma, "{dropped}");
}

#[test]
fn time_sampling_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [TimeSampling::Uniform, TimeSampling::LogitNormal] {
        let ts: Vec<f64> = (0..2000).map(|_| mode.sample(&mut rng)).collect();
        assert!(ts.iter().all(|t| (0.0..=1.0).contains(t)));
        let mean = ts.iter().sum::<f64>() / ts.len() as f64;
        assert!((mean - 0.5).abs() < 0.03);
    }
}

#[test]
fn noise_is_seeded() {
    assert_eq!(init_noise(&[3, 2], 9), init_noise(&[3, 2], 9));
    assert_ne!(init_noise(&[3, 2], 9), init_noise(&[3, 2], 10));
}

proptest! {
    #[test]
    fn interpolation_is_affine(seed in 0u64..1000, t in 0.0f64..=1.0, a in -3.0f64..3.0) {
        let z0 = randn(&[3, 2], seed);
        let e = randn(&[3, 2], seed + 1);
        let z1 = randn(&[3, 2], seed + 2);
        let e1 = randn(&[3, 2], seed + 3);
        // Affine in Z0 and eps jointly: mixing inputs mixes outputs.
        let mix = |x: &Tensor, y: &Tensor| x.zip_map(y, |p, q| a * p + (1.0 - a) * q).unwrap();
        let lhs = interpolate(&mix(&z0, &z1), &mix(&e, &e1), t).unwrap();
        let rhs = mix(&interpolate(&z0, &e, t).unwrap(), &interpolate(&z1, &e1, t).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let same = interpolate(&z0, &z0, t).unwrap();
        prop_assert!(same.max_abs_diff(&z0) < 1e-15);
    }
}
