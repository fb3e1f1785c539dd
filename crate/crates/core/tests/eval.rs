use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unipart_core::eval::*;
use unipart_geometry::{concat_meshes, Aabb, TriMesh, Vec3};

fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

#[test]
fn chamfer_examples() {
    let a = cloud(50, 1);
    assert_eq!(chamfer(&a, &a, false).unwrap(), 0.0);
    assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], false).unwrap(), 2.0);
    assert_eq!(chamfer(&[[0.0; 3]], &[[2.0, 0.0, 0.0]], true).unwrap(), 8.0);
    assert!(chamfer(&[], &a, false).is_err());
}

#[test]
fn brute_force_chamfer_equals_production_exactly() {
    for seed in 0..20 {
        let a = cloud(100, seed);
        let b = cloud(100, seed + 100);
        for sq in [false, true] {
            assert_eq!(chamfer(&a, &b, sq).unwrap(), chamfer_brute(&a, &b, sq).unwrap());
        }
    }
}

#[test]
fn fscore_examples() {
    let a = cloud(40, 2);
    assert_eq!(fscore(&a, &a, 0.05).unwrap(), 1.0);
    let far: Vec<Vec3> = a.iter().map(|p| [p[0] + 10.0, p[1], p[2]]).collect();
    assert_eq!(fscore(&a, &far, 0.1).unwrap(), 0.0);
    // Half of the prediction lies on the target, the rest far away; the
    // whole target is covered.
    let gt = vec![[0.0; 3], [1.0, 0.0, 0.0]];
    let pred = vec![[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]];
    assert!((fscore(&pred, &gt, 0.1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    // The threshold is strict.
    assert_eq!(fscore(&[[0.0; 3]], &[[0.5, 0.0, 0.0]], 0.5).unwrap(), 0.0);
    assert!(fscore(&a, &a, 0.0).is_err());
}

#[test]
fn rotations_are_exact() {
    let p = [0.3, -0.2, 0.7];
    for d in ROTATIONS {
        let back = rotate_y(rotate_y(p, d), (360 - d) % 360);
        assert_eq!(back, p);
    }
    assert_eq!(rotate_y([1.0, 0.0, 0.0], 90), [0.0, 0.0, -1.0]);
}

fn l_shape() -> TriMesh {
    let a = TriMesh::cuboid(Aabb::new([-0.9, -0.9, -0.3], [0.9, -0.3, 0.3]));
    let b = TriMesh::cuboid(Aabb::new([-0.9, -0.3, -0.3], [-0.3, 0.9, 0.3]));
    let c = TriMesh::cuboid(Aabb::new([-0.9, -0.9, 0.3], [-0.5, -0.5, 0.9]));
    concat_meshes(&[a, b, c])
}

fn rotate_mesh(m: &TriMesh, deg: u32) -> TriMesh {
    let mut out = m.clone();
    out.vertices.iter_mut().for_each(|v| *v = rotate_y(*v, deg));
    out
}

#[test]
fn pose_search_recovers_the_inverse_rotation() {
    let gt = l_shape();
    let pred = rotate_mesh(&gt, 90);
    let cfg = EvalConfig { samples: 3000, ..Default::default() };
    let s = pose_search_eval(&pred, &gt, &cfg).unwrap();
    assert_eq!(s.best_rotation, 270);
    assert!(s.cd < 0.1, "{s:?}");
    assert!(s.f_at_010 > 0.95);
    assert!(s.f_at_010 >= s.f_at_005);
    let same = pose_search_eval(&gt, &gt, &cfg).unwrap();
    assert_eq!(same.best_rotation, 0);
}

#[test]
fn asymmetric_shape_has_a_unique_best_rotation() {
    let gt = l_shape();
    let (p, _) = unipart_geometry::normalize_mesh(&gt, unipart_geometry::NormTarget::Signed).unwrap();
    let pts = unipart_geometry::sample_surface(&p, 3000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().points;
    let gts = unipart_geometry::sample_surface(&p, 3000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().points;
    let cds: Vec<f64> = ROTATIONS
        .iter()
        .map(|&d| chamfer(&pts.iter().map(|&x| rotate_y(x, d)).collect::<Vec<_>>(), &gts, false).unwrap())
        .collect();
    let best = cds.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(cds.iter().filter(|&&c| c < 2.0 * best).count(), 1, "{cds:?}");
}

#[test]
fn symmetric_shape_scores_equally_under_rotation() {
    let cube = TriMesh::cuboid(Aabb::new([-0.5; 3], [0.5; 3]));
    let (p, _) = unipart_geometry::normalize_mesh(&cube, unipart_geometry::NormTarget::Signed).unwrap();
    let a = unipart_geometry::sample_surface(&p, 4000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().points;
    let b = unipart_geometry::sample_surface(&p, 4000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().points;
    let cds: Vec<f64> = ROTATIONS
        .iter()
        .map(|&d| chamfer(&a.iter().map(|&x| rotate_y(x, d)).collect::<Vec<_>>(), &b, false).unwrap())
        .collect();
    let (lo, hi) = cds.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &c| (l.min(c), h.max(c)));
    assert!(hi - lo < 0.1 * lo, "{cds:?}");
}

#[test]
fn pose_search_self_distance_is_below_twice_the_sample_spacing() {
    let gt = l_shape();
    let cfg = EvalConfig::default();
    let s = pose_search_eval(&gt, &gt, &cfg).unwrap();
    let (p, _) = unipart_geometry::normalize_mesh(&gt, unipart_geometry::NormTarget::Signed).unwrap();
    let spacing = (p.area() / cfg.samples as f64).sqrt();
    assert!(s.cd < 2.0 * spacing, "{} vs {}", s.cd, spacing);
}

#[test]
fn miou_examples() {
    assert_eq!(miou(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
    assert_eq!(miou(&[3, 3, 3, 3], &[0, 0, 1, 1]).unwrap(), 0.25);
    assert!(miou(&[0, 1], &[0]).is_err());
    assert_eq!(segmentation_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(segmentation_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
}

fn labelings(l: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..l {
        out = out.into_iter().flat_map(|v| (0..k).map(move |x| [v.clone(), vec![x]].concat())).collect();
    }
    out
}

#[test]
fn hungarian_equals_exhaustive_on_all_small_cases() {
    let all = labelings(4, 4);
    for gt in &all {
        let gt: Vec<u32> = gt.iter().map(|&x| x as u32).collect();
        for pred in &all {
            let h = miou(pred, &gt).unwrap();
            let e = miou_exhaustive(pred, &gt).unwrap();
            assert!((h - e).abs() < 1e-12, "{pred:?} {gt:?}: {h} vs {e}");
        }
    }
}

#[test]
fn report_csv_schema() {
    let rows = vec![
        ObjectRow { object: "a".into(), cd: 0.5, f_at_005: 0.25, f_at_010: 0.75, best_rotation: 90, miou: Some(0.5) },
        ObjectRow { object: "b".into(), cd: 1.5, f_at_005: 0.75, f_at_010: 0.25, best_rotation: 0, miou: None },
    ];
    let r = MetricReport::from_rows(rows, vec![]);
    assert_eq!(r.cd, 1.0);
    assert_eq!(r.miou, Some(0.5));
    let csv = r.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "object,cd,f_at_005,f_at_010,best_rotation,miou");
    assert_eq!(lines.next().unwrap(), "a,0.5,0.25,0.75,90,0.5");
    assert_eq!(lines.next().unwrap(), "b,1.5,0.75,0.25,0,");
}

proptest! {
    #[test]
    fn chamfer_symmetric_and_rigid_invariant(seed in 0u64..500, dx in -2.0f64..2.0) {
        let a = cloud(30, seed);
        let b = cloud(25, seed + 7);
        let ab = chamfer(&a, &b, false).unwrap();
        prop_assert!((ab - chamfer(&b, &a, false).unwrap()).abs() < 1e-12);
        let shift = |v: &[Vec3]| v.iter().map(|p| rotate_y([p[0] + dx, p[1], p[2]], 90)).collect::<Vec<_>>();
        prop_assert!((ab - chamfer(&shift(&a), &shift(&b), false).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fscore_monotone_in_threshold(seed in 0u64..500, t in 0.01f64..0.5) {
        let a = cloud(40, seed);
        let b = cloud(40, seed + 3);
        prop_assert!(fscore(&a, &b, t).unwrap() <= fscore(&a, &b, t * 1.5).unwrap());
    }

    #[test]
    fn miou_relabel_invariant_and_matches_exhaustive(
        gt in prop::collection::vec(0u32..4, 12),
        pred in prop::collection::vec(0usize..5, 12),
        shift in 1usize..50,
    ) {
        let m = miou(&pred, &gt).unwrap();
        let relabeled: Vec<usize> = pred.iter().map(|&p| (p * 7 + shift) % 97).collect();
        prop_assert!((m - miou(&relabeled, &gt).unwrap()).abs() < 1e-12);
        prop_assert!((m - miou_exhaustive(&pred, &gt).unwrap()).abs() < 1e-12);
    }
}
