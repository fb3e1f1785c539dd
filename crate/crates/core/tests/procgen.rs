use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unipart_core::dataset::*;
use unipart_core::procgen::*;
use unipart_core::Error;
use unipart_geometry::marching_cubes::marching_cubes;
use unipart_geometry::vec3;
use unipart_geometry::{winding_number_contains, Aabb};

fn cfg(min: usize, max: usize) -> ShapeConfig {
    ShapeConfig { min_parts: min, max_parts: max, ..Default::default() }
}

#[test]
fn generation_is_deterministic_and_respects_part_count() {
    let a = generate_shape(0, &cfg(2, 2)).unwrap();
    assert_eq!(a, generate_shape(0, &cfg(2, 2)).unwrap());
    assert_eq!(a.num_parts(), 2);
    let five = generate_shape(7, &cfg(5, 5)).unwrap();
    assert_eq!(five.num_parts(), 5);
    let ids: Vec<u32> = five.parts.iter().map(|p| p.part_id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3, 4]);
}

#[test]
fn unsatisfiable_configs_rejected() {
    for bad in [cfg(1, 3), cfg(4, 3), cfg(2, MAX_PARTS + 1)] {
        assert!(matches!(generate_shape(0, &bad), Err(Error::Unsatisfiable(_))));
    }
    let mut zero_mix = cfg(2, 3);
    zero_mix.primitive_mix =
        PrimitiveMix { box_weight: 0.0, sphere_weight: 0.0, cylinder_weight: 0.0, capsule_weight: 0.0 };
    assert!(generate_shape(0, &zero_mix).is_err());
}

#[test]
fn part_count_histogram_covers_range() {
    let c = cfg(2, 5);
    let mut hist = [0usize; 6];
    for seed in 0..1000 {
        let spec = generate_shape(seed, &c).unwrap();
        hist[spec.num_parts()] += 1;
        let b = spec.aabb().unwrap();
        for a in 0..3 {
            assert!(b.min[a] >= -FIT_HALF_EXTENT - 1e-9 && b.max[a] <= FIT_HALF_EXTENT + 1e-9);
        }
    }
    for (n, &count) in hist.iter().enumerate().skip(2) {
        assert!(count > 150, "{n} parts drawn {count} times");
    }
}

#[test]
fn sdf_examples() {
    let unit = ShapeSpec { parts: vec![PartPrimitive::sphere(1.0, [0.0; 3], 0)] };
    assert_eq!(sdf_and_label(&unit, &[[0.0; 3]]).0, vec![-1.0]);

    let twin = ShapeSpec {
        parts: vec![PartPrimitive::sphere(0.3, [0.5, 0.0, 0.0], 1), PartPrimitive::sphere(0.3, [-0.5, 0.0, 0.0], 0)],
    };
    let (d, l) = sdf_and_label(&twin, &[[0.0, 0.4, 0.0], [0.45, 0.0, 0.0]]);
    assert_eq!(l, vec![0, 1], "equidistant point goes to the lower id");
    assert!((d[0] - ((0.25f64 + 0.16).sqrt() - 0.3)).abs() < 1e-15);
}

fn occupancy_agreement(spec: &ShapeSpec, seed: u64, n: usize) -> f64 {
    let mesh = marching_cubes(
        |pts: &[[f64; 3]]| pts.iter().map(|&p| 0.5 - spec.sdf(p)).collect(),
        Aabb::signed_unit(),
        48,
        0.5,
    )
    .unwrap()
    .mesh;
    assert!(mesh.is_closed(), "extracted union is a closed manifold");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let inside = winding_number_contains(&mesh, &pts);
    let (sdf, _) = sdf_and_label(spec, &pts);
    sdf.iter().zip(&inside).filter(|(d, &i)| (**d < 0.0) == i).count() as f64 / n as f64
}

#[test]
fn sdf_sign_agrees_with_winding_oracle() {
    for seed in 0..3 {
        let spec = generate_shape(seed, &cfg(2, 4)).unwrap();
        let agree = occupancy_agreement(&spec, seed, 2000);
        assert!(agree >= 0.995, "seed {seed}: {agree}");
    }
}

#[test]
fn unit_sphere_samples_and_normals() {
    let unit = ShapeSpec { parts: vec![PartPrimitive::sphere(1.0, [0.0; 3], 0)] };
    let s = sample_surface(&unit, 2000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (p, n) in s.positions.iter().zip(&s.normals) {
        assert!((vec3::norm(*p) - 1.0).abs() < 1e-4);
        assert!(vec3::norm(vec3::sub(*n, vec3::normalize(*p))) < 1e-3);
    }
    assert!(sample_surface(&unit, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn disjoint_equal_spheres_split_evenly() {
    let twin = ShapeSpec {
        parts: vec![PartPrimitive::sphere(0.3, [0.5, 0.0, 0.0], 0), PartPrimitive::sphere(0.3, [-0.5, 0.0, 0.0], 1)],
    };
    let s = sample_surface(&twin, 8192, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let ones = s.labels.iter().filter(|&&l| l == 1).count() as f64 / 8192.0;
    assert!((ones - 0.5).abs() < 0.05);
}

#[test]
fn samples_lie_on_the_union_with_area_proportional_labels() {
    let spec = generate_shape(3, &cfg(3, 3)).unwrap();
    let s = sample_surface(&spec, 8192, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (d, _) = sdf_and_label(&spec, &s.positions);
    assert!(d.iter().all(|x| x.abs() < 1e-4));
    for n in &s.normals {
        assert!((vec3::norm(*n) - 1.0).abs() < 1e-6);
    }
    assert!(s.labels.iter().all(|&l| (l as usize) < spec.num_parts()));

    // Exposed-area oracle: Monte Carlo on each primitive independent of the sampler.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let exposed: Vec<f64> = (0..spec.num_parts())
        .map(|i| {
            let part = &spec.parts[i];
            let free = (0..20_000)
                .filter(|_| {
                    let (p, _) = part.sample_surface(&mut rng);
                    spec.parts.iter().enumerate().all(|(j, o)| j == i || o.sdf(p) >= 0.0)
                })
                .count();
            part.surface_area() * free as f64 / 20_000.0
        })
        .collect();
    let total: f64 = exposed.iter().sum();
    for (i, e) in exposed.iter().enumerate() {
        let expected = e / total;
        let got = s.labels.iter().filter(|&&l| l as usize == i).count() as f64 / 8192.0;
        assert!((got - expected).abs() <= 0.2 * expected, "part {i}: {got} vs {expected}");
    }
}

#[test]
fn render_examples() {
    let unit = ShapeSpec { parts: vec![PartPrimitive::sphere(1.0, [0.0; 3], 0)] };
    let cam = Camera { resolution: 64 };
    let img = render_condition(&unit, &cam);
    let mut area = 0.0;
    for r in 0..64 {
        for c in 0..64 {
            let sil = img.silhouette(r, c);
            area += sil;
            let o = cam.pixel_origin(r, c);
            let inside = o[0] * o[0] + o[1] * o[1] <= 1.0;
            assert_eq!(sil == 1.0, inside, "pixel ({r},{c})");
            if sil == 0.0 {
                assert_eq!(img.depth(r, c), 0.0);
            } else {
                let expected = (1.0 - (1.0 - o[0] * o[0] - o[1] * o[1]).sqrt()) / 2.0;
                assert!((img.depth(r, c) - expected).abs() < 1e-6);
            }
        }
    }
    let radius = (area / std::f64::consts::PI).sqrt();
    assert!((radius - 32.0).abs() < 0.5, "disc radius {radius}");
}

#[test]
fn silhouette_matches_projected_occupancy_and_depth_is_first_hit() {
    let spec = generate_shape(11, &cfg(3, 4)).unwrap();
    let cam = Camera { resolution: 32 };
    let img = render_condition(&spec, &cam);
    let steps = 4000;
    for r in 0..32 {
        for c in 0..32 {
            let o = cam.pixel_origin(r, c);
            let first = (0..=steps)
                .map(|k| 1.0 - 2.0 * k as f64 / steps as f64)
                .find(|&z| spec.contains([o[0], o[1], z]));
            match first {
                None => assert!(img.silhouette(r, c) == 0.0 || img.depth(r, c) > 0.0),
                Some(z) => {
                    assert_eq!(img.silhouette(r, c), 1.0, "pixel ({r},{c}) sees occupancy");
                    let dz = 2.0 / steps as f64;
                    let d = (1.0 - z) / 2.0;
                    assert!(img.depth(r, c) <= d + 1e-9 && img.depth(r, c) >= d - dz, "pixel ({r},{c})");
                }
            }
            assert!((0.0..=1.0).contains(&img.depth(r, c)));
        }
    }
}

#[test]
fn patches_tile_the_image_in_raster_order() {
    let img = ConditionImage { height: 4, width: 4, data: (0..32).map(f64::from).collect() };
    let p = img.patches(2).unwrap();
    assert_eq!(p.len(), 4);
    assert_eq!(p[1], vec![4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0]);
    assert!(img.patches(3).is_err());
}

fn small_cfg() -> DatasetConfig {
    DatasetConfig { shape: cfg(2, 3), surface_points: 64, camera: Camera { resolution: 16 } }
}

#[test]
fn dataset_round_trip_is_byte_identical() {
    let c = small_cfg();
    let records: Vec<Record> = (0..10).map(|s| make_record(s, &c).unwrap()).collect();
    let bytes = encode_records(&records);
    let back = decode_records(&bytes).unwrap();
    assert_eq!(back, records);
    assert_eq!(encode_records(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    write_split(&path, &records).unwrap();
    assert_eq!(read_split(&path).unwrap(), records);
}

#[test]
fn corrupt_files_rejected() {
    let c = small_cfg();
    let bytes = encode_records(&[make_record(0, &c).unwrap()]);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_records(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(decode_records(&bad).unwrap_err().to_string().contains("version"));
    assert!(decode_records(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
}

#[test]
fn thousand_record_split_has_stable_order() {
    let c = DatasetConfig { shape: cfg(2, 3), surface_points: 16, camera: Camera { resolution: 8 } };
    let a: Vec<Record> = (0..1000).map(|s| make_record(s, &c).unwrap()).collect();
    let checksum = split_checksum(&a);
    let decoded = decode_records(&encode_records(&a)).unwrap();
    assert_eq!(split_checksum(&decoded), checksum);
    let again: Vec<Record> = (0..1000).map(|s| make_record(s, &c).unwrap()).collect();
    assert_eq!(split_checksum(&again), checksum);
    let mut swapped = a.clone();
    swapped.swap(0, 1);
    assert_ne!(split_checksum(&swapped), checksum);
}

#[test]
fn generated_dataset_writes_manifest_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), 0, 10, &[0.8, 0.2], &small_cfg()).unwrap();
    assert_eq!(m.split("train").unwrap().records, 8);
    assert_eq!(m.split("test").unwrap().seeds, (8, 10));
    assert_eq!(DatasetManifest::read(dir.path()).unwrap(), m);
    let test = read_split(&dir.path().join("test.bin")).unwrap();
    assert_eq!(split_checksum(&test), m.split("test").unwrap().checksum);
    assert_eq!(test[0], make_record(8, &small_cfg()).unwrap());
    assert!(split_seeds(0, 10, &[0.5, 0.6]).is_err());
}
