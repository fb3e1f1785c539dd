use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unipart_core::latent_seg::*;
use unipart_core::vae::{GeomSegVae, VaeConfig};
use unipart_tensor::Tensor;

fn mask(prompt: usize, l: usize, members: &[usize], score: f64) -> PartMask {
    let mut m = vec![false; l];
    members.iter().for_each(|&i| m[i] = true);
    PartMask { prompt, members: m, score }
}

fn line(l: usize) -> Vec<[f64; 3]> {
    (0..l).map(|i| [i as f64, 0.0, 0.0]).collect()
}

#[test]
fn nms_hand_traced_examples() {
    let a = mask(0, 6, &[0, 1, 2], 0.9);
    let same = mask(1, 6, &[0, 1, 2], 0.8);
    assert_eq!(nms_masks(&[a.clone(), same], 0.5), vec![0]);
    let other = mask(1, 6, &[3, 4], 0.8);
    assert_eq!(nms_masks(&[a, other], 0.5), vec![0, 1]);

    // A ⊃ B with IoU 3/5 = 0.6, C disjoint; scores A > B > C.
    let a = mask(0, 10, &[0, 1, 2, 3, 4], 0.9);
    let b = mask(1, 10, &[0, 1, 2], 0.8);
    let c = mask(2, 10, &[7, 8, 9], 0.7);
    assert!((mask_iou(&a.members, &b.members) - 0.6).abs() < 1e-15);
    assert_eq!(nms_masks(&[b.clone(), c.clone(), a.clone()], 0.5), vec![2, 1]);
    // A looser threshold keeps B.
    assert_eq!(nms_masks(&[a, b, c], 0.7), vec![0, 1, 2]);
    assert!(nms_masks(&[], 0.5).is_empty());
}

#[test]
fn nms_ties_prefer_lower_prompt() {
    let a = mask(5, 4, &[0, 1], 0.5);
    let b = mask(2, 4, &[0, 1], 0.5);
    assert_eq!(nms_masks(&[a, b], 0.5), vec![1]);
}

#[test]
fn partition_examples() {
    let anchors = line(6);
    let full = [mask(0, 6, &[0, 1, 2], 0.9), mask(5, 6, &[3, 4, 5], 0.8)];
    let (groups, assign) = assign_partition(&full, &anchors).unwrap();
    assert_eq!(groups[0].indices, vec![0, 1, 2]);
    assert_eq!(groups[1].indices, vec![3, 4, 5]);
    assert_eq!(assign, vec![0, 0, 0, 1, 1, 1]);
    assert_eq!(groups[0].centroid, [1.0, 0.0, 0.0]);

    // Latent 2 belongs to neither mask; centroids sit at x = 0.5 and 4.5.
    let gap = [mask(0, 6, &[0, 1], 0.9), mask(5, 6, &[3, 4, 5], 0.8)];
    let (groups, assign) = assign_partition(&gap, &anchors).unwrap();
    assert_eq!(assign[2], 0);
    assert_eq!(groups[0].indices, vec![0, 1, 2]);

    // Overlap goes to the higher score.
    let overlap = [mask(0, 6, &[0, 1, 2, 3], 0.6), mask(5, 6, &[2, 3, 4, 5], 0.8)];
    let (_, assign) = assign_partition(&overlap, &anchors).unwrap();
    assert_eq!(assign, vec![0, 0, 1, 1, 1, 1]);

    // A mask that loses every latent is dropped and ids stay dense.
    let swallowed = [mask(0, 6, &[0, 1], 0.1), mask(3, 6, &[0, 1, 2, 3, 4, 5], 0.9)];
    let (groups, assign) = assign_partition(&swallowed, &anchors).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(assign, vec![0; 6]);
    assert!(assign_partition(&[], &anchors).is_err());
}

#[test]
fn prompt_selection() {
    let anchors = line(8);
    let mut all = select_prompts(&anchors, 8).unwrap();
    all.sort();
    assert_eq!(all, (0..8).collect::<Vec<_>>());
    assert_eq!(select_prompts(&anchors, 50).unwrap().len(), 8);
    let clusters: Vec<[f64; 3]> =
        (0..10).map(|i| if i < 5 { [0.01 * i as f64, 0.0, 0.0] } else { [5.0 + 0.01 * i as f64, 0.0, 0.0] }).collect();
    let p = select_prompts(&clusters, 2).unwrap();
    assert!(p[0] < 5 && p[1] >= 5);
    assert_eq!(p, select_prompts(&clusters, 2).unwrap());
}

#[test]
fn dense_and_prompted_decoding_agree() {
    let cfg = VaeConfig { latents: 12, latent_dim: 8, width: 16, heads: 2, seg_layers: 2, input_points: 12, ..Default::default() };
    let vae = GeomSegVae::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let z = Tensor::randn(&[12, 8], &mut ChaCha8Rng::seed_from_u64(5));
    let dense = dense_masks(&vae, &z).unwrap();
    assert_eq!(dense.len(), 12);
    let some = decode_masks(&vae, &z, &[7, 3]).unwrap();
    assert_eq!(some[0].members, dense[7].members);
    assert!((some[0].score - dense[7].score).abs() < 1e-12);
    assert_eq!(some[1].members, dense[3].members);

    let seg = SegConfig { prompts: 4, ..Default::default() };
    let a = segment_latent(&vae, &z, &seg).unwrap();
    let b = segment_latent(&vae, &z, &SegConfig { dense: false, ..seg }).unwrap();
    assert_eq!(a.assignment, b.assignment);
    assert!(a.num_parts() >= 1 && a.num_parts() <= 4);
    assert_eq!(a, segment_latent(&vae, &z, &seg).unwrap());
}

fn random_masks(l: usize, bits: &[Vec<bool>], scores: &[f64]) -> Vec<PartMask> {
    bits.iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (b, &s))| PartMask { prompt: i % l, members: b[..l].to_vec(), score: s })
        .collect()
}

proptest! {
    #[test]
    fn partition_is_a_disjoint_cover(
        l in 1usize..20,
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 20), 1..6),
        scores in prop::collection::vec(0.0f64..1.0, 6),
        xs in prop::collection::vec(-1.0f64..1.0, 60),
    ) {
        let anchors: Vec<[f64; 3]> = (0..l).map(|i| [xs[3 * i], xs[3 * i + 1], xs[3 * i + 2]]).collect();
        let masks = random_masks(l, &bits, &scores[..bits.len()]);
        let kept: Vec<PartMask> = nms_masks(&masks, 0.5).into_iter().map(|i| masks[i].clone()).collect();
        let (groups, assign) = assign_partition(&kept, &anchors).unwrap();
        prop_assert!(!groups.is_empty() && groups.len() <= kept.len());
        let mut seen = vec![0usize; l];
        for (g, group) in groups.iter().enumerate() {
            prop_assert!(!group.indices.is_empty());
            for &j in &group.indices {
                seen[j] += 1;
                prop_assert_eq!(assign[j], g);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn nms_ignores_input_order(
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 1..7),
        rot in 0usize..7,
    ) {
        let n = bits.len();
        let scores: Vec<f64> = (0..n).map(|i| 0.1 + 0.1 * i as f64).collect();
        let masks: Vec<PartMask> = bits.iter().enumerate().map(|(i, b)| PartMask { prompt: i, members: b.clone(), score: scores[i] }).collect();
        let mut shuffled = masks.clone();
        shuffled.rotate_left(rot % n);
        let a: Vec<usize> = nms_masks(&masks, 0.5).into_iter().map(|i| masks[i].prompt).collect();
        let b: Vec<usize> = nms_masks(&shuffled, 0.5).into_iter().map(|i| shuffled[i].prompt).collect();
        prop_assert_eq!(a, b);
    }
}
