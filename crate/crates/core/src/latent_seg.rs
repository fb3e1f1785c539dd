//! Splitting a whole-object latent into part groups: masks from the
//! promptable decoder, prompts picked by farthest-point sampling on the
//! decoded anchors, greedy mask NMS, and a partition of every latent.

use serde::{Deserialize, Serialize};
use unipart_geometry::{farthest_point_sample, vec3, Vec3};
use unipart_tensor::Tensor;

use crate::error::{Error, Result};
use crate::vae::GeomSegVae;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Number of farthest-point prompts (capped at the latent count).
    pub prompts: usize,
    pub nms_iou: f64,
    /// Decode masks for every latent and keep the prompted ones; off
    /// decodes only the prompted masks.
    pub dense: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig { prompts: 32, nms_iou: 0.5, dense: true }
    }
}

/// A binary mask over the `L` latents produced by one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartMask {
    pub prompt: usize,
    pub members: Vec<bool>,
    pub score: f64,
}

impl PartMask {
    pub fn from_logits(prompt: usize, logits: &[f64], score: f64) -> Self {
        PartMask { prompt, members: logits.iter().map(|&x| x > 0.0).collect(), score }
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartLatentGroup {
    pub part_id: usize,
    /// Ascending latent indices.
    pub indices: Vec<usize>,
    pub centroid: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// Masks that survived NMS, in keep order.
    pub masks: Vec<PartMask>,
    pub groups: Vec<PartLatentGroup>,
    /// Group index of every latent.
    pub assignment: Vec<usize>,
    pub anchors: Vec<Vec3>,
}

impl SegmentationResult {
    pub fn num_parts(&self) -> usize {
        self.groups.len()
    }
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Farthest-point prompts on the decoded anchors; `k` is capped at `L`.
pub fn select_prompts(anchors: &[Vec3], k: usize) -> Result<Vec<usize>> {
    Ok(farthest_point_sample(anchors, k.min(anchors.len()))?)
}

/// Greedy NMS: visit masks by descending score (ties by lower prompt
/// index) and keep each one whose IoU with every kept mask is at most
/// `iou_threshold`. Returns indices into `masks` in keep order.
pub fn nms_masks(masks: &[PartMask], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| {
        masks[b].score.total_cmp(&masks[a].score).then(masks[a].prompt.cmp(&masks[b].prompt))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| mask_iou(&masks[i].members, &masks[k].members) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

fn centroid(points: impl Iterator<Item = Vec3>) -> Option<Vec3> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        sum = vec3::add(sum, p);
        n += 1;
    }
    (n > 0).then(|| vec3::scale(sum, 1.0 / n as f64))
}

/// Turns kept masks into a partition of all latents. A latent claimed by
/// several masks goes to the highest-scoring one (lower prompt index on
/// ties); an unclaimed latent goes to the mask whose member-anchor centroid
/// is nearest (the prompt anchor for an empty mask). Empty groups are
/// dropped and the rest renumbered in mask order.
pub fn assign_partition(kept: &[PartMask], anchors: &[Vec3]) -> Result<(Vec<PartLatentGroup>, Vec<usize>)> {
    let l = anchors.len();
    if kept.is_empty() {
        return Err(Error::Invalid("partition needs at least one mask".into()));
    }
    if let Some(m) = kept.iter().find(|m| m.members.len() != l || m.prompt >= l) {
        return Err(Error::Invalid(format!("mask for prompt {} does not cover {l} latents", m.prompt)));
    }
    let centroids: Vec<Vec3> = kept
        .iter()
        .map(|m| {
            centroid((0..l).filter(|&j| m.members[j]).map(|j| anchors[j])).unwrap_or(anchors[m.prompt])
        })
        .collect();
    let better = |a: usize, b: usize| {
        let (ma, mb) = (&kept[a], &kept[b]);
        ma.score > mb.score || (ma.score == mb.score && ma.prompt < mb.prompt)
    };
    let mut owner = vec![usize::MAX; l];
    for (j, o) in owner.iter_mut().enumerate() {
        for m in 0..kept.len() {
            if kept[m].members[j] && (*o == usize::MAX || better(m, *o)) {
                *o = m;
            }
        }
        if *o == usize::MAX {
            let mut best = 0;
            for m in 1..kept.len() {
                if vec3::dist_sq(anchors[j], centroids[m]) < vec3::dist_sq(anchors[j], centroids[best]) {
                    best = m;
                }
            }
            *o = best;
        }
    }
    let mut remap = vec![usize::MAX; kept.len()];
    let mut groups: Vec<PartLatentGroup> = Vec::new();
    for m in 0..kept.len() {
        let indices: Vec<usize> = (0..l).filter(|&j| owner[j] == m).collect();
        if indices.is_empty() {
            continue;
        }
        remap[m] = groups.len();
        let c = centroid(indices.iter().map(|&j| anchors[j])).expect("non-empty group");
        groups.push(PartLatentGroup { part_id: groups.len(), indices, centroid: c });
    }
    let assignment = owner.iter().map(|&m| remap[m]).collect();
    Ok((groups, assignment))
}

/// Masks for every prompt in `prompts` from the mask decoder.
pub fn decode_masks(vae: &GeomSegVae, z: &Tensor, prompts: &[usize]) -> Result<Vec<PartMask>> {
    let out = vae.decode_segmentation(z, prompts)?;
    Ok(prompts
        .iter()
        .enumerate()
        .map(|(i, &p)| PartMask::from_logits(p, out.logits.row(i), out.scores[i]))
        .collect())
}

/// One mask per latent (the dense prompt `0..L`).
pub fn dense_masks(vae: &GeomSegVae, z: &Tensor) -> Result<Vec<PartMask>> {
    let all: Vec<usize> = (0..vae.config.latents).collect();
    decode_masks(vae, z, &all)
}

/// Full segmentation of a latent set: anchors from the position decoder,
/// prompts, masks, NMS and partition.
pub fn segment_latent(vae: &GeomSegVae, z: &Tensor, cfg: &SegConfig) -> Result<SegmentationResult> {
    let anchors = vae.decode_position(z)?;
    segment_with_anchors(vae, z, anchors, cfg)
}

/// As [`segment_latent`] with given anchors (for example the encoder's own).
pub fn segment_with_anchors(vae: &GeomSegVae, z: &Tensor, anchors: Vec<Vec3>, cfg: &SegConfig) -> Result<SegmentationResult> {
    if cfg.prompts == 0 {
        return Err(Error::Config("segmentation needs at least one prompt".into()));
    }
    let prompts = select_prompts(&anchors, cfg.prompts)?;
    let masks = if cfg.dense {
        let dense = dense_masks(vae, z)?;
        let missing = dense.iter().filter(|m| !m.members[m.prompt]).count();
        if missing > 0 {
            log::debug!("{missing} of {} dense masks exclude their own prompt", dense.len());
        }
        prompts.iter().map(|&p| dense[p].clone()).collect::<Vec<_>>()
    } else {
        decode_masks(vae, z, &prompts)?
    };
    let kept: Vec<PartMask> = nms_masks(&masks, cfg.nms_iou).into_iter().map(|i| masks[i].clone()).collect();
    let (groups, assignment) = assign_partition(&kept, &anchors)?;
    Ok(SegmentationResult { masks: kept, groups, assignment, anchors })
}
