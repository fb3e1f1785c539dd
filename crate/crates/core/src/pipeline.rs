//! Stage glue: training targets from the frozen VAE, mesh decoding and part
//! composition, the two-stage generation pipeline, and benchmark loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unipart_geometry::{
    compose_part, concat_meshes, marching_cubes, sample_surface as sample_mesh, vec3, Aabb, TriMesh, Vec3,
};
use unipart_tensor::Tensor;

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::eval::{chamfer, miou, pose_search_eval, segmentation_accuracy, EvalConfig, MetricReport, ObjectRow};
use crate::flow::SamplerConfig;
use crate::latent_seg::{segment_latent, segment_with_anchors, SegConfig, SegmentationResult};
use crate::part_dit::{DualSpaceLatent, PartCondition, PartDit, PartExample};
use crate::procgen::{sample_queries, sample_surface, sdf_and_label, ConditionImage, ShapeSpec};
use crate::vae::{EncoderInput, GeomSegVae, VaeLossConfig};
use crate::whole_dit::{WholeDit, WholeExample};

/// Streams for per-record randomness, kept apart from dataset generation.
const PART_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Marching-cubes cells per axis for decoded latents.
    pub resolution: usize,
    /// Cells per axis for ground-truth meshes extracted from the SDF.
    pub gt_resolution: usize,
    /// Offset factor along centroid rays for the exploded view.
    pub explode: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { resolution: 64, gt_resolution: 64, explode: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub sampler: SamplerConfig,
    pub seg: SegConfig,
    pub decode: DecodeConfig,
}

/// Extracts the 0.5 occupancy surface of `z` over `bounds`.
pub fn decode_mesh(vae: &GeomSegVae, z: &Tensor, bounds: Aabb, resolution: usize) -> Result<TriMesh> {
    let f = vae.occupancy_fn(z)?;
    Ok(marching_cubes(|p: &[Vec3]| f(p), bounds, resolution, 0.5)?.mesh)
}

/// Surface of a procedural shape, one marching-cubes mesh per part,
/// concatenated with the part index as face label.
pub fn ground_truth_mesh(spec: &ShapeSpec, resolution: usize) -> Result<TriMesh> {
    Ok(concat_meshes(&ground_truth_parts(spec, resolution)?))
}

pub fn ground_truth_parts(spec: &ShapeSpec, resolution: usize) -> Result<Vec<TriMesh>> {
    (0..spec.num_parts())
        .map(|i| {
            let part = spec.part(i);
            let field = |pts: &[Vec3]| pts.iter().map(|&p| -part.sdf(p)).collect::<Vec<_>>();
            Ok(marching_cubes(field, Aabb::signed_unit(), resolution, 0.0)?.mesh)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartStatus {
    /// Canonical mesh composed into the global box.
    Composed,
    /// Canonical mesh empty or unavailable; the global mesh is used as is.
    GlobalOnly,
    /// Global mesh empty; the part is left out.
    Skipped,
}

#[derive(Clone, Debug)]
pub struct DecodedPart {
    pub gcs: TriMesh,
    pub ncs: Option<TriMesh>,
    pub mesh: TriMesh,
    pub status: PartStatus,
}

/// Decodes both spaces of a part and composes the canonical mesh into the
/// global mesh's bounding box.
pub fn decode_part(vae: &GeomSegVae, latent: &DualSpaceLatent, resolution: usize) -> Result<DecodedPart> {
    let gcs = decode_mesh(vae, &latent.gcs, Aabb::signed_unit(), resolution)?;
    let ncs = latent.ncs.as_ref().map(|z| decode_mesh(vae, z, Aabb::unit(), resolution)).transpose()?;
    let Some(target) = gcs.aabb() else {
        log::warn!("part decodes to an empty global mesh; skipping it");
        return Ok(DecodedPart { gcs, ncs, mesh: TriMesh::empty(), status: PartStatus::Skipped });
    };
    let (mesh, status) = match &ncs {
        Some(n) if !n.is_empty() => (compose_part(n, &target)?, PartStatus::Composed),
        _ => (gcs.clone(), PartStatus::GlobalOnly),
    };
    Ok(DecodedPart { gcs, ncs, mesh, status })
}

/// Posterior mean of a record's whole object and the encoder input used.
pub fn encode_record(vae: &GeomSegVae, record: &Record) -> Result<(Tensor, EncoderInput)> {
    let input = EncoderInput::new(&record.surface, record.spec.num_parts(), &vae.config)?;
    Ok((vae.encode_mean(&input)?, input))
}

pub fn whole_example(vae: &GeomSegVae, record: &Record) -> Result<WholeExample> {
    Ok(WholeExample { latent: encode_record(vae, record)?.0, image: record.image.clone() })
}

fn encode_single(vae: &GeomSegVae, spec: &ShapeSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let surface = sample_surface(spec, vae.config.input_points, rng)?;
    vae.encode_mean(&EncoderInput::new(&surface, 1, &vae.config)?)
}

/// Part-level training examples for one record: per part, the VAE means of
/// the part in place and rescaled to `[0,1]³`, conditioned on the latents
/// of the whole object whose anchors carry that part's label. Parts that
/// own no anchor are left out.
pub fn part_examples(vae: &GeomSegVae, record: &Record, with_ncs: bool) -> Result<Vec<PartExample>> {
    let (whole, input) = encode_record(vae, record)?;
    let mut rng = ChaCha8Rng::seed_from_u64(record.seed);
    rng.set_stream(PART_STREAM);
    let mut out = Vec::new();
    for i in 0..record.spec.num_parts() {
        let part = record.spec.part(i);
        let gcs = encode_single(vae, &part, &mut rng)?;
        let ncs = if with_ncs { Some(encode_single(vae, &part.normalized_unit(), &mut rng)?) } else { None };
        let group: Vec<usize> = (0..input.anchor_labels.len()).filter(|&j| input.anchor_labels[j] == i as u32).collect();
        if group.is_empty() {
            log::debug!("record {} part {i} owns no anchor", record.seed);
            continue;
        }
        let cond = PartCondition::new(Some(record.image.clone()), whole.clone(), group, &input.anchors)?;
        out.push(PartExample { target: DualSpaceLatent { gcs, ncs }, cond });
    }
    Ok(out)
}

/// Seed of the sampler for part `index`; the whole stage uses the base seed.
pub fn part_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(1 + index as u64)
}

/// Second stage: one dual-space latent and decoded part per segment group.
pub fn generate_parts(
    vae: &GeomSegVae,
    part: &PartDit,
    image: Option<&ConditionImage>,
    whole: &Tensor,
    seg: &SegmentationResult,
    sampler: &SamplerConfig,
    resolution: usize,
) -> Result<Vec<(DualSpaceLatent, DecodedPart)>> {
    seg.groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let cond = PartCondition::new(image.cloned(), whole.clone(), group.indices.clone(), &seg.anchors)?;
            let s = SamplerConfig { seed: part_seed(sampler.seed, g), ..*sampler };
            let latent = part.generate(&cond, &s)?;
            let decoded = decode_part(vae, &latent, resolution)?;
            Ok((latent, decoded))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GeneratedObject {
    pub whole: Tensor,
    pub segmentation: SegmentationResult,
    pub latents: Vec<DualSpaceLatent>,
    pub parts: Vec<DecodedPart>,
    /// Concatenation of the non-skipped parts, labelled by part order.
    pub mesh: TriMesh,
}

impl GeneratedObject {
    pub fn from_parts(whole: Tensor, segmentation: SegmentationResult, parts: Vec<(DualSpaceLatent, DecodedPart)>) -> Self {
        let (latents, parts): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        let mesh = assemble(&parts);
        GeneratedObject { whole, segmentation, latents, parts, mesh }
    }

    pub fn skipped(&self) -> usize {
        self.parts.iter().filter(|p| p.status == PartStatus::Skipped).count()
    }
}

pub fn assemble(parts: &[DecodedPart]) -> TriMesh {
    let meshes: Vec<TriMesh> =
        parts.iter().filter(|p| p.status != PartStatus::Skipped).map(|p| p.mesh.clone()).collect();
    concat_meshes(&meshes)
}

/// Parts pushed away from the object center along their centroid rays.
pub fn exploded(parts: &[TriMesh], factor: f64) -> TriMesh {
    let boxes: Vec<Aabb> = parts.iter().filter_map(|m| m.aabb()).collect();
    let Some(all) = boxes.iter().copied().reduce(|a, b| {
        Aabb::new(
            std::array::from_fn(|k| a.min[k].min(b.min[k])),
            std::array::from_fn(|k| a.max[k].max(b.max[k])),
        )
    }) else {
        return TriMesh::empty();
    };
    let center = all.center();
    let moved: Vec<TriMesh> = parts
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let c = m.aabb().expect("non-empty").center();
            let offset = vec3::scale(vec3::sub(c, center), factor);
            let mut out = m.clone();
            out.vertices.iter_mut().for_each(|v| *v = vec3::add(*v, offset));
            out
        })
        .collect();
    concat_meshes(&moved)
}

/// Full pipeline: image → whole latent → segmentation → parts → mesh.
pub fn generate_object(
    vae: &GeomSegVae,
    whole: &WholeDit,
    part: &PartDit,
    image: &ConditionImage,
    cfg: &GenerateConfig,
) -> Result<GeneratedObject> {
    let z = whole.generate(image, &cfg.sampler)?;
    let seg = segment_latent(vae, &z, &cfg.seg)?;
    let parts = generate_parts(vae, part, Some(image), &z, &seg, &cfg.sampler, cfg.decode.resolution)?;
    Ok(GeneratedObject::from_parts(z, seg, parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEvalReport {
    /// Thresholded occupancy agreement on near-surface and uniform queries.
    pub occupancy_accuracy: f64,
    /// Latent segmentation on the encoder's anchors vs. anchor labels.
    pub segmentation_accuracy: f64,
    /// Mean distance between decoded and true anchor positions.
    pub position_error: f64,
    pub objects: usize,
}

/// Held-out reconstruction quality of the VAE, averaged over records.
pub fn evaluate_vae(vae: &GeomSegVae, records: &[Record], loss: &VaeLossConfig, seg: &SegConfig) -> Result<VaeEvalReport> {
    if records.is_empty() {
        return Err(Error::Invalid("no records to evaluate".into()));
    }
    let (mut occ, mut acc, mut pos) = (0.0, 0.0, 0.0);
    for r in records {
        let (z, input) = encode_record(vae, r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
        rng.set_stream(EVAL_STREAM);
        let q = sample_queries(&r.spec, &r.surface, loss.queries, loss.near_fraction, loss.near_std, &mut rng);
        let pred = vae.decode_geometry(&z, &q.points)?;
        let hits = pred.iter().zip(&q.occupancy).filter(|(&p, &o)| (p > 0.5) == (o > 0.5)).count();
        occ += hits as f64 / q.points.len() as f64;
        let s = segment_with_anchors(vae, &z, input.anchors.clone(), seg)?;
        acc += segmentation_accuracy(&s.assignment, &input.anchor_labels)?;
        let decoded = vae.decode_position(&z)?;
        pos += decoded.iter().zip(&input.anchors).map(|(&a, &b)| vec3::norm(vec3::sub(a, b))).sum::<f64>()
            / decoded.len() as f64;
    }
    let n = records.len() as f64;
    Ok(VaeEvalReport {
        occupancy_accuracy: occ / n,
        segmentation_accuracy: acc / n,
        position_error: pos / n,
        objects: records.len(),
    })
}

/// End-to-end benchmark. Objects whose generated mesh is empty are counted
/// as failures; mIoU compares the latent partition against the part labels
/// of the decoded anchors.
pub fn evaluate_generation(
    vae: &GeomSegVae,
    whole: &WholeDit,
    part: &PartDit,
    records: &[Record],
    cfg: &GenerateConfig,
    eval: &EvalConfig,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in records {
        let name = r.seed.to_string();
        let obj = generate_object(vae, whole, part, &r.image, cfg)?;
        if obj.mesh.is_empty() {
            log::warn!("object {name}: generated mesh is empty");
            failures.push(name);
            continue;
        }
        let gt = ground_truth_mesh(&r.spec, cfg.decode.gt_resolution)?;
        let s = pose_search_eval(&obj.mesh, &gt, eval)?;
        let (_, labels) = sdf_and_label(&r.spec, &obj.segmentation.anchors);
        let m = miou(&obj.segmentation.assignment, &labels)?;
        rows.push(ObjectRow {
            object: name,
            cd: s.cd,
            f_at_005: s.f_at_005,
            f_at_010: s.f_at_010,
            best_rotation: s.best_rotation,
            miou: Some(m),
        });
    }
    Ok(MetricReport::from_rows(rows, failures))
}

/// Per-part result of [`evaluate_parts`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartEvalRow {
    pub object: u64,
    pub part: usize,
    /// Bounding-box diagonal of the ground-truth part.
    pub size: f64,
    /// Chamfer distance to the ground-truth part in object coordinates;
    /// `None` on failure.
    pub cd: Option<f64>,
    /// Empty, or its box misses the ground-truth part's box.
    pub failed: bool,
}

/// Generates every part of every record from ground-truth conditions (the
/// VAE's whole latent and anchor-label groups) and scores it in place.
pub fn evaluate_parts(
    vae: &GeomSegVae,
    part: &PartDit,
    records: &[Record],
    sampler: &SamplerConfig,
    decode: &DecodeConfig,
    eval: &EvalConfig,
) -> Result<Vec<PartEvalRow>> {
    let mut rows = Vec::new();
    for r in records {
        let (whole, input) = encode_record(vae, r)?;
        let gt_parts = ground_truth_parts(&r.spec, decode.gt_resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(eval.seed ^ r.seed);
        for (i, gt) in gt_parts.iter().enumerate() {
            let group: Vec<usize> =
                (0..input.anchor_labels.len()).filter(|&j| input.anchor_labels[j] == i as u32).collect();
            let Some(gt_box) = gt.aabb() else { continue };
            if group.is_empty() {
                continue;
            }
            let cond = PartCondition::new(Some(r.image.clone()), whole.clone(), group, &input.anchors)?;
            let s = SamplerConfig { seed: part_seed(sampler.seed, i), ..*sampler };
            let decoded = decode_part(vae, &part.generate(&cond, &s)?, decode.resolution)?;
            let placed = decoded.mesh.aabb().is_some_and(|b| b.intersects(&gt_box));
            let cd = if placed {
                let a = sample_mesh(&decoded.mesh, eval.samples, &mut rng)?.points;
                let b = sample_mesh(gt, eval.samples, &mut rng)?.points;
                Some(chamfer(&a, &b, eval.squared)?)
            } else {
                None
            };
            rows.push(PartEvalRow { object: r.seed, part: i, size: gt_box.diagonal(), cd, failed: !placed });
        }
    }
    Ok(rows)
}

/// Mean Chamfer over the smallest quarter of parts by size (at least one),
/// counting only parts that did not fail.
pub fn smallest_quartile_chamfer(rows: &[PartEvalRow]) -> Option<f64> {
    let mut sorted: Vec<&PartEvalRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.size.total_cmp(&b.size).then(a.object.cmp(&b.object)).then(a.part.cmp(&b.part)));
    let k = sorted.len().div_ceil(4);
    let cds: Vec<f64> = sorted[..k].iter().filter_map(|r| r.cd).collect();
    (!cds.is_empty()).then(|| cds.iter().sum::<f64>() / cds.len() as f64)
}
