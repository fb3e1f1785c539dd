//! Procedural multi-part shapes built as unions of closed primitives.
//!
//! Every shape carries exact signed distances, per-part labels, labelled
//! surface samples, and an orthographic silhouette+depth raster.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use unipart_geometry::vec3::{self, Vec3};
use unipart_geometry::Aabb;

use crate::error::{Error, Result};

pub const MAX_PARTS: usize = 16;
/// Half-width of the cube the union is fitted into.
pub const FIT_HALF_EXTENT: f64 = 0.9;
const EXPOSURE_SAMPLES: usize = 128;
const MIN_EXPOSURE: f64 = 0.25;
const PLACEMENT_TRIES: usize = 32;
const SHAPE_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    Cylinder,
    Capsule,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] =
        [PrimitiveKind::Box, PrimitiveKind::Sphere, PrimitiveKind::Cylinder, PrimitiveKind::Capsule];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// One closed primitive placed in object space.
///
/// `dims` holds the per-axis size: half extents for a box, `[r, _, _]` for a
/// sphere, `[r, half_height, _]` for a cylinder and `[r, half_length, _]` for
/// a capsule (both along the local y axis). `rotation` maps local to world
/// coordinates: `world = rotation · local + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartPrimitive {
    pub kind: PrimitiveKind,
    pub dims: Vec3,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub part_id: u32,
}

fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [vec3::dot(m[0], v), vec3::dot(m[1], v), vec3::dot(m[2], v)]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl PartPrimitive {
    pub fn new(kind: PrimitiveKind, dims: Vec3, translation: Vec3, part_id: u32) -> Self {
        PartPrimitive { kind, dims, rotation: IDENTITY, translation, part_id }
    }

    pub fn sphere(radius: f64, center: Vec3, part_id: u32) -> Self {
        Self::new(PrimitiveKind::Sphere, [radius, 0.0, 0.0], center, part_id)
    }

    fn to_local(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, vec3::sub(p, self.translation))
    }

    fn to_world(&self, q: Vec3) -> Vec3 {
        vec3::add(mat_vec(&self.rotation, q), self.translation)
    }

    /// Exact signed distance, negative inside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let q = self.to_local(p);
        let d = self.dims;
        match self.kind {
            PrimitiveKind::Sphere => vec3::norm(q) - d[0],
            PrimitiveKind::Box => {
                let e = [q[0].abs() - d[0], q[1].abs() - d[1], q[2].abs() - d[2]];
                let outside = vec3::norm([e[0].max(0.0), e[1].max(0.0), e[2].max(0.0)]);
                outside + e[0].max(e[1]).max(e[2]).min(0.0)
            }
            PrimitiveKind::Cylinder => {
                let radial = (q[0] * q[0] + q[2] * q[2]).sqrt() - d[0];
                let axial = q[1].abs() - d[1];
                let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
                outside + radial.max(axial).min(0.0)
            }
            PrimitiveKind::Capsule => {
                let y = q[1].clamp(-d[1], d[1]);
                vec3::norm([q[0], q[1] - y, q[2]]) - d[0]
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        let d = self.dims;
        let pi = std::f64::consts::PI;
        match self.kind {
            PrimitiveKind::Sphere => 4.0 * pi * d[0] * d[0],
            PrimitiveKind::Box => 8.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2]),
            PrimitiveKind::Cylinder => 2.0 * pi * d[0] * 2.0 * d[1] + 2.0 * pi * d[0] * d[0],
            PrimitiveKind::Capsule => 2.0 * pi * d[0] * 2.0 * d[1] + 4.0 * pi * d[0] * d[0],
        }
    }

    /// Radius of the largest ball centred at the origin of the primitive.
    pub fn inner_radius(&self) -> f64 {
        let d = self.dims;
        match self.kind {
            PrimitiveKind::Sphere | PrimitiveKind::Capsule => d[0],
            PrimitiveKind::Box => d[0].min(d[1]).min(d[2]),
            PrimitiveKind::Cylinder => d[0].min(d[1]),
        }
    }

    /// Exact world-space bounding box.
    pub fn aabb(&self) -> Aabb {
        let d = self.dims;
        let r = &self.rotation;
        let mut half = [0.0; 3];
        for (a, h) in half.iter_mut().enumerate() {
            *h = match self.kind {
                PrimitiveKind::Sphere => d[0],
                PrimitiveKind::Box => (0..3).map(|k| r[a][k].abs() * d[k]).sum(),
                PrimitiveKind::Cylinder => {
                    let axis = r[a][1];
                    d[1] * axis.abs() + d[0] * (1.0 - axis * axis).max(0.0).sqrt()
                }
                PrimitiveKind::Capsule => d[1] * r[a][1].abs() + d[0],
            };
        }
        let t = self.translation;
        Aabb::new(vec3::sub(t, half), vec3::add(t, half))
    }

    /// Uniform sample on the primitive surface with its outward normal.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, Vec3) {
        let d = self.dims;
        let pi = std::f64::consts::PI;
        let (q, n) = match self.kind {
            PrimitiveKind::Sphere => {
                let u = unit_gaussian(rng);
                (vec3::scale(u, d[0]), u)
            }
            PrimitiveKind::Box => {
                let areas = [d[1] * d[2], d[1] * d[2], d[0] * d[2], d[0] * d[2], d[0] * d[1], d[0] * d[1]];
                let face = pick_weighted(&areas, rng);
                let axis = face / 2;
                let sign = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
                let mut q = [0.0; 3];
                let mut n = [0.0; 3];
                for (a, c) in q.iter_mut().enumerate() {
                    *c = if a == axis { sign * d[a] } else { rng.random_range(-d[a]..=d[a]) };
                }
                n[axis] = sign;
                (q, n)
            }
            PrimitiveKind::Cylinder => {
                let side = 4.0 * pi * d[0] * d[1];
                let cap = pi * d[0] * d[0];
                match pick_weighted(&[side, cap, cap], rng) {
                    0 => {
                        let th = rng.random_range(0.0..2.0 * pi);
                        let y = rng.random_range(-d[1]..=d[1]);
                        ([d[0] * th.cos(), y, d[0] * th.sin()], [th.cos(), 0.0, th.sin()])
                    }
                    k => {
                        let sign = if k == 1 { 1.0 } else { -1.0 };
                        let rr = d[0] * rng.random::<f64>().sqrt();
                        let th = rng.random_range(0.0..2.0 * pi);
                        ([rr * th.cos(), sign * d[1], rr * th.sin()], [0.0, sign, 0.0])
                    }
                }
            }
            PrimitiveKind::Capsule => {
                let side = 4.0 * pi * d[0] * d[1];
                let caps = 4.0 * pi * d[0] * d[0];
                if pick_weighted(&[side, caps], rng) == 0 {
                    let th = rng.random_range(0.0..2.0 * pi);
                    let y = rng.random_range(-d[1]..=d[1]);
                    ([d[0] * th.cos(), y, d[0] * th.sin()], [th.cos(), 0.0, th.sin()])
                } else {
                    let u = unit_gaussian(rng);
                    let c = if u[1] >= 0.0 { d[1] } else { -d[1] };
                    (vec3::add(vec3::scale(u, d[0]), [0.0, c, 0.0]), u)
                }
            }
        };
        (self.to_world(q), mat_vec(&self.rotation, n))
    }

    /// Applies `p ↦ s·p + offset` to the placed primitive.
    pub fn similarity(&self, s: f64, offset: Vec3) -> PartPrimitive {
        PartPrimitive {
            kind: self.kind,
            dims: vec3::scale(self.dims, s),
            rotation: self.rotation,
            translation: vec3::add(vec3::scale(self.translation, s), offset),
            part_id: self.part_id,
        }
    }
}

fn unit_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let g: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = vec3::norm(g);
        if n > 1e-12 {
            return vec3::scale(g, 1.0 / n);
        }
    }
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(weights).expect("positive weights").sample(rng)
}

/// Uniformly random rotation matrix from a unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for c in &mut q {
            *c = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-12 {
            q.iter_mut().for_each(|c| *c /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// A multi-part object: the union of its parts, labelled by `part_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub parts: Vec<PartPrimitive>,
}

impl ShapeSpec {
    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Signed distance to the union and the lowest-id nearest part.
    pub fn sdf_label(&self, p: Vec3) -> (f64, u32) {
        let mut best = (f64::INFINITY, 0);
        for part in &self.parts {
            let d = part.sdf(p);
            if d < best.0 || (d == best.0 && part.part_id < best.1) {
                best = (d, part.part_id);
            }
        }
        best
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.parts.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.sdf(p) < 0.0
    }

    pub fn aabb(&self) -> Option<Aabb> {
        let mut it = self.parts.iter().map(PartPrimitive::aabb);
        let first = it.next()?;
        Some(it.fold(first, |a, b| {
            Aabb::new(
                [a.min[0].min(b.min[0]), a.min[1].min(b.min[1]), a.min[2].min(b.min[2])],
                [a.max[0].max(b.max[0]), a.max[1].max(b.max[1]), a.max[2].max(b.max[2])],
            )
        }))
    }

    pub fn similarity(&self, s: f64, offset: Vec3) -> ShapeSpec {
        ShapeSpec { parts: self.parts.iter().map(|p| p.similarity(s, offset)).collect() }
    }

    /// Uniformly scales and centres the union so its largest extent spans
    /// `[-half, half]`.
    pub fn fit_centered(&self, half: f64) -> ShapeSpec {
        let b = self.aabb().expect("non-empty shape");
        let largest = b.extent().into_iter().fold(0.0, f64::max);
        let s = 2.0 * half / largest;
        let c = b.center();
        self.similarity(s, vec3::scale(c, -s))
    }

    /// Part `index` on its own, relabelled as part 0.
    pub fn part(&self, index: usize) -> ShapeSpec {
        let mut p = self.parts[index].clone();
        p.part_id = 0;
        ShapeSpec { parts: vec![p] }
    }

    /// The same shape uniformly fitted into `[0,1]³`, centred, largest
    /// extent spanning the full range.
    pub fn normalized_unit(&self) -> ShapeSpec {
        let b = self.aabb().expect("non-empty shape");
        let largest = b.extent().into_iter().fold(0.0, f64::max);
        let s = 1.0 / largest;
        let c = b.center();
        self.similarity(s, [0.5 - c[0] * s, 0.5 - c[1] * s, 0.5 - c[2] * s])
    }

    /// Fraction of part `i`'s surface not buried in other parts, estimated
    /// from `samples` surface draws.
    fn exposure<R: Rng + ?Sized>(&self, i: usize, samples: usize, rng: &mut R) -> f64 {
        let part = &self.parts[i];
        let mut free = 0;
        for _ in 0..samples {
            let (p, _) = part.sample_surface(rng);
            if self.parts.iter().enumerate().all(|(j, o)| j == i || o.sdf(p) >= 0.0) {
                free += 1;
            }
        }
        free as f64 / samples as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveMix {
    pub box_weight: f64,
    pub sphere_weight: f64,
    pub cylinder_weight: f64,
    pub capsule_weight: f64,
}

impl Default for PrimitiveMix {
    fn default() -> Self {
        PrimitiveMix { box_weight: 1.0, sphere_weight: 1.0, cylinder_weight: 1.0, capsule_weight: 1.0 }
    }
}

impl PrimitiveMix {
    fn weights(&self) -> [f64; 4] {
        [self.box_weight, self.sphere_weight, self.cylinder_weight, self.capsule_weight]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    pub min_parts: usize,
    pub max_parts: usize,
    pub primitive_mix: PrimitiveMix,
    /// Range of primitive half sizes before the union is fitted.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig { min_parts: 2, max_parts: 4, primitive_mix: PrimitiveMix::default(), min_size: 0.15, max_size: 0.45 }
    }
}

impl ShapeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Unsatisfiable(m));
        if self.min_parts < 2 {
            return bad(format!("min_parts must be at least 2, got {}", self.min_parts));
        }
        if self.max_parts < self.min_parts {
            return bad(format!("max_parts {} below min_parts {}", self.max_parts, self.min_parts));
        }
        if self.max_parts > MAX_PARTS {
            return bad(format!("max_parts {} exceeds the supported {MAX_PARTS}", self.max_parts));
        }
        let w = self.primitive_mix.weights();
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return bad("primitive weights must be non-negative with a positive sum".into());
        }
        if !(self.min_size > 0.0 && self.max_size >= self.min_size) {
            return bad(format!("invalid size range [{}, {}]", self.min_size, self.max_size));
        }
        Ok(())
    }
}

fn random_primitive<R: Rng + ?Sized>(cfg: &ShapeConfig, part_id: u32, rng: &mut R) -> PartPrimitive {
    let kind = PrimitiveKind::ALL[pick_weighted(&cfg.primitive_mix.weights(), rng)];
    let mut size = || rng.random_range(cfg.min_size..=cfg.max_size);
    let dims = match kind {
        PrimitiveKind::Box => [size(), size(), size()],
        PrimitiveKind::Sphere => [size(), 0.0, 0.0],
        PrimitiveKind::Cylinder | PrimitiveKind::Capsule => {
            let r = size();
            [r, size(), 0.0]
        }
    };
    PartPrimitive { kind, dims, rotation: random_rotation(rng), translation: [0.0; 3], part_id }
}

/// Deterministic multi-part shape for `seed`.
///
/// Each new part is centred just inside the surface of a random earlier part
/// so the union stays connected; placements that bury any part below a
/// quarter of its surface are retried. The union is fitted into
/// `[-0.9, 0.9]³`.
pub fn generate_shape(seed: u64, cfg: &ShapeConfig) -> Result<ShapeSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_parts..=cfg.max_parts);
    'attempt: for _ in 0..SHAPE_ATTEMPTS {
        let mut spec = ShapeSpec { parts: vec![random_primitive(cfg, 0, &mut rng)] };
        for i in 1..n {
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                let host = &spec.parts[rng.random_range(0..i)];
                let (p, normal) = host.sample_surface(&mut rng);
                let mut cand = random_primitive(cfg, i as u32, &mut rng);
                let depth = rng.random_range(0.0..0.8) * cand.inner_radius();
                cand.translation = vec3::add(p, vec3::scale(normal, depth));
                spec.parts.push(cand);
                let ok = (0..spec.parts.len()).all(|j| spec.exposure(j, EXPOSURE_SAMPLES, &mut rng) >= MIN_EXPOSURE);
                if ok {
                    placed = true;
                    break;
                }
                spec.parts.pop();
            }
            if !placed {
                continue 'attempt;
            }
        }
        return Ok(spec.fit_centered(FIT_HALF_EXTENT));
    }
    Err(Error::Unsatisfiable(format!("no valid {n}-part arrangement for seed {seed}")))
}

/// Signed distances to the union and nearest-part labels for `points`.
pub fn sdf_and_label(spec: &ShapeSpec, points: &[Vec3]) -> (Vec<f64>, Vec<u32>) {
    points.iter().map(|&p| spec.sdf_label(p)).unzip()
}

/// Oriented, labelled points on the union surface.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSurfaceSample {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub labels: Vec<u32>,
}

impl LabeledSurfaceSample {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The first `n` samples (all of them if there are fewer).
    pub fn prefix(&self, n: usize) -> LabeledSurfaceSample {
        let n = n.min(self.len());
        LabeledSurfaceSample {
            positions: self.positions[..n].to_vec(),
            normals: self.normals[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// `count` points uniform over the exposed union surface.
///
/// Points are drawn on each primitive in proportion to its full area and
/// kept only when no other part contains them, which leaves the buried
/// portions out and keeps the density uniform on what remains.
pub fn sample_surface<R: Rng + ?Sized>(spec: &ShapeSpec, count: usize, rng: &mut R) -> Result<LabeledSurfaceSample> {
    if count == 0 {
        return Err(Error::Invalid("surface sample count must be at least 1".into()));
    }
    if spec.parts.is_empty() {
        return Err(Error::Invalid("shape has no parts".into()));
    }
    let areas: Vec<f64> = spec.parts.iter().map(PartPrimitive::surface_area).collect();
    let pick = WeightedIndex::new(&areas).map_err(|_| Error::Invalid("shape has a zero-area part".into()))?;
    let mut out = LabeledSurfaceSample::default();
    let budget = count.saturating_mul(1000).max(100_000);
    for _ in 0..budget {
        if out.len() == count {
            return Ok(out);
        }
        let i = pick.sample(rng);
        let part = &spec.parts[i];
        let (p, n) = part.sample_surface(rng);
        if spec.parts.iter().enumerate().any(|(j, o)| j != i && o.sdf(p) < 0.0) {
            continue;
        }
        out.positions.push(p);
        out.normals.push(n);
        out.labels.push(part.part_id);
    }
    if out.len() == count {
        Ok(out)
    } else {
        Err(Error::Invalid("surface is almost entirely buried".into()))
    }
}

/// Occupancy supervision: query points and their inside/outside labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldQuery {
    pub points: Vec<Vec3>,
    pub occupancy: Vec<f64>,
}

/// Mix of near-surface (jittered surface points) and uniform queries in
/// `[-1,1]³`.
pub fn sample_queries<R: Rng + ?Sized>(
    spec: &ShapeSpec,
    surface: &LabeledSurfaceSample,
    count: usize,
    near_fraction: f64,
    near_std: f64,
    rng: &mut R,
) -> FieldQuery {
    let near = ((count as f64) * near_fraction).round() as usize;
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let p = if k < near && !surface.is_empty() {
            let s = surface.positions[rng.random_range(0..surface.len())];
            let jitter: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let q = vec3::add(s, vec3::scale(jitter, near_std));
            q.map(|c| c.clamp(-1.0, 1.0))
        } else {
            [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
        };
        points.push(p);
    }
    let occupancy = points.iter().map(|&p| if spec.contains(p) { 1.0 } else { 0.0 }).collect();
    FieldQuery { points, occupancy }
}

/// Two-channel raster: silhouette then normalized depth, row-major with
/// channels last, row 0 at `y = +1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ConditionImage {
    pub fn silhouette(&self, row: usize, col: usize) -> f64 {
        self.data[(row * self.width + col) * 2]
    }

    pub fn depth(&self, row: usize, col: usize) -> f64 {
        self.data[(row * self.width + col) * 2 + 1]
    }

    pub const MAGIC: &'static [u8; 8] = b"UNIPCIMG";
    pub const VERSION: u32 = 1;

    /// Magic, `u32` version, `u32` height, `u32` width, then the samples
    /// as `f64`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.data.len());
        out.extend_from_slice(Self::MAGIC);
        for v in [Self::VERSION, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != Self::MAGIC {
            return Err(Error::Format("not a condition image".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        if word(0) != Self::VERSION {
            return Err(Error::Format(format!("unsupported condition image version {}", word(0))));
        }
        let (height, width) = (word(1) as usize, word(2) as usize);
        let body = &bytes[20..];
        if body.len() != 16 * height * width {
            return Err(Error::Format(format!("{height}x{width} image needs {} bytes, found {}", 16 * height * width, body.len())));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(ConditionImage { height, width, data })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    /// Splits into non-overlapping `patch × patch` tiles in raster order,
    /// each flattened row-major with channels last.
    pub fn patches(&self, patch: usize) -> Result<Vec<Vec<f64>>> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Invalid(format!(
                "{}x{} image does not tile into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        let mut out = Vec::new();
        for pr in 0..self.height / patch {
            for pc in 0..self.width / patch {
                let mut tile = Vec::with_capacity(patch * patch * 2);
                for r in pr * patch..(pr + 1) * patch {
                    let start = (r * self.width + pc * patch) * 2;
                    tile.extend_from_slice(&self.data[start..start + patch * 2]);
                }
                out.push(tile);
            }
        }
        Ok(out)
    }
}

/// Fixed orthographic camera looking down −z over the `[-1,1]²` window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Camera {
    pub resolution: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Camera { resolution: 64 }
    }
}

const TRACE_EPS: f64 = 1e-7;
const TRACE_STEPS: usize = 512;

impl Camera {
    /// Ray origin in the `z = 1` plane for a pixel centre.
    pub fn pixel_origin(&self, row: usize, col: usize) -> Vec3 {
        let n = self.resolution as f64;
        [-1.0 + (col as f64 + 0.5) * 2.0 / n, 1.0 - (row as f64 + 0.5) * 2.0 / n, 1.0]
    }
}

/// Sphere-traces every pixel; depth is `(1 − z_hit) / 2`.
pub fn render_condition(spec: &ShapeSpec, camera: &Camera) -> ConditionImage {
    let n = camera.resolution;
    let mut data = vec![0.0; n * n * 2];
    for row in 0..n {
        for col in 0..n {
            let o = camera.pixel_origin(row, col);
            if let Some(z) = trace(spec, o) {
                data[(row * n + col) * 2] = 1.0;
                data[(row * n + col) * 2 + 1] = (1.0 - z) / 2.0;
            }
        }
    }
    ConditionImage { height: n, width: n, data }
}

/// First surface crossing below `origin` along −z: sphere tracing to within
/// `TRACE_EPS`, then bisection on the sign once the ray has entered.
fn trace(spec: &ShapeSpec, origin: Vec3) -> Option<f64> {
    let at = |z: f64| spec.sdf([origin[0], origin[1], z]);
    let mut z = origin[2];
    for _ in 0..TRACE_STEPS {
        let d = at(z);
        if d < TRACE_EPS {
            if d <= 0.0 {
                return Some(z);
            }
            let (mut hi, mut lo) = (z, z);
            for k in 0..64 {
                lo = z - TRACE_EPS * (k + 1) as f64 * 4.0;
                if at(lo) < 0.0 {
                    break;
                }
            }
            if at(lo) >= 0.0 {
                return Some(z);
            }
            for _ in 0..60 {
                let mid = 0.5 * (hi + lo);
                if at(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(hi);
        }
        z -= d;
        if z < -1.0 {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_aabb_bounds_surface_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in PrimitiveKind::ALL {
            let p = PartPrimitive {
                kind,
                dims: [0.3, 0.5, 0.2],
                rotation: random_rotation(&mut rng),
                translation: [0.1, -0.2, 0.3],
                part_id: 0,
            };
            let b = p.aabb();
            let mut seen = Aabb::new(p.translation, p.translation);
            for _ in 0..4000 {
                let (s, n) = p.sample_surface(&mut rng);
                assert!(p.sdf(s).abs() < 1e-12, "{kind:?}");
                assert!((vec3::norm(n) - 1.0).abs() < 1e-12);
                let outside = vec3::add(s, vec3::scale(n, 1e-4));
                assert!(p.sdf(outside) > 0.0, "{kind:?} normal points outward");
                for a in 0..3 {
                    seen.min[a] = seen.min[a].min(s[a]);
                    seen.max[a] = seen.max[a].max(s[a]);
                }
            }
            for a in 0..3 {
                assert!(seen.min[a] >= b.min[a] - 1e-12 && seen.max[a] <= b.max[a] + 1e-12);
                assert!(seen.max[a] > b.max[a] - 0.05, "{kind:?} box is tight");
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(4));
        for i in 0..3 {
            for j in 0..3 {
                let d = vec3::dot(r[i], r[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
