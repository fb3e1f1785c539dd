use crate::error::{GeometryError, Result};
use crate::mesh::{Aabb, TriMesh};
use crate::vec3::Vec3;

/// Smallest box extent allowed on any axis when composing.
pub const MIN_EXTENT: f64 = 1e-6;

/// Per-axis scale followed by a translation: `p * scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: Vec3,
    pub offset: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Affine { scale: [1.0; 3], offset: [0.0; 3] }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        [
            p[0] * self.scale[0] + self.offset[0],
            p[1] * self.scale[1] + self.offset[1],
            p[2] * self.scale[2] + self.offset[2],
        ]
    }

    pub fn inverse(&self) -> Affine {
        let scale = self.scale.map(|s| 1.0 / s);
        let offset = [
            -self.offset[0] * scale[0],
            -self.offset[1] * scale[1],
            -self.offset[2] * scale[2],
        ];
        Affine { scale, offset }
    }

    pub fn apply_mesh(&self, mesh: &TriMesh) -> TriMesh {
        TriMesh {
            vertices: mesh.vertices.iter().map(|&p| self.apply(p)).collect(),
            faces: mesh.faces.clone(),
            face_labels: mesh.face_labels.clone(),
        }
    }

    /// Maps box `from` onto box `to` axis by axis. Flat axes of `from` land
    /// on the center of `to`.
    pub fn box_to_box(from: &Aabb, to: &Aabb) -> Affine {
        let mut scale = [1.0; 3];
        let mut offset = [0.0; 3];
        for a in 0..3 {
            let src = from.max[a] - from.min[a];
            let dst = to.max[a] - to.min[a];
            if src > 0.0 {
                scale[a] = dst / src;
                offset[a] = to.min[a] - from.min[a] * scale[a];
            } else {
                offset[a] = 0.5 * (to.min[a] + to.max[a]) - from.min[a];
            }
        }
        Affine { scale, offset }
    }
}

/// Target cube for [`normalize_mesh`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormTarget {
    /// `[-1, 1]³`
    Signed,
    /// `[0, 1]³`
    Unit,
}

impl NormTarget {
    pub fn bounds(self) -> Aabb {
        match self {
            NormTarget::Signed => Aabb::signed_unit(),
            NormTarget::Unit => Aabb::unit(),
        }
    }
}

/// Centers the mesh in the target cube and scales it uniformly so the
/// largest extent spans the full range.
pub fn normalize_mesh(mesh: &TriMesh, target: NormTarget) -> Result<(TriMesh, Affine)> {
    let b = mesh.aabb().ok_or(GeometryError::EmptyMesh)?;
    let largest = b.extent().into_iter().fold(0.0, f64::max);
    if !(largest > 0.0) {
        return Err(GeometryError::ZeroExtent);
    }
    let t = target.bounds();
    let s = (t.max[0] - t.min[0]) / largest;
    let c = b.center();
    let tc = t.center();
    let affine = Affine { scale: [s; 3], offset: [tc[0] - c[0] * s, tc[1] - c[1] * s, tc[2] - c[2] * s] };
    Ok((affine.apply_mesh(mesh), affine))
}

/// Places a normalized part inside `target_box`.
///
/// The part's own tight box is mapped onto the target axis by axis, so the
/// output box equals the target. Target axes thinner than [`MIN_EXTENT`] are
/// widened about their center with a warning.
pub fn compose_part(mesh_ncs: &TriMesh, target_box: &Aabb) -> Result<TriMesh> {
    let from = mesh_ncs.aabb().ok_or(GeometryError::EmptyMesh)?;
    let mut to = *target_box;
    for a in 0..3 {
        if to.max[a] - to.min[a] < MIN_EXTENT {
            log::warn!(
                "target box axis {a} has extent {:.3e}; clamping to {MIN_EXTENT:e}",
                to.max[a] - to.min[a]
            );
            let c = 0.5 * (to.min[a] + to.max[a]);
            to.min[a] = c - 0.5 * MIN_EXTENT;
            to.max[a] = c + 0.5 * MIN_EXTENT;
        }
    }
    Ok(Affine::box_to_box(&from, &to).apply_mesh(mesh_ncs))
}

/// Joins meshes into one, labelling each face with its source list index.
pub fn concat_meshes(meshes: &[TriMesh]) -> TriMesh {
    let mut out = TriMesh::empty();
    let mut labels = Vec::new();
    for (i, m) in meshes.iter().enumerate() {
        let base = out.vertices.len() as u32;
        out.vertices.extend_from_slice(&m.vertices);
        out.faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        labels.extend(std::iter::repeat_n(i as u32, m.faces.len()));
    }
    if !meshes.is_empty() {
        out.face_labels = Some(labels);
    }
    out
}
