use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{GeometryError, Result};
use crate::mesh::TriMesh;
use crate::vec3::{self, Vec3};

#[derive(Clone, Debug, Default)]
pub struct SurfaceSamples {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub faces: Vec<usize>,
}

/// Uniform samples over the surface area of `mesh`.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<SurfaceSamples> {
    let areas: Vec<f64> = (0..mesh.num_faces()).map(|f| mesh.face_area(f)).collect();
    let pick = WeightedIndex::new(&areas).map_err(|_| GeometryError::EmptyMesh)?;
    let mut out = SurfaceSamples::default();
    for _ in 0..n {
        let f = pick.sample(rng);
        let [a, b, c] = mesh.triangle(f);
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let s = r1.sqrt();
        let (u, v, w) = (1.0 - s, s * (1.0 - r2), s * r2);
        let p = [
            u * a[0] + v * b[0] + w * c[0],
            u * a[1] + v * b[1] + w * c[1],
            u * a[2] + v * b[2] + w * c[2],
        ];
        out.points.push(p);
        out.normals.push(vec3::normalize(mesh.face_cross(f)));
        out.faces.push(f);
    }
    Ok(out)
}
