use crate::mesh::TriMesh;
use crate::vec3::{self, Vec3};

/// Generalized winding number of `p`: summed signed solid angles over 4π.
pub fn winding_number(mesh: &TriMesh, p: Vec3) -> f64 {
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        total += solid_angle(vec3::sub(a, p), vec3::sub(b, p), vec3::sub(c, p));
    }
    total / (4.0 * std::f64::consts::PI)
}

/// Signed solid angle subtended by a triangle seen from the origin.
fn solid_angle(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let (la, lb, lc) = (vec3::norm(a), vec3::norm(b), vec3::norm(c));
    let num = vec3::dot(a, vec3::cross(b, c));
    let den = la * lb * lc + vec3::dot(a, b) * lc + vec3::dot(a, c) * lb + vec3::dot(b, c) * la;
    2.0 * num.atan2(den)
}

/// Inside test per point: winding number above one half.
///
/// Points outside the bounding box of a closed mesh are reported outside
/// without summation.
pub fn winding_number_contains(mesh: &TriMesh, points: &[Vec3]) -> Vec<bool> {
    let closed = mesh.is_closed();
    if !closed && !mesh.is_empty() {
        log::warn!("winding-number containment on a mesh that is not closed");
    }
    let bounds = mesh.aabb();
    points
        .iter()
        .map(|&p| match bounds {
            None => false,
            Some(b) if closed && !b.contains(p) => false,
            Some(_) => winding_number(mesh, p) > 0.5,
        })
        .collect()
}
