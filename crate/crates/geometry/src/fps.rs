use crate::error::{GeometryError, Result};
use crate::vec3::{self, Vec3};

/// Farthest point sampling starting from index 0.
///
/// Each pick maximizes the distance to the already chosen set; ties go to
/// the lowest index.
pub fn farthest_point_sample(points: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(GeometryError::TooFewPoints { k, available: points.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    min_dist[current] = f64::NEG_INFINITY;
    chosen.push(current);
    while chosen.len() < k {
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = vec3::dist_sq(*p, anchor);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = i;
            }
        }
        current = best;
        min_dist[current] = f64::NEG_INFINITY;
        chosen.push(current);
    }
    Ok(chosen)
}
