use std::collections::{HashMap, HashSet};

use crate::error::{GeometryError, Result};
use crate::vec3::{self, Vec3};

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        debug_assert!((0..3).all(|a| min[a] <= max[a]), "min must not exceed max");
        Aabb { min, max }
    }

    pub fn unit() -> Self {
        Aabb { min: [0.0; 3], max: [1.0; 3] }
    }

    pub fn signed_unit() -> Self {
        Aabb { min: [-1.0; 3], max: [1.0; 3] }
    }

    /// Tight box around `points`, `None` when there are none.
    pub fn from_points(points: &[Vec3]) -> Option<Self> {
        let first = *points.first()?;
        let mut b = Aabb { min: first, max: first };
        for p in &points[1..] {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn extent(&self) -> Vec3 {
        vec3::sub(self.max, self.min)
    }

    pub fn center(&self) -> Vec3 {
        vec3::scale(vec3::add(self.min, self.max), 0.5)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.max[a] && other.min[a] <= self.max[a])
    }

    pub fn diagonal(&self) -> f64 {
        vec3::norm(self.extent())
    }

    pub fn max_abs_diff(&self, other: &Aabb) -> f64 {
        (0..3)
            .map(|a| (self.min[a] - other.min[a]).abs().max((self.max[a] - other.max[a]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Indexed triangle mesh with optional per-face part labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub face_labels: Option<Vec<u32>>,
}

impl TriMesh {
    /// Builds a mesh after checking indices and label count.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>, face_labels: Option<Vec<u32>>) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            for &i in f {
                if i as usize >= vertices.len() {
                    return Err(GeometryError::FaceIndex {
                        face: fi,
                        index: i as usize,
                        vertices: vertices.len(),
                    });
                }
            }
        }
        if let Some(labels) = &face_labels {
            if labels.len() != faces.len() {
                return Err(GeometryError::LabelCount { labels: labels.len(), faces: faces.len() });
            }
        }
        Ok(TriMesh { vertices, faces, face_labels })
    }

    pub fn empty() -> Self {
        TriMesh::default()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.vertices)
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [self.vertices[f[0] as usize], self.vertices[f[1] as usize], self.vertices[f[2] as usize]]
    }

    /// Unnormalized face normal, twice the face area in length.
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        vec3::cross(vec3::sub(b, a), vec3::sub(c, a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * vec3::norm(self.face_cross(face))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive for closed meshes with outward faces.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                vec3::dot(a, vec3::cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn flip_faces(&mut self) {
        for f in &mut self.faces {
            f.swap(1, 2);
        }
    }

    /// Euler characteristic over referenced vertices, V − E + F.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = HashSet::new();
        let mut edges = HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                used.insert(f[k]);
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        used.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }

    /// True when every undirected edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !counts.is_empty() && counts.values().all(|&c| c == 2)
    }

    /// Drops faces with repeated indices or exactly zero area.
    pub fn remove_degenerate_faces(&mut self) -> usize {
        let keep: Vec<bool> = (0..self.faces.len())
            .map(|i| {
                let f = self.faces[i];
                f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && self.face_area(i) > 0.0
            })
            .collect();
        let before = self.faces.len();
        let mut it = keep.iter();
        self.faces.retain(|_| *it.next().unwrap());
        if let Some(labels) = &mut self.face_labels {
            let mut it = keep.iter();
            labels.retain(|_| *it.next().unwrap());
        }
        before - self.faces.len()
    }

    /// Splits a labelled mesh into one mesh per label, compacting vertices.
    /// Returned in ascending label order.
    pub fn split_by_label(&self) -> Vec<(u32, TriMesh)> {
        let Some(labels) = &self.face_labels else {
            return vec![(0, self.clone())];
        };
        let mut distinct: Vec<u32> = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        distinct
            .into_iter()
            .map(|label| {
                let mut remap: HashMap<u32, u32> = HashMap::new();
                let mut vertices = Vec::new();
                let mut faces = Vec::new();
                for (f, &l) in self.faces.iter().zip(labels) {
                    if l != label {
                        continue;
                    }
                    let mut nf = [0u32; 3];
                    for k in 0..3 {
                        nf[k] = *remap.entry(f[k]).or_insert_with(|| {
                            vertices.push(self.vertices[f[k] as usize]);
                            (vertices.len() - 1) as u32
                        });
                    }
                    faces.push(nf);
                }
                (label, TriMesh { vertices, faces, face_labels: None })
            })
            .collect()
    }

    /// Axis-aligned box mesh with outward faces.
    pub fn cuboid(b: Aabb) -> TriMesh {
        let (lo, hi) = (b.min, b.max);
        let vertices: Vec<Vec3> = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { lo[0] } else { hi[0] },
                    if i & 2 == 0 { lo[1] } else { hi[1] },
                    if i & 4 == 0 { lo[2] } else { hi[2] },
                ]
            })
            .collect();
        let faces = vec![
            [0, 2, 1], [1, 2, 3],
            [4, 5, 6], [5, 7, 6],
            [0, 1, 4], [1, 5, 4],
            [2, 6, 3], [3, 6, 7],
            [0, 4, 2], [2, 4, 6],
            [1, 3, 5], [3, 7, 5],
        ];
        TriMesh { vertices, faces, face_labels: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_measures() {
        let m = TriMesh::cuboid(Aabb::unit());
        assert!((m.area() - 6.0).abs() < 1e-12);
        assert!((m.signed_volume() - 1.0).abs() < 1e-12);
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_closed());
    }

    #[test]
    fn out_of_range_index_rejected() {
        let err = TriMesh::new(vec![[0.0; 3]; 2], vec![[0, 1, 2]], None).unwrap_err();
        assert!(matches!(err, GeometryError::FaceIndex { index: 2, .. }));
    }

    #[test]
    fn degenerate_faces_removed_with_labels() {
        let mut m = TriMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0, 1, 2], [0, 1, 3], [0, 0, 2]],
            Some(vec![7, 8, 9]),
        )
        .unwrap();
        assert_eq!(m.remove_degenerate_faces(), 2);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        assert_eq!(m.face_labels, Some(vec![7]));
    }
}
