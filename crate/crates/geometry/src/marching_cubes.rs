use std::collections::HashMap;

use crate::error::{GeometryError, Result};
use crate::mesh::{Aabb, TriMesh};
use crate::tables::{CORNERS, EDGES, TRIANGLES};
use crate::vec3::{self, Vec3};

pub const MIN_RESOLUTION: usize = 8;
pub const DEFAULT_ISOLEVEL: f64 = 0.5;
const QUERY_CHUNK: usize = 8192;

/// Result of an extraction. `no_crossing` is set when the whole field lies
/// on one side of the isolevel, in which case the mesh is empty.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub mesh: TriMesh,
    pub no_crossing: bool,
}

/// Regular grid of `resolution` cells per axis spanning `bounds`.
#[derive(Clone, Copy, Debug)]
pub struct Grid {
    pub bounds: Aabb,
    pub resolution: usize,
}

impl Grid {
    pub fn new(bounds: Aabb, resolution: usize) -> Result<Self> {
        if resolution < MIN_RESOLUTION {
            return Err(GeometryError::Resolution(resolution));
        }
        Ok(Grid { bounds, resolution })
    }

    pub fn samples_per_axis(&self) -> usize {
        self.resolution + 1
    }

    pub fn num_samples(&self) -> usize {
        self.samples_per_axis().pow(3)
    }

    pub fn cell_size(&self) -> Vec3 {
        vec3::scale(self.bounds.extent(), 1.0 / self.resolution as f64)
    }

    /// Sample index, x fastest.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let n = self.samples_per_axis();
        (z * n + y) * n + x
    }

    pub fn point(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.cell_size();
        [
            self.bounds.min[0] + x as f64 * h[0],
            self.bounds.min[1] + y as f64 * h[1],
            self.bounds.min[2] + z as f64 * h[2],
        ]
    }

    /// All sample positions in index order.
    pub fn points(&self) -> Vec<Vec3> {
        let n = self.samples_per_axis();
        let mut out = Vec::with_capacity(self.num_samples());
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    out.push(self.point(x, y, z));
                }
            }
        }
        out
    }

    /// Evaluates a batched field over the grid in chunks.
    pub fn sample<F>(&self, mut field: F) -> Result<Vec<f64>>
    where
        F: FnMut(&[Vec3]) -> Vec<f64>,
    {
        let points = self.points();
        let mut values = Vec::with_capacity(points.len());
        for chunk in points.chunks(QUERY_CHUNK) {
            let v = field(chunk);
            if v.len() != chunk.len() {
                return Err(GeometryError::GridSize { count: v.len(), expected: chunk.len() });
            }
            values.extend(v);
        }
        Ok(values)
    }
}

/// Extracts the `isolevel` surface of a field that is high inside.
pub fn marching_cubes<F>(field: F, bounds: Aabb, resolution: usize, isolevel: f64) -> Result<Extraction>
where
    F: FnMut(&[Vec3]) -> Vec<f64>,
{
    let grid = Grid::new(bounds, resolution)?;
    let values = grid.sample(field)?;
    extract(&grid, &values, isolevel)
}

/// Extracts from precomputed samples laid out as [`Grid::points`].
pub fn extract(grid: &Grid, values: &[f64], isolevel: f64) -> Result<Extraction> {
    if values.len() != grid.num_samples() {
        return Err(GeometryError::GridSize { count: values.len(), expected: grid.num_samples() });
    }
    let inside = values.iter().filter(|&&v| v >= isolevel).count();
    if inside == 0 || inside == values.len() {
        return Ok(Extraction { mesh: TriMesh::empty(), no_crossing: true });
    }

    let r = grid.resolution;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();

    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let mut corner_idx = [0usize; 8];
                let mut corner_val = [0f64; 8];
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    let idx = grid.index(x + off[0], y + off[1], z + off[2]);
                    corner_idx[c] = idx;
                    corner_val[c] = values[idx];
                    if values[idx] < isolevel {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLES[case];
                let mut t = 0;
                while t + 2 < 16 && row[t] >= 0 {
                    let mut tri = [0u32; 3];
                    for k in 0..3 {
                        let e = row[t + k] as usize;
                        let [c0, c1] = EDGES[e];
                        let (a, b) = (corner_idx[c0], corner_idx[c1]);
                        let key = (a.min(b), a.max(b));
                        tri[k] = *edge_vertex.entry(key).or_insert_with(|| {
                            let off0 = CORNERS[c0];
                            let off1 = CORNERS[c1];
                            let p0 = grid.point(x + off0[0], y + off0[1], z + off0[2]);
                            let p1 = grid.point(x + off1[0], y + off1[1], z + off1[2]);
                            let (v0, v1) = (corner_val[c0], corner_val[c1]);
                            let s = ((isolevel - v0) / (v1 - v0)).clamp(1e-6, 1.0 - 1e-6);
                            vertices.push(vec3::lerp(p0, p1, s));
                            (vertices.len() - 1) as u32
                        });
                    }
                    faces.push(tri);
                    t += 3;
                }
            }
        }
    }

    let mut mesh = TriMesh { vertices, faces, face_labels: None };
    mesh.remove_degenerate_faces();
    if mesh.signed_volume() < 0.0 {
        mesh.flip_faces();
    }
    Ok(Extraction { mesh, no_crossing: false })
}
