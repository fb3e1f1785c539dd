//! Mesh kernel: marching cubes, winding-number containment, farthest point
//! sampling, normalization and part composition, surface sampling, and
//! OBJ/PLY I/O.

mod error;
pub mod fps;
pub mod io;
pub mod marching_cubes;
pub mod mesh;
pub mod sampling;
pub mod spatial;
mod tables;
pub mod transform;
pub mod vec3;
pub mod winding;

pub use error::{GeometryError, Result};
pub use fps::farthest_point_sample;
pub use marching_cubes::{marching_cubes, Extraction, Grid};
pub use mesh::{Aabb, TriMesh};
pub use sampling::{sample_surface, SurfaceSamples};
pub use spatial::KdTree;
pub use transform::{compose_part, concat_meshes, normalize_mesh, Affine, NormTarget};
pub use vec3::Vec3;
pub use winding::{winding_number, winding_number_contains};
