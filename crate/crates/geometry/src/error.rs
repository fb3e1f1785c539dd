use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("marching cubes needs resolution >= 8, got {0}")]
    Resolution(usize),

    #[error("sample count {count} does not match grid with {expected} samples")]
    GridSize { count: usize, expected: usize },

    #[error("cannot pick {k} points from {available}")]
    TooFewPoints { k: usize, available: usize },

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("mesh has zero extent")]
    ZeroExtent,

    #[error("face {face} references vertex {index} but mesh has {vertices} vertices")]
    FaceIndex { face: usize, index: usize, vertices: usize },

    #[error("face label count {labels} does not match face count {faces}")]
    LabelCount { labels: usize, faces: usize },

    #[error("{format} parse error on line {line}: {message}")]
    Parse { format: &'static str, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;
