//! ASCII OBJ and PLY import and export.
//!
//! OBJ output writes one `g part_<label>` group per part label; reading maps
//! groups back to labels in order of first appearance. PLY meshes carry
//! the optional label as a per-face `int label` property.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GeometryError, Result};
use crate::mesh::TriMesh;
use crate::vec3::Vec3;

pub fn obj_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    match &mesh.face_labels {
        None => {
            for f in &mesh.faces {
                let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
            }
        }
        Some(labels) => {
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            for label in distinct {
                let _ = writeln!(s, "g part_{label}");
                for (f, _) in mesh.faces.iter().zip(labels).filter(|(_, &l)| l == label) {
                    let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
                }
            }
        }
    }
    s
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    std::fs::write(path, obj_string(mesh))?;
    Ok(())
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let err = |line: usize, message: String| GeometryError::Parse { format: "OBJ", line, message };
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    let mut labels = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    let mut current: Option<u32> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let mut tok = raw.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    let t = tok.next().ok_or_else(|| err(line, "vertex needs 3 coordinates".into()))?;
                    *c = t.parse().map_err(|e| err(line, format!("bad coordinate {t:?}: {e}")))?;
                }
                vertices.push(p);
            }
            Some("g") | Some("o") => {
                let name = tok.collect::<Vec<_>>().join(" ");
                let id = match groups.iter().position(|g| *g == name) {
                    Some(i) => i,
                    None => {
                        groups.push(name);
                        groups.len() - 1
                    }
                };
                current = Some(id as u32);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let head = t.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|e| err(line, format!("bad index {t:?}: {e}")))?;
                    let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(err(line, format!("index {i} out of range")));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(err(line, "face needs at least 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                    labels.push(current.unwrap_or(0));
                }
            }
            _ => {}
        }
    }
    let face_labels = if groups.is_empty() { None } else { Some(labels) };
    TriMesh::new(vertices, faces, face_labels)
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}

pub fn ply_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", mesh.faces.len());
    s.push_str("property list uchar int vertex_indices\n");
    if mesh.face_labels.is_some() {
        s.push_str("property int label\n");
    }
    s.push_str("end_header\n");
    for v in &mesh.vertices {
        let _ = writeln!(s, "{:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for (i, f) in mesh.faces.iter().enumerate() {
        match &mesh.face_labels {
            Some(l) => {
                let _ = writeln!(s, "3 {} {} {} {}", f[0], f[1], f[2], l[i]);
            }
            None => {
                let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
            }
        }
    }
    s
}

pub fn write_ply(path: &Path, mesh: &TriMesh) -> Result<()> {
    std::fs::write(path, ply_string(mesh))?;
    Ok(())
}

/// Parses the ASCII PLY layout produced by [`ply_string`].
pub fn parse_ply(text: &str) -> Result<TriMesh> {
    let err = |line: usize, message: String| GeometryError::Parse { format: "PLY", line, message };
    let mut lines = text.lines().enumerate();
    let mut nv = 0usize;
    let mut nf = 0usize;
    let mut labelled = false;
    let mut in_face = false;
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing ply magic".into())),
    }
    loop {
        let (n, l) = lines.next().ok_or_else(|| err(0, "missing end_header".into()))?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(err(n + 1, format!("unsupported format {fmt}"))),
            ["element", "vertex", c] => {
                nv = c.parse().map_err(|_| err(n + 1, "bad vertex count".into()))?;
                in_face = false;
            }
            ["element", "face", c] => {
                nf = c.parse().map_err(|_| err(n + 1, "bad face count".into()))?;
                in_face = true;
            }
            ["property", _, "label"] if in_face => labelled = true,
            ["end_header"] => break,
            _ => {}
        }
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (n, l) = lines.next().ok_or_else(|| err(0, "truncated vertex list".into()))?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| err(n + 1, format!("bad coordinate {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 3 {
            return Err(err(n + 1, "vertex needs 3 coordinates".into()));
        }
        vertices.push([vals[0], vals[1], vals[2]]);
    }
    let mut faces = Vec::with_capacity(nf);
    let mut labels = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (n, l) = lines.next().ok_or_else(|| err(0, "truncated face list".into()))?;
        let vals: Vec<i64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(n + 1, format!("bad integer {t:?}"))))
            .collect::<Result<_>>()?;
        let count = *vals.first().ok_or_else(|| err(n + 1, "empty face".into()))? as usize;
        if count < 3 || vals.len() < 1 + count + labelled as usize {
            return Err(err(n + 1, "malformed face".into()));
        }
        let idx = &vals[1..1 + count];
        if idx.iter().any(|&i| i < 0) {
            return Err(err(n + 1, "negative index".into()));
        }
        for k in 1..count - 1 {
            faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
            if labelled {
                labels.push(vals[1 + count] as u32);
            }
        }
    }
    TriMesh::new(vertices, faces, labelled.then_some(labels))
}

pub fn read_ply(path: &Path) -> Result<TriMesh> {
    parse_ply(&std::fs::read_to_string(path)?)
}

/// Colored point cloud as ASCII PLY.
pub fn write_point_cloud_ply(path: &Path, points: &[Vec3], colors: &[[u8; 3]]) -> Result<()> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, c) in points.iter().zip(colors.iter().chain(std::iter::repeat(&[200, 200, 200]))) {
        let _ = writeln!(s, "{:?} {:?} {:?} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Distinct, stable color for a part label.
pub fn label_color(label: u32) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    PALETTE[label as usize % PALETTE.len()]
}
