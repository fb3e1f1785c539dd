//! Reconstruction and segmentation metrics: Chamfer distance, F-score with
//! a four-rotation pose search, and Hungarian-matched mIoU.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unipart_geometry::{normalize_mesh, sample_surface, vec3, KdTree, NormTarget, TriMesh, Vec3};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Surface samples per mesh.
    pub samples: usize,
    pub seed: u64,
    /// Use squared distances in the Chamfer sum.
    pub squared: bool,
    /// Pick the best rotation separately for each metric instead of taking
    /// F-scores at the Chamfer-optimal rotation.
    pub per_metric_best: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: 10_000, seed: 0, squared: false, per_metric_best: false }
    }
}

pub const THRESHOLDS: [f64; 2] = [0.05, 0.10];
pub const ROTATIONS: [u32; 4] = [0, 90, 180, 270];

fn directed(from: &[Vec3], tree: &KdTree, squared: bool) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|&p| {
            let d2 = tree.nearest(p).expect("non-empty tree").1;
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        })
        .sum();
    sum / from.len() as f64
}

fn non_empty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("metric needs two non-empty point sets".into()));
    }
    Ok(())
}

/// `mean_a min_b d(a,b) + mean_b min_a d(a,b)`.
pub fn chamfer(a: &[Vec3], b: &[Vec3], squared: bool) -> Result<f64> {
    non_empty(a, b)?;
    Ok(directed(a, &KdTree::build(b), squared) + directed(b, &KdTree::build(a), squared))
}

/// O(n·m) reference for [`chamfer`].
pub fn chamfer_brute(a: &[Vec3], b: &[Vec3], squared: bool) -> Result<f64> {
    non_empty(a, b)?;
    let dir = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|&p| {
                let d2 = y.iter().map(|&q| vec3::dist_sq(p, q)).fold(f64::INFINITY, f64::min);
                if squared {
                    d2
                } else {
                    d2.sqrt()
                }
            })
            .sum::<f64>()
            / x.len() as f64
    };
    Ok(dir(a, b) + dir(b, a))
}

fn within(from: &[Vec3], tree: &KdTree, tau: f64) -> f64 {
    let n = from.iter().filter(|&&p| tree.nearest(p).expect("non-empty tree").1.sqrt() < tau).count();
    n as f64 / from.len() as f64
}

/// F-score at threshold `tau`; precision is measured from `pred`.
pub fn fscore(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<f64> {
    non_empty(pred, gt)?;
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("threshold {tau} must be positive")));
    }
    let precision = within(pred, &KdTree::build(gt), tau);
    let recall = within(gt, &KdTree::build(pred), tau);
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Rotation about +Y by a multiple of 90 degrees, exact.
pub fn rotate_y(p: Vec3, degrees: u32) -> Vec3 {
    let [x, y, z] = p;
    match degrees % 360 {
        0 => [x, y, z],
        90 => [z, y, -x],
        180 => [-x, y, -z],
        270 => [-z, y, x],
        d => {
            let r = (d as f64).to_radians();
            let (s, c) = r.sin_cos();
            [c * x + s * z, y, -s * x + c * z]
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseScores {
    pub cd: f64,
    pub f_at_005: f64,
    pub f_at_010: f64,
    pub best_rotation: u32,
}

/// Normalizes both meshes to `[-1,1]³`, samples their surfaces and scores
/// the prediction under each of the four rotations about +Y.
pub fn pose_search_eval(pred: &TriMesh, gt: &TriMesh, cfg: &EvalConfig) -> Result<PoseScores> {
    let (p, _) = normalize_mesh(pred, NormTarget::Signed)?;
    let (g, _) = normalize_mesh(gt, NormTarget::Signed)?;
    let ps = sample_surface(&p, cfg.samples, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?.points;
    let gs = sample_surface(&g, cfg.samples, &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)))?.points;
    pose_search_points(&ps, &gs, cfg)
}

pub fn pose_search_points(pred: &[Vec3], gt: &[Vec3], cfg: &EvalConfig) -> Result<PoseScores> {
    let mut per = Vec::with_capacity(4);
    for &deg in &ROTATIONS {
        let rotated: Vec<Vec3> = pred.iter().map(|&p| rotate_y(p, deg)).collect();
        let cd = chamfer(&rotated, gt, cfg.squared)?;
        let f1 = fscore(&rotated, gt, THRESHOLDS[0])?;
        let f2 = fscore(&rotated, gt, THRESHOLDS[1])?;
        per.push(PoseScores { cd, f_at_005: f1, f_at_010: f2, best_rotation: deg });
    }
    // First minimum wins, so ties prefer the smaller angle.
    let best = per.iter().copied().reduce(|a, b| if b.cd < a.cd { b } else { a }).expect("four rotations");
    if cfg.per_metric_best {
        return Ok(PoseScores {
            f_at_005: per.iter().map(|s| s.f_at_005).fold(0.0, f64::max),
            f_at_010: per.iter().map(|s| s.f_at_010).fold(0.0, f64::max),
            ..best
        });
    }
    Ok(best)
}

/// Maximum-weight assignment of rows to columns for a dense `n × m`
/// matrix. Returns, for each row, its column or `None` when `n > m`.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = weights.len();
    let m = weights.first().map_or(0, |r| r.len());
    let size = n.max(m);
    if size == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| if i < n && j < m { -weights[i][j] } else { 0.0 };
    // Shortest augmenting path with potentials; 1-based with a sentinel
    // column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=size {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=size {
        let i = p[j];
        if i >= 1 && i <= n && j <= m {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Distinct labels in first-appearance order and the IoU of every
/// ground-truth part (row) against every predicted group (column).
fn iou_matrix(pred: &[usize], gt: &[u32]) -> Result<(Vec<u32>, Vec<usize>, Vec<Vec<f64>>)> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!("{} predicted labels but {} ground-truth labels", pred.len(), gt.len())));
    }
    let mut gl: Vec<u32> = Vec::new();
    for &g in gt {
        if !gl.contains(&g) {
            gl.push(g);
        }
    }
    let mut pl: Vec<usize> = Vec::new();
    for &p in pred {
        if !pl.contains(&p) {
            pl.push(p);
        }
    }
    let m = gl
        .iter()
        .map(|&g| {
            pl.iter()
                .map(|&p| {
                    let inter = pred.iter().zip(gt).filter(|&(&a, &b)| a == p && b == g).count();
                    let union = pred.iter().zip(gt).filter(|&(&a, &b)| a == p || b == g).count();
                    inter as f64 / union as f64
                })
                .collect()
        })
        .collect();
    Ok((gl, pl, m))
}

/// Mean IoU over ground-truth parts under the optimal one-to-one matching
/// to predicted groups; unmatched parts score 0.
pub fn miou(pred: &[usize], gt: &[u32]) -> Result<f64> {
    let (gl, _, m) = iou_matrix(pred, gt)?;
    if gl.is_empty() {
        return Err(Error::Invalid("mIoU of an empty labelling".into()));
    }
    let assign = hungarian_max(&m);
    let total: f64 = assign.iter().enumerate().map(|(i, a)| a.map_or(0.0, |j| m[i][j])).sum();
    Ok(total / gl.len() as f64)
}

/// Reference for [`miou`] by trying every injective matching.
pub fn miou_exhaustive(pred: &[usize], gt: &[u32]) -> Result<f64> {
    let (gl, pl, m) = iou_matrix(pred, gt)?;
    if gl.is_empty() {
        return Err(Error::Invalid("mIoU of an empty labelling".into()));
    }
    fn search(m: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == m.len() {
            return 0.0;
        }
        // Leaving this part unmatched is always allowed.
        let mut best = search(m, row + 1, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(m[row][j] + search(m, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    Ok(search(&m, 0, &mut vec![false; pl.len()]) / gl.len() as f64)
}

/// Per-latent accuracy after mapping each predicted group to a part:
/// matched groups take their Hungarian partner, the rest the part they
/// overlap most.
pub fn segmentation_accuracy(pred: &[usize], gt: &[u32]) -> Result<f64> {
    let (gl, pl, m) = iou_matrix(pred, gt)?;
    if gl.is_empty() {
        return Err(Error::Invalid("accuracy of an empty labelling".into()));
    }
    let assign = hungarian_max(&m);
    let mut label = vec![None; pl.len()];
    for (i, a) in assign.iter().enumerate() {
        if let Some(j) = *a {
            label[j] = Some(gl[i]);
        }
    }
    for (j, l) in label.iter_mut().enumerate() {
        if l.is_none() {
            let best = (0..gl.len())
                .max_by(|&a, &b| m[a][j].total_cmp(&m[b][j]).then(b.cmp(&a)))
                .expect("non-empty labels");
            *l = Some(gl[best]);
        }
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|&(&p, &g)| label[pl.iter().position(|&x| x == p).expect("seen label")] == Some(g))
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// One evaluated object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRow {
    pub object: String,
    pub cd: f64,
    pub f_at_005: f64,
    pub f_at_010: f64,
    pub best_rotation: u32,
    /// Latent mIoU when available.
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub f_at_005: f64,
    pub f_at_010: f64,
    pub miou: Option<f64>,
    pub objects: usize,
    pub failures: Vec<String>,
    pub rows: Vec<ObjectRow>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ObjectRow>, failures: Vec<String>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&ObjectRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mious: Vec<f64> = rows.iter().filter_map(|r| r.miou).collect();
        MetricReport {
            cd: mean(|r| r.cd),
            f_at_005: mean(|r| r.f_at_005),
            f_at_010: mean(|r| r.f_at_010),
            miou: (!mious.is_empty()).then(|| mious.iter().sum::<f64>() / mious.len() as f64),
            objects: rows.len(),
            failures,
            rows,
        }
    }

    /// CSV with header `object,cd,f_at_005,f_at_010,best_rotation,miou`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes the CSV to `path` and the full report as JSON next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
