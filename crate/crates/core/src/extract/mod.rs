//! Inference: dense field evaluation on a cell-centred lattice, threshold
//! surface points, meshing, label transfer and scene scoring.

mod mc_table;
pub mod mesh;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mesh::{marching_cubes, palette_color, sampled_hausdorff, TriangleMesh, PALETTE};

use crate::error::{LodeError, Result};
use crate::field::{ImplicitField, EVAL_CHUNK};
use crate::grid::{voxelize, voxelize_labeled, GridConfig, LabeledOccupancy, OccupancyVolume, PointCloud, Vec3};
use crate::knn::PointIndex;
use crate::metrics::{iou, miou, IoUReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Lattice points along the longest box axis.
    pub n_inf: usize,
    /// Surface threshold on `|value|`, meters.
    pub v_th: f64,
    /// Points per parallel evaluation task.
    pub chunk: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { n_inf: 256, v_th: 0.1, chunk: EVAL_CHUNK }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_inf < 2 {
            return Err(LodeError::Config(format!("n_inf must be at least 2, got {}", self.n_inf)));
        }
        if !(self.v_th > 0.0) || !self.v_th.is_finite() {
            return Err(LodeError::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        if self.chunk == 0 {
            return Err(LodeError::Config("chunk must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cubic-cell lattice of cell centres covering the scene box. Spacing is the
/// longest extent over `n_inf`. Lattices at `n` and `3n` share points, and
/// shared points are computed bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    /// Per-axis offset of the covered region; the lattice is centred on axes
    /// that are not a whole number of cells.
    pub base: [f64; 3],
    /// Longest box extent, meters.
    pub long: f64,
    pub n_inf: usize,
    pub spacing: f64,
    pub counts: [usize; 3],
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Lattice {
    pub fn new(grid: &GridConfig, n_inf: usize) -> Result<Self> {
        if n_inf < 2 {
            return Err(LodeError::Config(format!("lattice resolution must be at least 2, got {n_inf}")));
        }
        let ext = grid.extent();
        let long = ext.max();
        let spacing = long / n_inf as f64;
        let mut counts = [0; 3];
        let mut base = [0.0; 3];
        for a in 0..3 {
            counts[a] = ((ext[a] / spacing).round() as usize).max(1);
            base[a] = grid.origin[a] + 0.5 * (ext[a] - counts[a] as f64 * spacing);
        }
        Ok(Self { base, long, n_inf, spacing, counts })
    }

    fn coord(&self, a: usize, i: usize) -> f64 {
        // (2i + 1) / (2 n_inf) in lowest terms
        let (num, den) = (2 * i + 1, 2 * self.n_inf);
        let g = gcd(num, den);
        self.base[a] + self.long * ((num / g) as f64 / (den / g) as f64)
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// x-major, then y, then z.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.counts[1] + j) * self.counts[2] + k
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(self.coord(0, i), self.coord(1, j), self.coord(2, k))
    }

    pub fn points(&self) -> Vec<Vec3> {
        let [nx, ny, nz] = self.counts;
        let mut v = Vec::with_capacity(self.len());
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    v.push(self.point(i, j, k));
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub lattice: Lattice,
    /// Meters, in [`Lattice::index`] order.
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(LodeError::LengthMismatch { expected: lattice.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LodeError::NonFinite { index: i });
        }
        Ok(Self { lattice, values })
    }

    /// Grid of an arbitrary scalar function, e.g. an analytic SDF.
    pub fn from_fn(lattice: Lattice, f: impl Fn(&Vec3) -> f64) -> Result<Self> {
        let values = lattice.points().iter().map(f).collect();
        Self::new(lattice, values)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.lattice.index(i, j, k)]
    }

    pub fn negated(&self) -> Self {
        Self { lattice: self.lattice, values: self.values.iter().map(|v| -v).collect() }
    }
}

/// Field values at every lattice point, evaluated in parallel chunks.
pub fn evaluate_grid(field: &ImplicitField, cfg: &InferenceConfig) -> Result<SdfGrid> {
    cfg.validate()?;
    let lattice = Lattice::new(&field.grid, cfg.n_inf)?;
    let points = lattice.points();
    let parts: Vec<Vec<f64>> = points.par_chunks(cfg.chunk).map(|c| field.values(c)).collect::<Result<_>>()?;
    SdfGrid::new(lattice, parts.concat())
}

/// Lattice points with `|value| < v_th`, in lattice order.
pub fn extract_surface_points(sdf: &SdfGrid, v_th: f64) -> Result<PointCloud> {
    if !(v_th > 0.0) {
        return Err(LodeError::Config(format!("v_th must be positive, got {v_th}")));
    }
    let [nx, ny, nz] = sdf.lattice.counts;
    let mut pts = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if sdf.value(i, j, k).abs() < v_th {
                    pts.push(sdf.lattice.point(i, j, k));
                }
            }
        }
    }
    Ok(PointCloud::new(pts))
}

/// Majority label among the `k` nearest labelled points. Ties go to the
/// tied class whose member is nearest.
pub fn knn_label_transfer(labeled: &PointCloud, queries: &[Vec3], k: usize) -> Result<Vec<u16>> {
    if k == 0 {
        return Err(LodeError::Config("k must be at least 1".into()));
    }
    let labels = labeled.labels.as_ref().ok_or_else(|| LodeError::Config("labelled cloud has no labels".into()))?;
    let index = PointIndex::new(&labeled.points)?;
    Ok(queries
        .iter()
        .map(|q| {
            let nn = index.k_nearest(q, k);
            let mut votes: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
            for (rank, &(i, _)) in nn.iter().enumerate() {
                let e = votes.entry(labels[i]).or_insert((0, rank));
                e.0 += 1;
            }
            votes
                .into_iter()
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
                .map(|(l, _)| l)
                .expect("k >= 1 and a non-empty index give a neighbour")
        })
        .collect())
}

/// Argmax of the semantic head at each point.
pub fn predict_labels(field: &ImplicitField, points: &[Vec3]) -> Result<Vec<u16>> {
    Ok(field
        .semantic_batch(points)?
        .iter()
        .map(|logits| {
            let mut best = 0;
            for (c, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect())
}

/// Voxelizes predicted points (out-of-box points are dropped) and scores them
/// against ground truth.
pub fn evaluate_scene(pred: &PointCloud, gt_occ: &OccupancyVolume, grid: &GridConfig) -> Result<IoUReport> {
    grid.check_same(&gt_occ.grid)?;
    iou(&voxelize(pred, grid)?, gt_occ)
}

/// Mean class IoU over correctly completed voxels: both label maps are
/// restricted to voxels occupied in both prediction and ground truth.
pub fn evaluate_semantics(pred: &PointCloud, gt: &LabeledOccupancy, num_classes: usize) -> Result<IoUReport> {
    let p = voxelize_labeled(pred, &gt.grid)?;
    let both = |a: &LabeledOccupancy, b: &LabeledOccupancy| LabeledOccupancy {
        grid: a.grid,
        labels: a.labels.iter().filter(|(c, _)| b.labels.contains_key(*c)).map(|(c, l)| (*c, *l)).collect(),
    };
    miou(&both(&p, gt), &both(gt, &p), num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub v_th: f64,
    pub points: usize,
    pub iou: f64,
}

/// Surface-point count and IoU at each threshold.
pub fn threshold_sweep(sdf: &SdfGrid, gt_occ: &OccupancyVolume, thresholds: &[f64]) -> Result<Vec<SweepPoint>> {
    thresholds
        .iter()
        .map(|&v_th| {
            let pts = extract_surface_points(sdf, v_th)?;
            let r = evaluate_scene(&pts, gt_occ, &gt_occ.grid)?;
            Ok(SweepPoint { v_th, points: pts.len(), iou: r.iou })
        })
        .collect()
}

/// `v_th,iou` CSV with a header line.
pub fn sweep_csv(curve: &[SweepPoint]) -> String {
    let mut s = String::from("v_th,iou\n");
    for p in curve {
        s.push_str(&format!("{},{}\n", p.v_th, p.iou));
    }
    s
}
