//! Metric scene box, voxel indexing and point clouds.
//!
//! Every other module works in the frame defined here: a box anchored at
//! `origin` with cubic cells of edge `voxel_edge` and `dims` cells per axis.
//! Cells are half-open, so a point lying exactly on a face belongs to the
//! higher-index cell.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};

pub type Vec3 = Vector3<f64>;

/// Integer voxel coordinate. Signed so sparse neighbourhoods can step past
/// the grid boundary before being discarded.
pub type Coord = [i32; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub origin: [f64; 3],
    pub voxel_edge: f64,
    pub dims: [usize; 3],
}

impl GridConfig {
    pub fn new(origin: [f64; 3], voxel_edge: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_edge > 0.0) || !voxel_edge.is_finite() {
            return Err(LodeError::Config(format!("voxel_edge must be > 0, got {voxel_edge}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(LodeError::Config(format!("dims must be >= 1, got {dims:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(LodeError::Config("origin must be finite".into()));
        }
        Ok(Self { origin, voxel_edge, dims })
    }

    /// The 51.2 x 51.2 x 6.4 m road-scene frame at 0.2 m voxels.
    pub fn road_scene() -> Self {
        Self { origin: [0.0, -25.6, -2.0], voxel_edge: 0.2, dims: [256, 256, 32] }
    }

    /// Desk-scale frame (64 x 64 x 16 voxels of 0.2 m) used by the synthetic benchmark.
    pub fn desk() -> Self {
        Self { origin: [0.0, -6.4, -1.1], voxel_edge: 0.2, dims: [64, 64, 16] }
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.dims[0] as f64 * self.voxel_edge,
            self.dims[1] as f64 * self.voxel_edge,
            self.dims[2] as f64 * self.voxel_edge,
        )
    }

    pub fn max_corner(&self) -> Vec3 {
        self.origin() + self.extent()
    }

    pub fn center(&self) -> Vec3 {
        self.origin() + self.extent() * 0.5
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn contains_index(&self, idx: Coord) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    /// Closed-box containment test for query points.
    pub fn contains_point(&self, x: &Vec3) -> bool {
        let lo = self.origin();
        let hi = self.max_corner();
        (0..3).all(|a| x[a] >= lo[a] && x[a] <= hi[a])
    }

    /// Cell index of `x` without bounds checking.
    pub fn cell_of(&self, x: &Vec3) -> Coord {
        let o = self.origin;
        [
            ((x[0] - o[0]) / self.voxel_edge).floor() as i32,
            ((x[1] - o[1]) / self.voxel_edge).floor() as i32,
            ((x[2] - o[2]) / self.voxel_edge).floor() as i32,
        ]
    }

    pub fn voxel_center(&self, idx: Coord) -> Result<Vec3> {
        if !self.contains_index(idx) {
            return Err(LodeError::OutOfRange { index: idx, dims: self.dims });
        }
        Ok(self.voxel_center_unchecked(idx))
    }

    pub(crate) fn voxel_center_unchecked(&self, idx: Coord) -> Vec3 {
        let e = self.voxel_edge;
        Vec3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * e,
            self.origin[1] + (idx[1] as f64 + 0.5) * e,
            self.origin[2] + (idx[2] as f64 + 0.5) * e,
        )
    }

    /// Affine map of the box onto [-1, 1]^3.
    pub fn normalize(&self, x: &Vec3) -> Vec3 {
        let c = self.center();
        let h = self.half_extent();
        Vec3::new((x[0] - c[0]) / h[0], (x[1] - c[1]) / h[1], (x[2] - c[2]) / h[2])
    }

    pub fn denormalize(&self, u: &Vec3) -> Vec3 {
        let c = self.center();
        let h = self.half_extent();
        Vec3::new(c[0] + u[0] * h[0], c[1] + u[1] * h[1], c[2] + u[2] * h[2])
    }

    pub fn half_extent(&self) -> Vec3 {
        self.extent() * 0.5
    }

    pub fn check_same(&self, other: &GridConfig) -> Result<()> {
        if self != other {
            return Err(LodeError::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Free-function form of [`GridConfig::voxel_center`].
pub fn voxel_center(idx: Coord, grid: &GridConfig) -> Result<Vec3> {
    grid.voxel_center(idx)
}

pub fn normalize_coords(x: &Vec3, grid: &GridConfig) -> Vec3 {
    grid.normalize(x)
}

pub fn denormalize_coords(u: &Vec3, grid: &GridConfig) -> Vec3 {
    grid.denormalize(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyVolume {
    pub grid: GridConfig,
    pub occupied: BTreeSet<Coord>,
}

impl OccupancyVolume {
    pub fn empty(grid: GridConfig) -> Self {
        Self { grid, occupied: BTreeSet::new() }
    }

    pub fn from_indices(grid: GridConfig, indices: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let mut occupied = BTreeSet::new();
        for idx in indices {
            if !grid.contains_index(idx) {
                return Err(LodeError::OutOfRange { index: idx, dims: grid.dims });
            }
            occupied.insert(idx);
        }
        Ok(Self { grid, occupied })
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn contains(&self, idx: &Coord) -> bool {
        self.occupied.contains(idx)
    }

    /// Voxel centers of every occupied cell, in lexicographic order.
    pub fn centers(&self) -> Vec<Vec3> {
        self.occupied.iter().map(|&i| self.grid.voxel_center_unchecked(i)).collect()
    }
}

/// Occupancy with one class id per occupied voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledOccupancy {
    pub grid: GridConfig,
    pub labels: BTreeMap<Coord, u16>,
}

impl LabeledOccupancy {
    pub fn occupancy(&self) -> OccupancyVolume {
        OccupancyVolume { grid: self.grid, occupied: self.labels.keys().copied().collect() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, normals: None, labels: None }
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(LodeError::LengthMismatch { expected: self.points.len(), got: normals.len() });
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(LodeError::LengthMismatch { expected: self.points.len(), got: labels.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks parallel-list lengths and unit normals.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(LodeError::LengthMismatch { expected: n, got: normals.len() });
            }
            for nrm in normals {
                if (nrm.norm() - 1.0).abs() > 1e-6 {
                    return Err(LodeError::Config(format!("normal {nrm:?} is not unit length")));
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(LodeError::LengthMismatch { expected: n, got: labels.len() });
            }
        }
        Ok(())
    }

    /// Keeps the points for which `keep` returns true, along with their attributes.
    pub fn filter(&self, mut keep: impl FnMut(usize, &Vec3) -> bool) -> PointCloud {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i, &self.points[i])).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|n| idx.iter().map(|&i| n[i]).collect()),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Voxelizes `cloud`, returning the occupancy and the number of out-of-box points dropped.
pub fn voxelize_counted(cloud: &PointCloud, grid: &GridConfig) -> Result<(OccupancyVolume, usize)> {
    let mut occupied = BTreeSet::new();
    let mut dropped = 0;
    for (i, p) in cloud.points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return Err(LodeError::NonFinite { index: i });
        }
        let idx = grid.cell_of(p);
        if grid.contains_index(idx) {
            occupied.insert(idx);
        } else {
            dropped += 1;
        }
    }
    Ok((OccupancyVolume { grid: *grid, occupied }, dropped))
}

pub fn voxelize(cloud: &PointCloud, grid: &GridConfig) -> Result<OccupancyVolume> {
    voxelize_counted(cloud, grid).map(|(v, _)| v)
}

/// Voxelizes a labeled cloud; each voxel takes the most frequent label among
/// its points, ties going to the smaller class id.
pub fn voxelize_labeled(cloud: &PointCloud, grid: &GridConfig) -> Result<LabeledOccupancy> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| LodeError::Config("cloud has no labels".into()))?;
    let mut votes: BTreeMap<Coord, BTreeMap<u16, usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return Err(LodeError::NonFinite { index: i });
        }
        let idx = grid.cell_of(p);
        if grid.contains_index(idx) {
            *votes.entry(idx).or_default().entry(labels[i]).or_default() += 1;
        }
    }
    let labels = votes
        .into_iter()
        .map(|(idx, counts)| {
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&l, _)| l)
                .unwrap_or(0);
            (idx, best)
        })
        .collect();
    Ok(LabeledOccupancy { grid: *grid, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid() -> GridConfig {
        GridConfig::new([0.0, 0.0, 0.0], 0.2, [10, 10, 10]).unwrap()
    }

    #[test]
    fn single_point_voxelizes_to_first_cell() {
        let cloud = PointCloud::new(vec![Vec3::new(0.1, 0.1, 0.1)]);
        let occ = voxelize(&cloud, &unit_grid()).unwrap();
        assert_eq!(occ.occupied.into_iter().collect::<Vec<_>>(), vec![[0, 0, 0]]);
    }

    #[test]
    fn empty_cloud_gives_empty_occupancy() {
        let occ = voxelize(&PointCloud::default(), &unit_grid()).unwrap();
        assert!(occ.is_empty());
    }

    #[test]
    fn non_finite_rejected() {
        let cloud = PointCloud::new(vec![Vec3::new(0.1, f64::NAN, 0.1)]);
        assert!(matches!(voxelize(&cloud, &unit_grid()), Err(LodeError::NonFinite { index: 0 })));
    }

    #[test]
    fn out_of_box_points_are_dropped_and_counted() {
        let cloud = PointCloud::new(vec![Vec3::new(-0.1, 0.1, 0.1), Vec3::new(2.0, 0.1, 0.1), Vec3::new(0.3, 0.3, 0.3)]);
        let (occ, dropped) = voxelize_counted(&cloud, &unit_grid()).unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(occ.len(), 1);
    }

    #[test]
    fn face_ties_go_to_higher_cell() {
        let cloud = PointCloud::new(vec![Vec3::new(0.25, 0.5, 0.75)]);
        let g = GridConfig::new([0.0; 3], 0.25, [4, 4, 4]).unwrap();
        let occ = voxelize(&cloud, &g).unwrap();
        assert!(occ.contains(&[1, 2, 3]));
    }

    #[test]
    fn random_points_match_floor_division_oracle() {
        let g = unit_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)))
            .collect();
        let occ = voxelize(&PointCloud::new(pts.clone()), &g).unwrap();
        let mut oracle = BTreeSet::new();
        for p in &pts {
            let mut idx = [0i32; 3];
            for a in 0..3 {
                let mut k = 0i32;
                // smallest k with (k+1)*edge > p
                while (k + 1) as f64 * 0.2 <= p[a] {
                    k += 1;
                }
                idx[a] = k;
            }
            oracle.insert(idx);
        }
        assert_eq!(occ.occupied, oracle);
    }

    #[test]
    fn voxel_center_examples() {
        let g = unit_grid();
        let c = g.voxel_center([0, 0, 0]).unwrap();
        assert!((c - Vec3::new(0.1, 0.1, 0.1)).norm() < 1e-12);
        let road = GridConfig::road_scene();
        let c = road.voxel_center([255, 255, 31]).unwrap();
        assert!((c - Vec3::new(51.1, 25.5, 4.3)).norm() < 1e-9);
        assert!(road.voxel_center([256, 0, 0]).is_err());
        assert!(road.voxel_center([0, -1, 0]).is_err());
    }

    #[test]
    fn normalize_corners_and_center() {
        let g = GridConfig::road_scene();
        assert!((g.normalize(&g.origin()) - Vec3::new(-1.0, -1.0, -1.0)).norm() < 1e-12);
        assert!(g.normalize(&g.center()).norm() < 1e-12);
        assert!((g.normalize(&g.max_corner()) - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn labeled_voxelization_takes_majority() {
        let g = unit_grid();
        let cloud = PointCloud::new(vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.12, 0.1, 0.1), Vec3::new(0.15, 0.1, 0.1)])
            .with_labels(vec![2, 1, 1])
            .unwrap();
        let lab = voxelize_labeled(&cloud, &g).unwrap();
        assert_eq!(lab.labels[&[0, 0, 0]], 1);
    }

    proptest! {
        #[test]
        fn voxel_center_lies_in_its_cell(i in 0i32..64, j in 0i32..64, k in 0i32..16) {
            let g = GridConfig::desk();
            let c = g.voxel_center([i, j, k]).unwrap();
            prop_assert_eq!(g.cell_of(&c), [i, j, k]);
            let occ = voxelize(&PointCloud::new(vec![c]), &g).unwrap();
            prop_assert_eq!(occ.occupied.into_iter().collect::<Vec<_>>(), vec![[i, j, k]]);
        }

        #[test]
        fn normalize_round_trip(x in -30.0f64..60.0, y in -30.0f64..30.0, z in -3.0f64..5.0) {
            let g = GridConfig::road_scene();
            let p = Vec3::new(x, y, z);
            let back = g.denormalize(&g.normalize(&p));
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn voxelize_permutation_invariant(seed in 0u64..1000) {
            let g = unit_grid();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts: Vec<Vec3> = (0..50)
                .map(|_| Vec3::new(rng.random_range(-0.5..2.5), rng.random_range(-0.5..2.5), rng.random_range(-0.5..2.5)))
                .collect();
            let a = voxelize(&PointCloud::new(pts.clone()), &g).unwrap();
            pts.reverse();
            pts.rotate_left(seed as usize % 50);
            let b = voxelize(&PointCloud::new(pts), &g).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
