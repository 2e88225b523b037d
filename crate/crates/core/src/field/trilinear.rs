//! Sampling a sparse shape-embedding volume at continuous positions.
//!
//! Embedding voxels live on the lattice of stride `s` of the scene grid; the
//! voxel with base coordinate `c` is centered at `origin + (c + s/2) * edge`.
//! Distances in the interpolation weights are measured in embedding-voxel
//! edges. Missing (pruned or out-of-grid) voxels contribute zero.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};
use crate::grid::{Coord, GridConfig, Vec3};
use crate::sparse::SparseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    Trilinear,
    /// Single closest embedding voxel (ablation).
    Nearest,
}

/// One embedding row touched by a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub weight: f64,
    /// d weight / d x, per meter.
    pub dweight: [f64; 3],
}

/// Continuous lattice position of `x`: integer base cell and fractional offset.
fn lattice_position(grid: &GridConfig, stride: i32, x: &Vec3) -> ([i32; 3], [f64; 3], f64) {
    let cell = grid.voxel_edge * stride as f64;
    let mut base = [0i32; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let q = (x[a] - grid.origin[a]) / cell - 0.5;
        let b = q.floor();
        base[a] = b as i32;
        frac[a] = q - b;
    }
    (base, frac, cell)
}

/// The `(lattice index, weight, d weight / dx)` of all 8 enclosing voxel
/// centers, whether present or not.
pub fn trilinear_weights(grid: &GridConfig, stride: i32, x: &Vec3) -> [([i32; 3], f64, [f64; 3]); 8] {
    let (base, t, cell) = lattice_position(grid, stride, x);
    let mut out = [([0i32; 3], 0.0, [0.0; 3]); 8];
    for (n, slot) in out.iter_mut().enumerate() {
        let bits = [(n >> 2) & 1, (n >> 1) & 1, n & 1];
        let mut w = [0.0; 3];
        let mut dw = [0.0; 3];
        let mut idx = [0i32; 3];
        for a in 0..3 {
            idx[a] = base[a] + bits[a] as i32;
            if bits[a] == 1 {
                w[a] = t[a];
                dw[a] = 1.0 / cell;
            } else {
                w[a] = 1.0 - t[a];
                dw[a] = -1.0 / cell;
            }
        }
        let weight = w[0] * w[1] * w[2];
        let grad = [dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]];
        *slot = (idx, weight, grad);
    }
    out
}

fn lattice_to_coord(idx: [i32; 3], stride: i32) -> Coord {
    [idx[0] * stride, idx[1] * stride, idx[2] * stride]
}

/// Present embedding rows contributing to the sample at `x`.
pub fn sample_neighbors(v_se: &SparseTensor, grid: &GridConfig, x: &Vec3, mode: SamplingMode) -> Result<Vec<Neighbor>> {
    if !grid.contains_point(x) {
        return Err(LodeError::OutsideBox { x: x[0], y: x[1], z: x[2] });
    }
    let s = v_se.stride();
    match mode {
        SamplingMode::Trilinear => Ok(trilinear_weights(grid, s, x)
            .iter()
            .filter_map(|&(idx, weight, dweight)| {
                v_se.row_of(&lattice_to_coord(idx, s)).map(|row| Neighbor { row, weight, dweight })
            })
            .collect()),
        SamplingMode::Nearest => {
            let cell = grid.voxel_edge * s as f64;
            let mut idx = [0i32; 3];
            for a in 0..3 {
                idx[a] = ((x[a] - grid.origin[a]) / cell).floor() as i32;
                let max = (grid.dims[a] as i32 - 1) / s;
                idx[a] = idx[a].clamp(0, max.max(0));
            }
            Ok(v_se
                .row_of(&lattice_to_coord(idx, s))
                .map(|row| Neighbor { row, weight: 1.0, dweight: [0.0; 3] })
                .into_iter()
                .collect())
        }
    }
}

/// Interpolated embedding at `x`.
pub fn trilinear_sample(v_se: &SparseTensor, grid: &GridConfig, x: &Vec3) -> Result<Vec<f64>> {
    let nb = sample_neighbors(v_se, grid, x, SamplingMode::Trilinear)?;
    let mut e = vec![0.0; v_se.channels()];
    accumulate(v_se, &nb, &mut e);
    Ok(e)
}

pub(crate) fn accumulate(v_se: &SparseTensor, nb: &[Neighbor], e: &mut [f64]) {
    for n in nb {
        for (dst, src) in e.iter_mut().zip(v_se.features.row(n.row)) {
            *dst += n.weight * src;
        }
    }
}

/// Gradient of `<upstream, e(x)>` with respect to every embedding row: each
/// neighbor receives `upstream` scaled by its weight.
pub fn trilinear_backprop(v_se: &SparseTensor, grid: &GridConfig, x: &Vec3, upstream: &[f64]) -> Result<Array2<f64>> {
    if upstream.len() != v_se.channels() {
        return Err(LodeError::ChannelMismatch { expected: v_se.channels(), got: upstream.len() });
    }
    let mut g = Array2::zeros(v_se.features.dim());
    for n in sample_neighbors(v_se, grid, x, SamplingMode::Trilinear)? {
        for (dst, u) in g.row_mut(n.row).iter_mut().zip(upstream) {
            *dst += n.weight * u;
        }
    }
    Ok(g)
}
