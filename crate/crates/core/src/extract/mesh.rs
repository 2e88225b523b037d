//! Marching cubes over an [`SdfGrid`] and mesh export.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mc_table::TRI_TABLE;
use super::SdfGrid;
use crate::error::{LodeError, Result};
use crate::grid::Vec3;
use crate::knn::PointIndex;

/// Triangles below this area are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Vertex colors by class id, cycled for larger ids.
pub const PALETTE: [[u8; 3]; 8] = [
    [128, 64, 128],
    [100, 150, 245],
    [255, 200, 0],
    [220, 20, 60],
    [0, 175, 0],
    [150, 240, 80],
    [255, 120, 50],
    [90, 30, 150],
];

pub fn palette_color(label: u16) -> [u8; 3] {
    PALETTE[label as usize % PALETTE.len()]
}

const CORNERS: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub labels: Option<Vec<u16>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn corners(&self, t: &[u32; 3]) -> [Vec3; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Divergence-theorem volume; positive when triangles wind outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(LodeError::LengthMismatch { expected: n, got: l.len() });
            }
        }
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(LodeError::NonFinite { index: i });
            }
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i as usize >= n) {
                return Err(LodeError::Config(format!("triangle {t:?} indexes past {n} vertices")));
            }
        }
        Ok(())
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vec3> {
        if self.triangles.is_empty() {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in &self.triangles {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r = rng.random_range(0.0..acc);
                let ti = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
                let [a, b, c] = self.corners(&self.triangles[ti]);
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ply_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Binary little-endian PLY; labelled meshes carry palette colors and the label.
    pub fn write_ply_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", self.vertices.len())?;
        write!(w, "property float x\nproperty float y\nproperty float z\n")?;
        if self.labels.is_some() {
            write!(w, "property uchar red\nproperty uchar green\nproperty uchar blue\nproperty ushort label\n")?;
        }
        write!(w, "element face {}\nproperty list uchar int vertex_indices\nend_header\n", self.triangles.len())?;
        for (i, v) in self.vertices.iter().enumerate() {
            for k in 0..3 {
                w.write_f32::<LE>(v[k] as f32)?;
            }
            if let Some(l) = &self.labels {
                w.write_all(&palette_color(l[i]))?;
                w.write_u16::<LE>(l[i])?;
            }
        }
        for t in &self.triangles {
            w.write_u8(3)?;
            for &i in t {
                w.write_i32::<LE>(i as i32)?;
            }
        }
        Ok(())
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_obj_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Wavefront OBJ; labelled meshes append `r g b` in [0, 1] to each vertex.
    pub fn write_obj_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        for (i, v) in self.vertices.iter().enumerate() {
            write!(w, "v {} {} {}", v[0], v[1], v[2])?;
            if let Some(l) = &self.labels {
                let c = palette_color(l[i]);
                write!(w, " {} {} {}", c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0)?;
            }
            writeln!(w)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

/// Triangulates the `level` set with linear interpolation along cell edges.
/// Vertices are shared between neighbouring cells, and triangles wind so
/// their normals point toward larger values.
pub fn marching_cubes(sdf: &SdfGrid, level: f64) -> TriangleMesh {
    let [nx, ny, nz] = sdf.lattice.counts;
    let mut mesh = TriangleMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let vals = CORNERS.map(|o| sdf.value(i + o[0], j + o[1], k + o[2]));
                let cube = (0..8).filter(|&c| vals[c] < level).fold(0usize, |acc, c| acc | (1 << c));
                if cube == 0 || cube == 255 {
                    continue;
                }
                for tri in TRI_TABLE[cube].chunks(3).take_while(|t| t[0] >= 0) {
                    let idx = [tri[0], tri[2], tri[1]].map(|e| {
                        let [a, b] = EDGES[e as usize];
                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                        let lo = if ca <= cb { ca } else { cb };
                        let hi = if ca <= cb { cb } else { ca };
                        let axis = (0..3).find(|&d| lo[d] != hi[d]).expect("edge spans one axis");
                        let p0 = [i + lo[0], j + lo[1], k + lo[2]];
                        let key = (sdf.lattice.index(p0[0], p0[1], p0[2]), axis);
                        *edge_vertex.entry(key).or_insert_with(|| {
                            let mut p1 = p0;
                            p1[axis] += 1;
                            let (v0, v1) = (sdf.value(p0[0], p0[1], p0[2]), sdf.value(p1[0], p1[1], p1[2]));
                            let t = if v1 != v0 { ((level - v0) / (v1 - v0)).clamp(0.0, 1.0) } else { 0.5 };
                            let x0 = sdf.lattice.point(p0[0], p0[1], p0[2]);
                            let x1 = sdf.lattice.point(p1[0], p1[1], p1[2]);
                            mesh.vertices.push(x0 + (x1 - x0) * t);
                            (mesh.vertices.len() - 1) as u32
                        })
                    });
                    if mesh.triangle_area(&idx) >= MIN_TRIANGLE_AREA {
                        mesh.triangles.push(idx);
                    }
                }
            }
        }
    }
    mesh
}

/// Symmetric Hausdorff distance between `n` area-weighted samples of each mesh.
pub fn sampled_hausdorff(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let pa = a.sample_surface(n, seed);
    let pb = b.sample_surface(n, seed.wrapping_add(1));
    let (ia, ib) = (PointIndex::new(&pa)?, PointIndex::new(&pb)?);
    let one_way = |from: &[Vec3], to: &PointIndex| from.iter().map(|p| to.nearest(p).1).fold(0.0, f64::max);
    Ok(one_way(&pa, &ib).max(one_way(&pb, &ia)))
}
