//! Scene sources: analytic primitive scenes with exact distances, normals and
//! labels; a sphere-tracing LiDAR simulator; KITTI-style binary formats.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::{Rotation3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};
use crate::grid::{voxelize, Coord, GridConfig, LabeledOccupancy, OccupancyVolume, PointCloud, Vec3};

pub const TRACE_MAX_STEPS: usize = 128;
pub const TRACE_TOLERANCE: f64 = 1e-3;
pub const TRACE_MAX_RANGE: f64 = 60.0;

/// Class ids of the synthetic benchmark.
pub const CLASS_GROUND: u16 = 0;
pub const CLASS_VEHICLE: u16 = 1;
pub const CLASS_STRUCTURE: u16 = 2;
pub const CLASS_ROUND: u16 = 3;
pub const SYNTH_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Points with `normal . x = offset`; `normal` is unit length.
    Plane { normal: [f64; 3], offset: f64 },
    /// Box rotated by `yaw` radians about the vertical axis.
    Box { center: [f64; 3], half: [f64; 3], yaw: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Capped cylinder with a vertical axis.
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub class: u16,
}

fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(LodeError::DegeneratePrimitive(what.to_string()));
        match self {
            Shape::Plane { normal, offset } => {
                let n = v3(normal).norm();
                if !((n - 1.0).abs() <= 1e-9 && offset.is_finite()) {
                    return bad("plane normal must be unit length");
                }
            }
            Shape::Box { half, yaw, .. } => {
                if half.iter().any(|h| !(*h > 0.0)) || !yaw.is_finite() {
                    return bad("box half extents must be positive");
                }
            }
            Shape::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return bad("sphere radius must be positive");
                }
            }
            Shape::Cylinder { radius, half_height, .. } => {
                if !(*radius > 0.0 && *half_height > 0.0) {
                    return bad("cylinder radius and height must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Plane { normal, offset } => v3(normal).dot(p) - offset,
            Shape::Box { center, half, yaw } => {
                let local = Rotation3::from_axis_angle(&Vec3::z_axis(), -yaw) * (p - v3(center));
                let q = local.abs() - v3(half);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Sphere { center, radius } => (p - v3(center)).norm() - radius,
            Shape::Cylinder { center, radius, half_height } => {
                let d = p - v3(center);
                let q = Vector2::new(Vector2::new(d[0], d[1]).norm() - radius, d[2].abs() - half_height);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }

    /// Uniform surface samples with outward normals, clipped to `bx`.
    fn sample_surface<R: Rng>(&self, density: f64, bx: &GridConfig, rng: &mut R) -> Vec<(Vec3, Vec3)> {
        let count = |area: f64, rng: &mut R| {
            let n = area * density;
            let base = n.floor();
            base as usize + usize::from(rng.random::<f64>() < n - base)
        };
        let mut out = Vec::new();
        match self {
            Shape::Plane { normal, offset } => {
                let n = v3(normal);
                let (t1, t2) = tangent_basis(&n);
                let c = bx.center();
                let foot = c - n * (n.dot(&c) - offset);
                let half = bx.extent().norm() / 2.0;
                for _ in 0..count(4.0 * half * half, rng) {
                    let p = foot + t1 * rng.random_range(-half..half) + t2 * rng.random_range(-half..half);
                    out.push((p, n));
                }
            }
            Shape::Box { center, half, yaw } => {
                let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), *yaw);
                let h = v3(half);
                for axis in 0..3 {
                    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                    let area = 4.0 * h[a] * h[b];
                    for sign in [-1.0, 1.0] {
                        for _ in 0..count(area, rng) {
                            let mut local = Vec3::zeros();
                            local[axis] = sign * h[axis];
                            local[a] = rng.random_range(-h[a]..h[a]);
                            local[b] = rng.random_range(-h[b]..h[b]);
                            let mut nl = Vec3::zeros();
                            nl[axis] = sign;
                            out.push((v3(center) + rot * local, rot * nl));
                        }
                    }
                }
            }
            Shape::Sphere { center, radius } => {
                for _ in 0..count(4.0 * PI * radius * radius, rng) {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let phi = rng.random_range(0.0..2.0 * PI);
                    let r = (1.0 - z * z).sqrt();
                    let n = Vec3::new(r * phi.cos(), r * phi.sin(), z);
                    out.push((v3(center) + n * *radius, n));
                }
            }
            Shape::Cylinder { center, radius, half_height } => {
                let c = v3(center);
                for _ in 0..count(2.0 * PI * radius * 2.0 * half_height, rng) {
                    let phi = rng.random_range(0.0..2.0 * PI);
                    let n = Vec3::new(phi.cos(), phi.sin(), 0.0);
                    out.push((c + n * *radius + Vec3::z() * rng.random_range(-half_height..*half_height), n));
                }
                for sign in [-1.0, 1.0] {
                    for _ in 0..count(PI * radius * radius, rng) {
                        let r = radius * rng.random::<f64>().sqrt();
                        let phi = rng.random_range(0.0..2.0 * PI);
                        let p = c + Vec3::new(r * phi.cos(), r * phi.sin(), sign * half_height);
                        out.push((p, Vec3::z() * sign));
                    }
                }
            }
        }
        out.retain(|(p, _)| bx.contains_point(p));
        out
    }
}

fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n[0].abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    (t1, n.cross(&t1))
}

/// Union of primitives evaluated as the minimum of their distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSdf {
    pub primitives: Vec<Primitive>,
}

impl SceneSdf {
    pub fn eval(&self, p: &Vec3) -> f64 {
        self.primitives.iter().map(|q| q.shape.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Distance and class of the closest primitive.
    pub fn closest(&self, p: &Vec3) -> (f64, u16) {
        let mut best = (f64::INFINITY, 0);
        for q in &self.primitives {
            let d = q.shape.sdf(p);
            if d < best.0 {
                best = (d, q.class);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub grid: GridConfig,
    pub seed: u64,
    pub num_classes: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(LodeError::Config("scene needs at least one primitive".into()));
        }
        for p in &self.primitives {
            p.shape.validate()?;
            if p.class as usize >= self.num_classes {
                return Err(LodeError::LabelOutOfRange { label: p.class, classes: self.num_classes });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    /// Sparse observed points.
    pub input_cloud: PointCloud,
    /// Dense ground-truth surface points with normals and labels.
    pub gt_cloud: PointCloud,
    pub gt_occ: OccupancyVolume,
    pub analytic_sdf: Option<SceneSdf>,
    pub grid: GridConfig,
    pub num_classes: usize,
    /// Sensor position; estimated normals of the input are oriented toward it.
    pub sensor: Vec3,
}

impl SceneRecord {
    /// Majority-label ground-truth occupancy.
    pub fn gt_labeled(&self) -> Result<LabeledOccupancy> {
        crate::grid::voxelize_labeled(&self.gt_cloud, &self.grid)
    }
}

/// Dense ground truth for a scene; the input cloud starts empty (see [`lidar_scan`]).
pub fn synth_scene(spec: &SceneSpec, gt_density: f64, id: &str) -> Result<SceneRecord> {
    spec.validate()?;
    if !(gt_density > 0.0) {
        return Err(LodeError::Config(format!("gt_density must be positive, got {gt_density}")));
    }
    let sdf = SceneSdf { primitives: spec.primitives.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    for prim in &spec.primitives {
        for (p, n) in prim.shape.sample_surface(gt_density, &spec.grid, &mut rng) {
            // drop samples buried inside other primitives
            if sdf.eval(&p) < -1e-9 {
                continue;
            }
            points.push(p);
            normals.push(n);
            labels.push(prim.class);
        }
    }
    let gt_cloud = PointCloud::new(points).with_normals(normals)?.with_labels(labels)?;
    let gt_occ = voxelize(&gt_cloud, &spec.grid)?;
    Ok(SceneRecord {
        id: id.to_string(),
        input_cloud: PointCloud::new(Vec::new()),
        gt_cloud,
        gt_occ,
        analytic_sdf: Some(sdf),
        grid: spec.grid,
        num_classes: spec.num_classes,
        sensor: Vec3::from(LidarConfig::default().sensor),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub sensor: [f64; 3],
    pub channels: usize,
    pub azimuth_step_deg: f64,
    pub noise_sigma: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Azimuth window, degrees, centered on +x.
    pub field_of_view_deg: f64,
    pub seed: u64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            sensor: [0.0, 0.0, 1.7],
            channels: 64,
            azimuth_step_deg: 0.4,
            noise_sigma: 0.0,
            elevation_min_deg: -24.8,
            elevation_max_deg: 2.0,
            field_of_view_deg: 360.0,
            seed: 0,
        }
    }
}

/// Sphere-traces the analytic scene along a fan of rays; returns first hits
/// with range noise and the label of the closest primitive.
pub fn lidar_scan(scene: &SceneRecord, cfg: &LidarConfig) -> Result<PointCloud> {
    let sdf = scene.analytic_sdf.as_ref().ok_or_else(|| LodeError::Config("scene has no analytic sdf".into()))?;
    if cfg.channels == 0 || !(cfg.azimuth_step_deg > 0.0) || !(cfg.noise_sigma >= 0.0) {
        return Err(LodeError::Config("lidar needs channels >= 1, positive azimuth step and sigma >= 0".into()));
    }
    let origin = v3(&cfg.sensor);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| LodeError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_az = (cfg.field_of_view_deg / cfg.azimuth_step_deg).floor().max(1.0) as usize;
    let az0 = -cfg.field_of_view_deg / 2.0;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for c in 0..cfg.channels {
        let elev = if cfg.channels == 1 {
            cfg.elevation_min_deg
        } else {
            cfg.elevation_max_deg + (cfg.elevation_min_deg - cfg.elevation_max_deg) * c as f64 / (cfg.channels - 1) as f64
        };
        let (se, ce) = elev.to_radians().sin_cos();
        for a in 0..n_az {
            let az = (az0 + a as f64 * cfg.azimuth_step_deg).to_radians();
            let dir = Vec3::new(ce * az.cos(), ce * az.sin(), se);
            if let Some(t) = sphere_trace(sdf, &origin, &dir) {
                let r = if cfg.noise_sigma > 0.0 { t + noise.sample(&mut rng) } else { t };
                let hit = origin + dir * t;
                points.push(origin + dir * r);
                labels.push(sdf.closest(&hit).1);
            }
        }
    }
    PointCloud::new(points).with_labels(labels)
}

/// Ray parameter of the first surface hit, if any, within range.
pub fn sphere_trace(sdf: &SceneSdf, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_MAX_STEPS {
        let d = sdf.eval(&(origin + dir * t));
        if d.abs() <= TRACE_TOLERANCE {
            return Some(t);
        }
        if d < 0.0 {
            return None;
        }
        t += d;
        if t > TRACE_MAX_RANGE {
            return None;
        }
    }
    None
}

/// Synthetic scene with simulated scan; the input keeps only in-box returns.
pub fn synth_record(spec: &SceneSpec, gt_density: f64, lidar: &LidarConfig, id: &str) -> Result<SceneRecord> {
    let mut rec = synth_scene(spec, gt_density, id)?;
    let scan = lidar_scan(&rec, lidar)?;
    rec.input_cloud = scan.filter(|_, p| spec.grid.contains_point(p));
    rec.sensor = Vec3::from(lidar.sensor);
    Ok(rec)
}

/// One ground plane plus a resting sphere, on the desk grid.
pub fn sphere_plane_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        primitives: vec![
            Primitive { shape: Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 }, class: CLASS_GROUND },
            Primitive { shape: Shape::Sphere { center: [6.4, 0.0, 1.0], radius: 1.0 }, class: CLASS_ROUND },
        ],
        grid: GridConfig::desk(),
        seed,
        num_classes: SYNTH_CLASSES,
    }
}

/// Seeded desk benchmark scene: ground, 3-8 boxes or cylinders, 0-2 spheres.
pub fn desk_scene_spec(seed: u64) -> SceneSpec {
    let grid = GridConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = vec![Primitive { shape: Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 }, class: CLASS_GROUND }];
    let x_range = 2.5..grid.max_corner()[0] - 1.0;
    let y_half = grid.extent()[1] / 2.0 - 1.0;
    let n_objects = rng.random_range(3..=8);
    for _ in 0..n_objects {
        let x = rng.random_range(x_range.clone());
        let y = rng.random_range(-y_half..y_half);
        let kind = rng.random_range(0..3);
        let prim = match kind {
            0 => {
                let half = [rng.random_range(0.8..1.2), rng.random_range(0.4..0.8), rng.random_range(0.5..0.8)];
                Primitive {
                    shape: Shape::Box { center: [x, y, half[2]], half, yaw: rng.random_range(-PI..PI) },
                    class: CLASS_VEHICLE,
                }
            }
            1 => {
                let half = [rng.random_range(0.1..0.25), rng.random_range(1.2..3.0), rng.random_range(0.6..1.2)];
                Primitive {
                    shape: Shape::Box { center: [x, y, half[2]], half, yaw: rng.random_range(-PI..PI) },
                    class: CLASS_STRUCTURE,
                }
            }
            _ => {
                let half_height = rng.random_range(0.6..1.4);
                Primitive {
                    shape: Shape::Cylinder { center: [x, y, half_height], radius: rng.random_range(0.2..0.5), half_height },
                    class: CLASS_STRUCTURE,
                }
            }
        };
        primitives.push(prim);
    }
    for _ in 0..rng.random_range(0..=2) {
        let r = rng.random_range(0.4..0.9);
        let center = [rng.random_range(x_range.clone()), rng.random_range(-y_half..y_half), r];
        primitives.push(Primitive { shape: Shape::Sphere { center, radius: r }, class: CLASS_ROUND });
    }
    SceneSpec { primitives, grid, seed, num_classes: SYNTH_CLASSES }
}

/// Seeds of the `n` benchmark scenes derived from one base seed.
pub fn benchmark_specs(n: usize, base_seed: u64) -> Vec<SceneSpec> {
    (0..n).map(|i| desk_scene_spec(base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64))).collect()
}

/// Little-endian `f32 x, y, z, remission` records.
pub fn load_kitti_points(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    parse_kitti_points(&bytes, path)
}

fn parse_kitti_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(LodeError::Format { path: path.to_path_buf(), msg: format!("size {} is not a multiple of 16", bytes.len()) });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|r| {
            Vec3::new(
                LittleEndian::read_f32(&r[0..4]) as f64,
                LittleEndian::read_f32(&r[4..8]) as f64,
                LittleEndian::read_f32(&r[8..12]) as f64,
            )
        })
        .collect();
    Ok(PointCloud::new(points))
}

fn voxel_linear(grid: &GridConfig, c: &Coord) -> usize {
    let [_, w, h] = grid.dims;
    (c[0] as usize * w + c[1] as usize) * h + c[2] as usize
}

/// Bit-packed occupancy, most significant bit first, x-major then y then z.
pub fn pack_kitti_voxels(occ: &OccupancyVolume) -> Vec<u8> {
    let n = occ.grid.num_voxels();
    let mut out = vec![0u8; n.div_ceil(8)];
    for c in &occ.occupied {
        let i = voxel_linear(&occ.grid, c);
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

pub fn unpack_kitti_voxels(bytes: &[u8], grid: &GridConfig, path: &Path) -> Result<OccupancyVolume> {
    let n = grid.num_voxels();
    if bytes.len() * 8 != n {
        return Err(LodeError::Format { path: path.to_path_buf(), msg: format!("expected {} bytes, found {}", n / 8, bytes.len()) });
    }
    let [_, w, h] = grid.dims;
    let mut occupied = std::collections::BTreeSet::new();
    for (byte_i, &b) in bytes.iter().enumerate() {
        if b == 0 {
            continue;
        }
        for bit in 0..8 {
            if b & (0x80 >> bit) != 0 {
                let i = byte_i * 8 + bit;
                occupied.insert([(i / (w * h)) as i32, ((i / h) % w) as i32, (i % h) as i32]);
            }
        }
    }
    Ok(OccupancyVolume { grid: *grid, occupied })
}

/// Voxel ground truth on the road-scene grid, with optional per-voxel labels
/// remapped through `class_map` (identity when absent). Only occupied voxels
/// carry labels.
pub fn load_kitti_voxels(
    path_occupancy: &Path,
    path_labels: Option<&Path>,
    class_map: Option<&HashMap<u16, u16>>,
) -> Result<(OccupancyVolume, Option<LabeledOccupancy>)> {
    let grid = GridConfig::road_scene();
    let occ = unpack_kitti_voxels(&fs::read(path_occupancy)?, &grid, path_occupancy)?;
    let labels = match path_labels {
        None => None,
        Some(p) => {
            let bytes = fs::read(p)?;
            if bytes.len() != 2 * grid.num_voxels() {
                return Err(LodeError::Format {
                    path: p.to_path_buf(),
                    msg: format!("expected {} bytes, found {}", 2 * grid.num_voxels(), bytes.len()),
                });
            }
            let mut labels = std::collections::BTreeMap::new();
            for c in &occ.occupied {
                let i = voxel_linear(&grid, c);
                let raw = LittleEndian::read_u16(&bytes[2 * i..2 * i + 2]);
                let mapped = match class_map {
                    Some(m) => *m.get(&raw).ok_or(LodeError::UnknownLabel(raw as u32))?,
                    None => raw,
                };
                labels.insert(*c, mapped);
            }
            Some(LabeledOccupancy { grid, labels })
        }
    };
    Ok((occ, labels))
}

/// Dataset manifest entry; synthetic scenes point at their spec file, real
/// scenes at binary scan and voxel files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub gt_density: f64,
    pub lidar: LidarConfig,
    pub scenes: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Materializes every scene; relative paths resolve against `root`.
    pub fn load_records(&self, root: &Path) -> Result<Vec<SceneRecord>> {
        self.scenes.iter().map(|e| self.load_entry(e, root)).collect()
    }

    pub fn load_entry(&self, e: &ManifestEntry, root: &Path) -> Result<SceneRecord> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { root.join(p) };
        if let Some(spec_path) = &e.spec {
            let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(resolve(spec_path))?)?;
            return synth_record(&spec, self.gt_density, &self.lidar, &e.id);
        }
        let (points, occ) = match (&e.points, &e.occupancy) {
            (Some(p), Some(o)) => (resolve(p), resolve(o)),
            _ => return Err(LodeError::Config(format!("scene {} needs a spec or points + occupancy", e.id))),
        };
        let labels_path = e.labels.as_ref().map(resolve);
        let (gt_occ, labeled) = load_kitti_voxels(&occ, labels_path.as_deref(), None)?;
        let grid = gt_occ.grid;
        let input_cloud = load_kitti_points(&points)?.filter(|_, p| grid.contains_point(p));
        // voxel centers stand in for dense surface points; normals are estimated
        let centers = gt_occ.centers();
        let est = crate::sampler::estimate_normals(&PointCloud::new(centers.clone()), 16.min(centers.len().saturating_sub(1)).max(1), &Vec3::zeros())?;
        let mut gt_cloud = est.valid_cloud();
        if let Some(l) = &labeled {
            let lab = gt_cloud.points.iter().map(|p| l.labels.get(&grid.cell_of(p)).copied().unwrap_or(0)).collect();
            gt_cloud = gt_cloud.with_labels(lab)?;
        }
        Ok(SceneRecord { id: e.id.clone(), input_cloud, gt_cloud, gt_occ, analytic_sdf: None, grid, num_classes: 20, sensor: Vec3::zeros() })
    }
}
