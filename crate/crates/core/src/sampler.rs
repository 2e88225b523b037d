//! Training batches: on-surface points with normals drawn from ground truth,
//! off-surface points drawn uniformly in the scene box.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};
use crate::grid::{GridConfig, PointCloud, Vec3};
use crate::knn::PointIndex;
use crate::loss::{LabeledPoints, SampleBatch};

/// Off-surface draws allowed per requested sample before rejection sampling gives up.
const MAX_REJECTION_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_on: usize,
    pub n_off: usize,
    pub seed: u64,
    pub normal_k: usize,
    pub reject_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_on: 16000, n_off: 16000, seed: 0, normal_k: 16, reject_radius: 0.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_on == 0 || self.n_off == 0 {
            return Err(LodeError::Config("n_on and n_off must be at least 1".into()));
        }
        if !(self.reject_radius >= 0.0 && self.reject_radius.is_finite()) {
            return Err(LodeError::Config(format!("reject_radius must be finite and non-negative, got {}", self.reject_radius)));
        }
        Ok(())
    }
}

fn uniform_in_box<R: Rng>(rng: &mut R, lo: &Vec3, hi: &Vec3) -> Vec3 {
    Vec3::new(rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1]), rng.random_range(lo[2]..=hi[2]))
}

/// Draws `n_on` ground-truth points with replacement and `n_off` uniform box
/// points. Ground-truth points outside the box are never drawn.
pub fn sample_batch(gt: &PointCloud, bx: &GridConfig, cfg: &SamplerConfig, labels_available: bool) -> Result<SampleBatch> {
    cfg.validate()?;
    gt.validate()?;
    let normals = gt.normals.as_ref().ok_or_else(|| LodeError::Config("ground truth has no normals".into()))?;
    let labels = if labels_available {
        Some(gt.labels.as_ref().ok_or_else(|| LodeError::Config("ground truth has no labels".into()))?)
    } else {
        None
    };
    let inside: Vec<usize> = (0..gt.points.len()).filter(|&i| bx.contains_point(&gt.points[i])).collect();
    if inside.is_empty() {
        return Err(LodeError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = (0..cfg.n_on).map(|_| inside[rng.random_range(0..inside.len())]).collect();
    let on_points: Vec<Vec3> = picks.iter().map(|&i| gt.points[i]).collect();
    let on_normals = picks.iter().map(|&i| normals[i]).collect();

    let lo = bx.origin();
    let hi = bx.max_corner();
    let mut off_points = Vec::with_capacity(cfg.n_off);
    if cfg.reject_radius > 0.0 {
        let index = PointIndex::new(&gt.points)?;
        let mut tries = 0usize;
        while off_points.len() < cfg.n_off {
            if tries >= MAX_REJECTION_TRIES * cfg.n_off {
                return Err(LodeError::Config(format!(
                    "rejection radius {} leaves no free space in the box",
                    cfg.reject_radius
                )));
            }
            tries += 1;
            let p = uniform_in_box(&mut rng, &lo, &hi);
            if index.nearest(&p).1 > cfg.reject_radius {
                off_points.push(p);
            }
        }
    } else {
        off_points.extend((0..cfg.n_off).map(|_| uniform_in_box(&mut rng, &lo, &hi)));
    }

    let labeled = labels.map(|l| LabeledPoints { points: on_points.clone(), labels: picks.iter().map(|&i| l[i]).collect() });
    Ok(SampleBatch { on_points, on_normals, off_points, labeled })
}

/// Normals estimated by local PCA, with a per-point validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEstimate {
    /// Input cloud with normals attached; invalid entries hold zero vectors.
    pub cloud: PointCloud,
    pub valid: Vec<bool>,
}

impl NormalEstimate {
    /// Only the points whose normal is valid.
    pub fn valid_cloud(&self) -> PointCloud {
        let keep: Vec<usize> = (0..self.valid.len()).filter(|&i| self.valid[i]).collect();
        self.cloud.select(&keep)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per point: the smallest-eigenvalue eigenvector of the covariance of its
/// `k` nearest neighbours (plus itself), flipped to face `orientation_point`.
/// Neighbourhoods of rank below two are flagged invalid.
pub fn estimate_normals(cloud: &PointCloud, k: usize, orientation_point: &Vec3) -> Result<NormalEstimate> {
    cloud.validate()?;
    if k == 0 {
        return Err(LodeError::Config("normal_k must be at least 1".into()));
    }
    if cloud.points.len() < k + 1 {
        return Err(LodeError::NotEnoughPoints { need: k + 1, have: cloud.points.len() });
    }
    let index = PointIndex::new(&cloud.points)?;
    let mut normals = Vec::with_capacity(cloud.points.len());
    let mut valid = Vec::with_capacity(cloud.points.len());
    for p in &cloud.points {
        let nb = index.k_nearest(p, k + 1);
        let mean = nb.iter().fold(Vec3::zeros(), |acc, &(i, _)| acc + cloud.points[i]) / nb.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(i, _) in &nb {
            let d = cloud.points[i] - mean;
            cov += d * d.transpose();
        }
        cov /= nb.len() as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let (l_mid, l_max) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
        if !(l_max > 0.0) || l_mid <= 1e-12 * l_max {
            normals.push(Vec3::zeros());
            valid.push(false);
            continue;
        }
        let mut n: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
        if n.dot(&(orientation_point - p)) < 0.0 {
            n = -n;
        }
        normals.push(n);
        valid.push(true);
    }
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok(NormalEstimate { cloud: out, valid })
}
