//! Loss terms for fitting signed distance fields with Eikonal regularization.
//!
//! [`LossBreakdown`] stores unweighted Monte-Carlo means; all six weights are
//! applied once, when the total is recombined.

use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};
use crate::field::FieldEval;
use crate::grid::Vec3;

pub const NORMAL_EPS: f64 = 1e-8;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eikonal: f64,
    pub normal: f64,
    pub surface: f64,
    pub off_surface: f64,
    pub completion: f64,
    pub semantic: f64,
    pub psi_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eikonal: 3000.0,
            normal: 100.0,
            surface: 100.0,
            off_surface: 50.0,
            completion: 100.0,
            semantic: 0.0,
            psi_alpha: 100.0,
        }
    }
}

impl LossWeights {
    /// Defaults with the semantic term switched on.
    pub fn with_semantics() -> Self {
        Self { semantic: 50.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.eikonal, self.normal, self.surface, self.off_surface, self.completion, self.semantic, self.psi_alpha];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(LodeError::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoints {
    pub points: Vec<Vec3>,
    pub labels: Vec<u16>,
}

/// Loss domains for one optimizer step. Eikonal points are the union of the
/// on- and off-surface sets, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub on_points: Vec<Vec3>,
    pub on_normals: Vec<Vec3>,
    pub off_points: Vec<Vec3>,
    pub labeled: Option<LabeledPoints>,
}

impl SampleBatch {
    pub fn eikonal_points(&self) -> impl Iterator<Item = &Vec3> {
        self.on_points.iter().chain(&self.off_points)
    }

    pub fn len(&self) -> usize {
        self.on_points.len() + self.off_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub eikonal: f64,
    pub normal: f64,
    pub surface: f64,
    pub off_surface: f64,
    pub completion: f64,
    pub semantic: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recombine(&mut self, w: &LossWeights) {
        self.total = w.eikonal * self.eikonal
            + w.normal * self.normal
            + w.surface * self.surface
            + w.off_surface * self.off_surface
            + w.completion * self.completion
            + w.semantic * self.semantic;
    }

    pub const CSV_HEADER: &'static str = "step,scene_id,eikonal,normal,surface,off_surface,completion,semantic,total";

    pub fn csv_line(&self, step: u64, scene_id: &str) -> String {
        format!(
            "{step},{scene_id},{},{},{},{},{},{},{}",
            self.eikonal, self.normal, self.surface, self.off_surface, self.completion, self.semantic, self.total
        )
    }
}

pub fn psi(value: f64, alpha: f64) -> f64 {
    (-alpha * value.abs()).exp()
}

pub(crate) fn psi_derivative(value: f64, alpha: f64) -> f64 {
    -alpha * sign(value) * psi(value, alpha)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `| |g| - 1 |` and its gradient in `g`.
pub(crate) fn eikonal_term(g: &Vec3) -> (f64, Vec3) {
    let n = g.norm();
    let d = if n > 0.0 { g * (sign(n - 1.0) / n) } else { Vec3::zeros() };
    ((n - 1.0).abs(), d)
}

/// `1 - cos(g, n)` with an epsilon-guarded denominator, and its gradient in `g`.
pub(crate) fn normal_term(g: &Vec3, normal: &Vec3) -> (f64, Vec3) {
    let gn = g.norm();
    let nn = normal.norm();
    let denom = gn * nn + NORMAL_EPS;
    let dot = g.dot(normal);
    let cos = dot / denom;
    let mut dcos = normal / denom;
    if gn > 0.0 {
        dcos -= g * (dot * nn / (gn * denom * denom));
    }
    (1.0 - cos, -dcos)
}

fn check_batch(evals: &[FieldEval], batch: &SampleBatch) -> Result<()> {
    if batch.on_points.is_empty() {
        return Err(LodeError::EmptyInput);
    }
    if batch.on_normals.len() != batch.on_points.len() {
        return Err(LodeError::LengthMismatch { expected: batch.on_points.len(), got: batch.on_normals.len() });
    }
    if evals.len() != batch.len() {
        return Err(LodeError::LengthMismatch { expected: batch.len(), got: evals.len() });
    }
    Ok(())
}

/// Eikonal, normal, on-surface and off-surface means over a batch; `evals`
/// holds on-surface points first, then off-surface points.
pub fn lode_loss(evals: &[FieldEval], batch: &SampleBatch, w: &LossWeights) -> Result<LossBreakdown> {
    check_batch(evals, batch)?;
    let n_on = batch.on_points.len();
    let (on, off) = evals.split_at(n_on);
    let mut b = LossBreakdown {
        eikonal: mean(evals.iter().map(|e| eikonal_term(&e.spatial_grad).0)),
        normal: mean(on.iter().zip(&batch.on_normals).map(|(e, n)| normal_term(&e.spatial_grad, n).0)),
        surface: mean(on.iter().map(|e| e.value.abs())),
        off_surface: if off.is_empty() { 0.0 } else { mean(off.iter().map(|e| psi(e.value, w.psi_alpha))) },
        ..Default::default()
    };
    b.recombine(w);
    Ok(b)
}

/// The unconditioned constraint set. The formulas coincide with
/// [`lode_loss`]; only the sampling domains differ (sparse input instead of
/// dense ground truth), which is the caller's business.
pub fn baseline_loss(evals: &[FieldEval], batch: &SampleBatch, w: &LossWeights) -> Result<LossBreakdown> {
    lode_loss(evals, batch, w)
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Clamped softmax probabilities.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Cross entropy of one point, and its gradient in the logits.
pub(crate) fn cross_entropy_term(logits: &[f64], label: u16) -> Result<(f64, Vec<f64>)> {
    let c = label as usize;
    if c >= logits.len() {
        return Err(LodeError::LabelOutOfRange { label, classes: logits.len() });
    }
    let p = softmax(logits);
    let py = p[c];
    let mut g = vec![0.0; logits.len()];
    if py > PROB_CLAMP {
        g.copy_from_slice(&p);
        g[c] -= 1.0;
    }
    Ok((-(py.max(PROB_CLAMP)).ln(), g))
}

pub fn semantic_loss(logits: &[Vec<f64>], labels: &[u16]) -> Result<f64> {
    if logits.is_empty() {
        return Err(LodeError::EmptyInput);
    }
    if logits.len() != labels.len() {
        return Err(LodeError::LengthMismatch { expected: logits.len(), got: labels.len() });
    }
    let mut s = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        s += cross_entropy_term(l, y)?.0;
    }
    Ok(s / logits.len() as f64)
}
